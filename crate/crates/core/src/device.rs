//! Wiring between the NBD session, the write tap, and the engine.
//!
//! The engine runs on its own thread, fed by the image's write tap and
//! driven by a periodic tick at half of lambda. Serving and replay share
//! that loop; replay swaps the wall clock for a virtual one derived from
//! recorded inter-arrival deltas, which makes inference timing fully
//! deterministic under test.

use std::io::{self, Read};
use std::net::TcpListener;
use std::os::unix::net::UnixListener;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use crate::block::{BlockError, BlockImage, WriteOp};
use crate::engine::{Engine, EngineEvent};
use crate::nbd::{NbdError, Server};
use crate::trace::{TraceError, TraceReader};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

/// Monotonic nanosecond clock with its origin at the call.
#[must_use]
pub fn monotonic_clock() -> Clock {
    let origin = Instant::now();
    Arc::new(move || origin.elapsed().as_nanos() as u64)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("trace does not match this image: {0}")]
    Mismatch(String),
}

/// Handle to the engine thread.
pub struct EngineRunner {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Engine>,
}

impl EngineRunner {
    /// Signals the loop and returns the engine once it drains.
    pub fn stop(self) -> Engine {
        self.stop.store(true, Ordering::SeqCst);
        self.handle.join().expect("engine thread panicked")
    }
}

/// Runs the engine loop on a dedicated thread: writes from `rx`, ticks every
/// `tick_ns` of the shared clock, events logged and optionally forwarded.
pub fn spawn_engine(
    mut engine: Engine,
    rx: Receiver<WriteOp>,
    clock: Clock,
    tick_ns: u64,
    sink: Option<Sender<EngineEvent>>,
) -> EngineRunner {
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let handle = thread::Builder::new()
        .name("worm-engine".into())
        .spawn(move || {
            let mut next_tick = clock() + tick_ns;
            loop {
                let now = clock();
                if now >= next_tick {
                    engine.tick(now);
                    next_tick = now + tick_ns;
                }
                let wait = next_tick.saturating_sub(clock());
                match rx.recv_timeout(Duration::from_nanos(wait)) {
                    Ok(op) => {
                        engine.on_write(&op);
                        while let Ok(more) = rx.try_recv() {
                            engine.on_write(&more);
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        engine.tick(clock());
                        drain_events(&mut engine, &sink);
                        break;
                    }
                }
                drain_events(&mut engine, &sink);
                if stop_flag.load(Ordering::SeqCst) {
                    while let Ok(more) = rx.try_recv() {
                        engine.on_write(&more);
                    }
                    engine.tick(clock());
                    drain_events(&mut engine, &sink);
                    break;
                }
            }
            engine
        })
        .expect("spawn engine thread");
    EngineRunner { stop, handle }
}

fn drain_events(engine: &mut Engine, sink: &Option<Sender<EngineEvent>>) {
    for ev in engine.take_events() {
        match &ev {
            EngineEvent::Sealed { log_id, offset, length, basis, .. } => {
                log::info!("sealed log {log_id}: [{offset}, +{length}) via {basis:?}");
            }
            EngineEvent::Deferred { log_id, reason } => {
                log::debug!("deferred log {log_id}: {reason:?}");
            }
            EngineEvent::ZeroCommitted { log_id, offset, length } => {
                log::warn!(
                    "zero-block budget exhausted on log {log_id}: sealed [{offset}, +{length}) as written"
                );
            }
            EngineEvent::Indicator(ind) => {
                log::error!("tamper indicator {}: {}", ind.kind.name(), ind.detail);
            }
            EngineEvent::Frozen { policy, .. } => {
                log::error!("seal store frozen under {policy:?}");
            }
            EngineEvent::Divergence { line } => {
                log::warn!("divergence: {line}");
            }
        }
        if let Some(s) = sink {
            let _ = s.send(ev);
        }
    }
}

/// Replays a recorded trace against an image and engine with virtual time.
///
/// The image must currently hold the exact base the trace was recorded over.
/// Ticks fire every `tick_ns` of virtual time between and after records, and
/// the stream settles for tau plus two ticks past the final write so every
/// quiescence window closes.
pub fn replay<R: Read>(
    reader: &mut TraceReader<R>,
    img: &Arc<BlockImage>,
    engine: &mut Engine,
    tick_ns: u64,
) -> Result<Vec<EngineEvent>, ReplayError> {
    let header = *reader.header();
    if header.capacity != img.capacity() {
        return Err(ReplayError::Mismatch(format!(
            "trace capacity {} != image capacity {}",
            header.capacity,
            img.capacity()
        )));
    }
    if header.fs != engine.config().fs || header.journal_mode != engine.config().journal_mode {
        return Err(ReplayError::Mismatch(format!(
            "trace is {:?}/{:?} but engine is configured {:?}/{:?}",
            header.fs,
            header.journal_mode,
            engine.config().fs,
            engine.config().journal_mode
        )));
    }
    let current = img.content_sha256()?;
    if current != header.base_sha256 {
        return Err(ReplayError::Mismatch(
            "image content does not hash to the trace's base image".into(),
        ));
    }

    let rx = img.subscribe()?;
    let tau = engine.config().tau_ns();
    let mut events = Vec::new();
    let mut now = 0u64;
    let mut next_tick = tick_ns;

    while let Some(rec) = reader.next_record()? {
        now += rec.arrival_delta_ns;
        while next_tick <= now {
            engine.tick(next_tick);
            next_tick += tick_ns;
        }
        img.apply_write(rec.offset, &rec.data, now)?;
        while let Ok(op) = rx.try_recv() {
            engine.on_write(&op);
        }
        events.extend(engine.take_events());
    }

    let settle_until = now + tau + 2 * tick_ns;
    while next_tick <= settle_until {
        engine.tick(next_tick);
        next_tick += tick_ns;
    }
    events.extend(engine.take_events());
    Ok(events)
}

/// Accepts connections forever on a Unix socket path, serving them serially.
pub fn serve_unix(server: &Server, path: &Path) -> Result<(), io::Error> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let listener = UnixListener::bind(path)?;
    log::info!("listening on unix:{}", path.display());
    for conn in listener.incoming() {
        match conn {
            Ok(mut stream) => match server.serve_connection(&mut stream) {
                Ok(Some(stats)) => log::info!(
                    "session closed: {} requests, {} bytes in, {} bytes out, {} writes rejected",
                    stats.requests,
                    stats.bytes_written,
                    stats.bytes_read,
                    stats.writes_rejected
                ),
                Ok(None) => log::info!("client aborted during negotiation"),
                Err(e) => log::warn!("session error: {e}"),
            },
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    Ok(())
}

/// Accepts connections forever on a TCP address, serving them serially.
pub fn serve_tcp(server: &Server, addr: &str) -> Result<(), io::Error> {
    let listener = TcpListener::bind(addr)?;
    log::info!("listening on tcp:{addr}");
    for conn in listener.incoming() {
        match conn {
            Ok(mut stream) => {
                let _ = stream.set_nodelay(true);
                match server.serve_connection(&mut stream) {
                    Ok(Some(stats)) => log::info!(
                        "session closed: {} requests, {} bytes in, {} bytes out, {} writes rejected",
                        stats.requests,
                        stats.bytes_written,
                        stats.bytes_read,
                        stats.writes_rejected
                    ),
                    Ok(None) => log::info!("client aborted during negotiation"),
                    Err(e) => log::warn!("session error: {e}"),
                }
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    Ok(())
}

/// Serves one pre-connected stream, skipping negotiation entirely. Local
/// attach mode for same-host supervisors.
pub fn serve_preconnected<S: Read + io::Write>(
    server: &Server,
    stream: &mut S,
) -> Result<crate::nbd::SessionStats, NbdError> {
    server.serve_transmission(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_clock_does_not_go_backwards() {
        let clock = monotonic_clock();
        let mut prev = clock();
        for _ in 0..1000 {
            let now = clock();
            assert!(now >= prev);
            prev = now;
        }
    }
}
