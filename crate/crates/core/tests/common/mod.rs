//! Shared harness for engine integration tests: a file-backed image, a seal
//! store, an engine fed straight from the image tap, and a virtual clock.

#![allow(dead_code)]

pub mod wire;

use std::cell::Cell;
use std::path::PathBuf;
use std::rc::Rc;
use std::sync::Arc;

use crossbeam_channel::Receiver;
use tempfile::TempDir;
use wormbox_core::block::{BlockImage, ImageOptions, WriteOp};
use wormbox_core::engine::{
    Engine, EngineConfig, EngineEvent, FsKind, Indicator, IndicatorKind, JournalMode, WatchSpec,
};
use wormbox_core::seal::SealStore;

pub const K0: [u8; 32] = *b"integration-test-initial-key-32b";
/// Virtual nanoseconds between consecutive driver writes.
pub const STEP_NS: u64 = 50_000;

pub struct Rig {
    pub dir: TempDir,
    pub img: Arc<BlockImage>,
    pub rx: Receiver<WriteOp>,
    pub engine: Engine,
    pub now: Rc<Cell<u64>>,
    pub events: Vec<EngineEvent>,
    pub store_dir: PathBuf,
}

impl Rig {
    /// Builds a rig over prepared image bytes.
    pub fn new(image_bytes: &[u8], cfg: EngineConfig) -> Self {
        let dir = TempDir::new().unwrap();
        let img_path = dir.path().join("vol.img");
        std::fs::write(&img_path, image_bytes).unwrap();
        let img = Arc::new(
            BlockImage::open(
                &img_path,
                &ImageOptions {
                    capacity: Some(image_bytes.len() as u64),
                    create: false,
                    zero_injection: false,
                },
            )
            .unwrap(),
        );
        let rx = img.subscribe().unwrap();
        let store_dir = dir.path().join("store");
        let store = SealStore::init(&store_dir, K0).unwrap();
        let engine = Engine::new(Arc::clone(&img), store, cfg).unwrap();
        Self {
            dir,
            img,
            rx,
            engine,
            now: Rc::new(Cell::new(1_000_000)),
            events: Vec::new(),
            store_dir,
        }
    }

    /// Clock for simulator calls: every invocation advances virtual time by
    /// one step and the write carries that arrival stamp.
    pub fn clock(&self) -> impl FnMut() -> u64 {
        let c = Rc::clone(&self.now);
        move || {
            c.set(c.get() + STEP_NS);
            c.get()
        }
    }

    /// Feeds every pending tapped write to the engine.
    pub fn pump(&mut self) {
        while let Ok(op) = self.rx.try_recv() {
            self.engine.on_write(&op);
        }
        self.events.extend(self.engine.take_events());
    }

    /// Advances virtual time past one full quiescence window, ticking at the
    /// engine's cadence.
    pub fn settle(&mut self) {
        let tick = self.engine.config().lambda_ns / 2;
        let end = self.now.get() + self.engine.config().tau_ns() + 3 * tick;
        while self.now.get() < end {
            self.now.set(self.now.get() + tick);
            self.engine.tick(self.now.get());
        }
        self.events.extend(self.engine.take_events());
    }

    /// Settles repeatedly until `pred` matches an accumulated event or the
    /// window budget runs out.
    pub fn settle_until(&mut self, windows: usize, pred: impl Fn(&EngineEvent) -> bool) -> bool {
        for _ in 0..windows {
            if self.events.iter().any(&pred) {
                return true;
            }
            self.settle();
        }
        self.events.iter().any(&pred)
    }

    pub fn sealed(&self) -> Vec<(u32, u64, u64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Sealed { log_id, offset, length, .. } => {
                    Some((*log_id, *offset, *length))
                }
                _ => None,
            })
            .collect()
    }

    pub fn indicators(&self) -> Vec<&Indicator> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Indicator(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn indicators_of(&self, kind: IndicatorKind) -> Vec<&Indicator> {
        self.indicators().into_iter().filter(|i| i.kind == kind).collect()
    }

    pub fn log_bytes(&self, log_id: u32) -> Vec<u8> {
        std::fs::read(self.store_dir.join("logs").join(format!("{log_id}.log")))
            .unwrap_or_default()
    }

    pub fn seal_log_bytes(&self) -> Vec<u8> {
        std::fs::read(self.store_dir.join("seal.log")).unwrap()
    }
}

/// Engine config for an exFAT rig with the given watches.
pub fn exfat_cfg(watches: &[(u32, &str)]) -> EngineConfig {
    EngineConfig {
        fs: FsKind::Exfat,
        watches: watches
            .iter()
            .map(|(id, p)| WatchSpec { log_id: *id, path: (*p).to_string() })
            .collect(),
        ..EngineConfig::default()
    }
}

/// Engine config for an ext4 rig.
pub fn ext4_cfg(journal_mode: JournalMode, watches: &[(u32, &str)]) -> EngineConfig {
    EngineConfig {
        fs: FsKind::Ext4,
        journal_mode,
        watches: watches
            .iter()
            .map(|(id, p)| WatchSpec { log_id: *id, path: (*p).to_string() })
            .collect(),
        ..EngineConfig::default()
    }
}

/// Locates an e2fsprogs binary; sbin directories are often off PATH.
pub fn e2fs_tool(name: &str) -> String {
    for dir in ["/usr/sbin", "/sbin", "/usr/local/sbin"] {
        let p = format!("{dir}/{name}");
        if std::path::Path::new(&p).exists() {
            return p;
        }
    }
    name.to_string()
}

/// Formats an ext4 image with mke2fs and claims the named empty files.
pub fn mke2fs_image(mib: u64, journal: bool, names: &[&str]) -> Vec<u8> {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("fs.img");
    let file = std::fs::File::create(&path).unwrap();
    file.set_len(mib * 1024 * 1024).unwrap();
    drop(file);
    let mut feats = String::from("^metadata_csum,^64bit");
    if !journal {
        feats.push_str(",^has_journal");
    }
    let status = std::process::Command::new(e2fs_tool("mke2fs"))
        .args(["-F", "-q", "-t", "ext4", "-b", "4096", "-I", "256", "-O", &feats])
        .arg(&path)
        .status()
        .expect("mke2fs is required for ext4 integration tests");
    assert!(status.success(), "mke2fs exited with {status}");
    let mut bytes = std::fs::read(&path).unwrap();
    for name in names {
        wormbox_core::mkfs::ext4_add_empty_file(&mut bytes, name).unwrap();
    }
    bytes
}

/// Full filesystem check as an external oracle.
pub fn e2fsck_clean(bytes: &[u8]) -> Result<(), String> {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("fsck.img");
    std::fs::write(&path, bytes).unwrap();
    let out = std::process::Command::new(e2fs_tool("e2fsck"))
        .arg("-fn")
        .arg(&path)
        .output()
        .map_err(|e| format!("e2fsck did not run: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "e2fsck status {}:\n{}{}",
            out.status,
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Runs `f` against a scratch copy of `image_bytes` and returns the write
/// ops it produced, so tests can replay them selectively.
pub fn plan_ops(
    image_bytes: &[u8],
    start_ns: u64,
    f: impl FnOnce(&BlockImage, &mut dyn FnMut() -> u64),
) -> Vec<(u64, Vec<u8>)> {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("shadow.img");
    std::fs::write(&path, image_bytes).unwrap();
    let img = BlockImage::open(
        &path,
        &ImageOptions {
            capacity: Some(image_bytes.len() as u64),
            create: false,
            zero_injection: false,
        },
    )
    .unwrap();
    let rx = img.subscribe().unwrap();
    let mut t = start_ns;
    let mut clock = move || {
        t += STEP_NS;
        t
    };
    f(&img, &mut clock);
    let mut ops = Vec::new();
    while let Ok(op) = rx.try_recv() {
        ops.push((op.offset, op.data.to_vec()));
    }
    ops
}

/// Formats an exFAT volume with the named empty files.
pub fn exfat_image(len: usize, names: &[&str]) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    wormbox_core::mkfs::format_exfat(&mut buf, &wormbox_core::mkfs::ExfatParams::default())
        .unwrap();
    for name in names {
        wormbox_core::mkfs::exfat_add_empty_file(&mut buf, name).unwrap();
    }
    buf
}
