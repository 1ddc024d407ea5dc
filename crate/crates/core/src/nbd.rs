//! NBD server, fixed-newstyle handshake and simple-reply transmission.
//!
//! The server exposes exactly one export backed by a [`BlockImage`]. Writes
//! pass through an admission gate before they touch the image; the gate is
//! how a response policy turns the device read-only without renegotiation.
//! Requests are handled strictly in arrival order, so replies and the
//! subscriber stream observe one total order.

use std::io::{self, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::block::{BlockError, BlockImage};
use crate::util::{be_u16, be_u32, be_u64};

pub const NBDMAGIC: u64 = 0x4e42_444d_4147_4943; // "NBDMAGIC"
pub const IHAVEOPT: u64 = 0x4948_4156_454f_5054; // "IHAVEOPT"
pub const OPT_REPLY_MAGIC: u64 = 0x0003_e889_0455_65a9;
pub const REQUEST_MAGIC: u32 = 0x2560_9513;
pub const SIMPLE_REPLY_MAGIC: u32 = 0x6744_6698;

pub const FLAG_FIXED_NEWSTYLE: u16 = 1 << 0;
pub const FLAG_NO_ZEROES: u16 = 1 << 1;
pub const CFLAG_FIXED_NEWSTYLE: u32 = 1 << 0;
pub const CFLAG_NO_ZEROES: u32 = 1 << 1;

pub const OPT_EXPORT_NAME: u32 = 1;
pub const OPT_ABORT: u32 = 2;
pub const OPT_LIST: u32 = 3;
pub const OPT_STARTTLS: u32 = 5;
pub const OPT_INFO: u32 = 6;
pub const OPT_GO: u32 = 7;

pub const REP_ACK: u32 = 1;
pub const REP_SERVER: u32 = 2;
pub const REP_INFO: u32 = 3;
const REP_ERR: u32 = 1 << 31;
pub const REP_ERR_UNSUP: u32 = REP_ERR | 1;
pub const REP_ERR_POLICY: u32 = REP_ERR | 2;
pub const REP_ERR_INVALID: u32 = REP_ERR | 3;
pub const REP_ERR_UNKNOWN: u32 = REP_ERR | 6;

pub const INFO_EXPORT: u16 = 0;

pub const CMD_READ: u16 = 0;
pub const CMD_WRITE: u16 = 1;
pub const CMD_DISC: u16 = 2;
pub const CMD_FLUSH: u16 = 3;
pub const CMD_TRIM: u16 = 4;

pub const CMD_FLAG_FUA: u16 = 1 << 0;

pub const TFLAG_HAS_FLAGS: u16 = 1 << 0;
pub const TFLAG_READ_ONLY: u16 = 1 << 1;
pub const TFLAG_SEND_FLUSH: u16 = 1 << 2;
pub const TFLAG_SEND_FUA: u16 = 1 << 3;

pub const EPERM: u32 = 1;
pub const EIO: u32 = 5;
pub const EINVAL: u32 = 22;
pub const ENOSPC: u32 = 28;
pub const EOPNOTSUPP: u32 = 95;

/// Hard ceiling on a single request's data length.
pub const MAX_REQUEST_LEN: u32 = 32 << 20;
/// Ceiling on option payloads during negotiation.
const MAX_OPTION_LEN: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum NbdError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// Decoded transmission request header (28 bytes on the wire).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub flags: u16,
    pub cmd: u16,
    pub cookie: u64,
    pub offset: u64,
    pub length: u32,
}

/// Parses a request header. The caller has already consumed the 28 bytes.
pub fn decode_request(buf: &[u8; 28]) -> Result<Request, NbdError> {
    let magic = be_u32(buf, 0);
    if magic != REQUEST_MAGIC {
        return Err(NbdError::Protocol(format!("bad request magic {magic:#010x}")));
    }
    let req = Request {
        flags: be_u16(buf, 4),
        cmd: be_u16(buf, 6),
        cookie: be_u64(buf, 8),
        offset: be_u64(buf, 16),
        length: be_u32(buf, 24),
    };
    if req.length > MAX_REQUEST_LEN {
        return Err(NbdError::Protocol(format!(
            "request length {} exceeds {} byte cap",
            req.length, MAX_REQUEST_LEN
        )));
    }
    if req.cmd == CMD_WRITE && req.length == 0 {
        return Err(NbdError::Protocol("zero-length write".into()));
    }
    Ok(req)
}

/// Encodes a simple reply header (16 bytes on the wire).
#[must_use]
pub fn encode_simple_reply(errno: u32, cookie: u64) -> [u8; 16] {
    let mut buf = [0u8; 16];
    buf[0..4].copy_from_slice(&SIMPLE_REPLY_MAGIC.to_be_bytes());
    buf[4..8].copy_from_slice(&errno.to_be_bytes());
    buf[8..16].copy_from_slice(&cookie.to_be_bytes());
    buf
}

/// Write admission decision, consulted once per WRITE in sequence order.
/// Rejection carries the errno reported to the client; the image is not
/// touched.
pub trait WriteGate: Send + Sync {
    fn admit(&self, offset: u64, length: u64) -> Result<(), u32>;
}

/// Gate that admits everything (plain image serving, no policy active).
pub struct AllowAll;

impl WriteGate for AllowAll {
    fn admit(&self, _offset: u64, _length: u64) -> Result<(), u32> {
        Ok(())
    }
}

/// Monotonic timestamp source for write arrival times, nanoseconds since
/// device start. Injected so replay can drive a virtual clock.
pub type ArrivalClock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SessionStats {
    pub requests: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub writes_rejected: u64,
}

pub struct Server {
    pub image: Arc<BlockImage>,
    pub export_name: String,
    pub read_only_export: bool,
    pub gate: Arc<dyn WriteGate>,
    pub clock: ArrivalClock,
}

impl Server {
    fn transmission_flags(&self) -> u16 {
        let mut f = TFLAG_HAS_FLAGS | TFLAG_SEND_FLUSH | TFLAG_SEND_FUA;
        if self.read_only_export {
            f |= TFLAG_READ_ONLY;
        }
        f
    }

    /// Full session: fixed-newstyle negotiation, then transmission until the
    /// client disconnects. Returns Ok(None) when the client aborted during
    /// negotiation.
    pub fn serve_connection<S: Read + Write>(
        &self,
        stream: &mut S,
    ) -> Result<Option<SessionStats>, NbdError> {
        if !self.negotiate(stream)? {
            return Ok(None);
        }
        self.serve_transmission(stream).map(Some)
    }

    /// Fixed-newstyle option haggling. Returns true when the session entered
    /// the transmission phase.
    pub fn negotiate<S: Read + Write>(&self, stream: &mut S) -> Result<bool, NbdError> {
        let mut greeting = [0u8; 18];
        greeting[0..8].copy_from_slice(&NBDMAGIC.to_be_bytes());
        greeting[8..16].copy_from_slice(&IHAVEOPT.to_be_bytes());
        greeting[16..18].copy_from_slice(&FLAG_FIXED_NEWSTYLE.to_be_bytes());
        stream.write_all(&greeting)?;
        stream.flush()?;

        let mut cflags = [0u8; 4];
        stream.read_exact(&mut cflags)?;
        let cflags = u32::from_be_bytes(cflags);
        if cflags & CFLAG_FIXED_NEWSTYLE == 0 {
            return Err(NbdError::Protocol(
                "client did not acknowledge fixed newstyle".into(),
            ));
        }

        loop {
            let mut hdr = [0u8; 16];
            stream.read_exact(&mut hdr)?;
            if be_u64(&hdr, 0) != IHAVEOPT {
                return Err(NbdError::Protocol("bad option magic".into()));
            }
            let option = be_u32(&hdr, 8);
            let len = be_u32(&hdr, 12);
            if len > MAX_OPTION_LEN {
                return Err(NbdError::Protocol(format!("option payload {len} too large")));
            }
            let mut data = vec![0u8; len as usize];
            stream.read_exact(&mut data)?;

            match option {
                OPT_EXPORT_NAME => {
                    let name = String::from_utf8_lossy(&data);
                    if !name.is_empty() && name != self.export_name {
                        // This legacy option has no error reply; hard close.
                        return Err(NbdError::Protocol(format!("unknown export {name:?}")));
                    }
                    let mut reply = Vec::with_capacity(10 + 124);
                    reply.extend_from_slice(&self.image.capacity().to_be_bytes());
                    reply.extend_from_slice(&self.transmission_flags().to_be_bytes());
                    reply.extend_from_slice(&[0u8; 124]);
                    stream.write_all(&reply)?;
                    stream.flush()?;
                    return Ok(true);
                }
                OPT_ABORT => {
                    write_option_reply(stream, option, REP_ACK, &[])?;
                    return Ok(false);
                }
                OPT_LIST => {
                    let mut payload = Vec::new();
                    payload.extend_from_slice(&(self.export_name.len() as u32).to_be_bytes());
                    payload.extend_from_slice(self.export_name.as_bytes());
                    write_option_reply(stream, option, REP_SERVER, &payload)?;
                    write_option_reply(stream, option, REP_ACK, &[])?;
                }
                OPT_INFO | OPT_GO => {
                    match self.parse_info_request(&data) {
                        None => {
                            write_option_reply(stream, option, REP_ERR_INVALID, &[])?;
                        }
                        Some(name) if !name.is_empty() && name != self.export_name => {
                            write_option_reply(stream, option, REP_ERR_UNKNOWN, &[])?;
                        }
                        Some(_) => {
                            let mut info = Vec::with_capacity(12);
                            info.extend_from_slice(&INFO_EXPORT.to_be_bytes());
                            info.extend_from_slice(&self.image.capacity().to_be_bytes());
                            info.extend_from_slice(&self.transmission_flags().to_be_bytes());
                            write_option_reply(stream, option, REP_INFO, &info)?;
                            write_option_reply(stream, option, REP_ACK, &[])?;
                            if option == OPT_GO {
                                return Ok(true);
                            }
                        }
                    }
                }
                OPT_STARTTLS => {
                    write_option_reply(stream, option, REP_ERR_POLICY, &[])?;
                }
                _ => {
                    write_option_reply(stream, option, REP_ERR_UNSUP, &[])?;
                }
            }
        }
    }

    fn parse_info_request(&self, data: &[u8]) -> Option<String> {
        if data.len() < 6 {
            return None;
        }
        let name_len = be_u32(data, 0) as usize;
        if data.len() < 4 + name_len + 2 {
            return None;
        }
        let name = String::from_utf8_lossy(&data[4..4 + name_len]).into_owned();
        let n_infos = be_u16(data, 4 + name_len) as usize;
        if data.len() != 4 + name_len + 2 + 2 * n_infos {
            return None;
        }
        Some(name)
    }

    /// Transmission phase over an already-negotiated (or pre-established
    /// local-mode) stream. Requests are processed serially; every request is
    /// answered with exactly one simple reply carrying its cookie, except
    /// DISC which terminates the session.
    pub fn serve_transmission<S: Read + Write>(
        &self,
        stream: &mut S,
    ) -> Result<SessionStats, NbdError> {
        let mut stats = SessionStats::default();
        loop {
            let mut hdr = [0u8; 28];
            match stream.read_exact(&mut hdr) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof && stats.requests > 0 => {
                    // Abrupt but quiet close after a clean request boundary.
                    return Ok(stats);
                }
                Err(e) => return Err(e.into()),
            }
            let req = decode_request(&hdr)?;
            stats.requests += 1;
            match req.cmd {
                CMD_READ => {
                    let end_ok = req
                        .offset
                        .checked_add(u64::from(req.length))
                        .map(|e| e <= self.image.capacity())
                        .unwrap_or(false);
                    if !end_ok {
                        stream.write_all(&encode_simple_reply(EINVAL, req.cookie))?;
                    } else {
                        match self.image.read_range(req.offset, u64::from(req.length)) {
                            Ok(data) => {
                                stream.write_all(&encode_simple_reply(0, req.cookie))?;
                                stream.write_all(&data)?;
                                stats.bytes_read += u64::from(req.length);
                            }
                            Err(_) => {
                                stream.write_all(&encode_simple_reply(EIO, req.cookie))?;
                            }
                        }
                    }
                    stream.flush()?;
                }
                CMD_WRITE => {
                    let mut payload = vec![0u8; req.length as usize];
                    stream.read_exact(&mut payload)?;
                    let errno = self.handle_write(&req, &payload, &mut stats);
                    stream.write_all(&encode_simple_reply(errno, req.cookie))?;
                    stream.flush()?;
                }
                CMD_FLUSH => {
                    let errno = match self.image.flush() {
                        Ok(()) => 0,
                        Err(_) => EIO,
                    };
                    stream.write_all(&encode_simple_reply(errno, req.cookie))?;
                    stream.flush()?;
                }
                CMD_TRIM => {
                    stream.write_all(&encode_simple_reply(EOPNOTSUPP, req.cookie))?;
                    stream.flush()?;
                }
                CMD_DISC => {
                    return Ok(stats);
                }
                other => {
                    return Err(NbdError::Protocol(format!("unknown command {other}")));
                }
            }
        }
    }

    fn handle_write(&self, req: &Request, payload: &[u8], stats: &mut SessionStats) -> u32 {
        if self.read_only_export {
            stats.writes_rejected += 1;
            return EPERM;
        }
        let end_ok = req
            .offset
            .checked_add(u64::from(req.length))
            .map(|e| e <= self.image.capacity())
            .unwrap_or(false);
        if !end_ok {
            return ENOSPC;
        }
        if let Err(errno) = self.gate.admit(req.offset, u64::from(req.length)) {
            stats.writes_rejected += 1;
            return errno;
        }
        let arrival = (self.clock)();
        match self.image.apply_write(req.offset, payload, arrival) {
            Ok(_) => {
                stats.bytes_written += u64::from(req.length);
                if req.flags & CMD_FLAG_FUA != 0 && self.image.flush().is_err() {
                    return EIO;
                }
                0
            }
            Err(_) => EIO,
        }
    }
}

fn write_option_reply<S: Write>(
    stream: &mut S,
    option: u32,
    reply_type: u32,
    data: &[u8],
) -> Result<(), NbdError> {
    let mut buf = Vec::with_capacity(20 + data.len());
    buf.extend_from_slice(&OPT_REPLY_MAGIC.to_be_bytes());
    buf.extend_from_slice(&option.to_be_bytes());
    buf.extend_from_slice(&reply_type.to_be_bytes());
    buf.extend_from_slice(&(data.len() as u32).to_be_bytes());
    buf.extend_from_slice(data);
    stream.write_all(&buf)?;
    stream.flush()?;
    Ok(())
}
