//! Write-stream trace format.
//!
//! A trace captures the exact sequence of block writes a real host produced
//! against an image, with inter-arrival times, so inference runs can be
//! replayed deterministically long after the original kernel session. The
//! header pins the filesystem flavor and a hash of the base image the trace
//! applies to; replaying against anything else is refused.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    [u8; 8]   "WBTRACE1"
//! fs_kind  u8        0 = ext4, 1 = exfat
//! journal  u8        0 = none, 1 = ordered, 2 = data
//! capacity u64       image size in bytes
//! base     [u8; 32]  sha256 of the base image
//! records  *         seq u64 | delta_ns u64 | offset u64 | len u32 | payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::engine::{FsKind, JournalMode};
use crate::util::{le_u32, le_u64, put_le_u32, put_le_u64};

pub const TRACE_MAGIC: &[u8; 8] = b"WBTRACE1";
/// Upper bound on a single record payload, against corrupt length fields.
pub const MAX_RECORD_LEN: u32 = 64 << 20;

const HEADER_LEN: usize = 8 + 1 + 1 + 8 + 32;
const RECORD_HEADER_LEN: usize = 8 + 8 + 8 + 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace header: {0}")]
    BadHeader(String),
    #[error("trace record {index}: {reason}")]
    BadRecord { index: u64, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub fs: FsKind,
    pub journal_mode: JournalMode,
    pub capacity: u64,
    pub base_sha256: [u8; 32],
}

impl TraceHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[..8].copy_from_slice(TRACE_MAGIC);
        buf[8] = match self.fs {
            FsKind::Ext4 => 0,
            FsKind::Exfat => 1,
        };
        buf[9] = match self.journal_mode {
            JournalMode::None => 0,
            JournalMode::Ordered => 1,
            JournalMode::DataJournal => 2,
        };
        put_le_u64(&mut buf, 10, self.capacity);
        buf[18..50].copy_from_slice(&self.base_sha256);
        buf
    }

    fn decode(buf: &[u8; HEADER_LEN]) -> Result<Self, TraceError> {
        if &buf[..8] != TRACE_MAGIC {
            return Err(TraceError::BadHeader("bad magic".into()));
        }
        let fs = match buf[8] {
            0 => FsKind::Ext4,
            1 => FsKind::Exfat,
            other => return Err(TraceError::BadHeader(format!("unknown fs kind {other}"))),
        };
        let journal_mode = match buf[9] {
            0 => JournalMode::None,
            1 => JournalMode::Ordered,
            2 => JournalMode::DataJournal,
            other => return Err(TraceError::BadHeader(format!("unknown journal mode {other}"))),
        };
        let mut base = [0u8; 32];
        base.copy_from_slice(&buf[18..50]);
        Ok(Self { fs, journal_mode, capacity: le_u64(buf, 10), base_sha256: base })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    /// Nanoseconds since the previous record (or since start for the first).
    pub arrival_delta_ns: u64,
    pub offset: u64,
    pub data: Vec<u8>,
}

pub struct TraceWriter<W: Write> {
    out: W,
    records: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> Result<Self, TraceError> {
        out.write_all(&header.encode())?;
        Ok(Self { out, records: 0 })
    }

    pub fn record(
        &mut self,
        seq: u64,
        arrival_delta_ns: u64,
        offset: u64,
        data: &[u8],
    ) -> Result<(), TraceError> {
        if data.len() as u64 > u64::from(MAX_RECORD_LEN) {
            return Err(TraceError::BadRecord {
                index: self.records,
                reason: format!("payload of {} bytes exceeds the cap", data.len()),
            });
        }
        let mut head = [0u8; RECORD_HEADER_LEN];
        put_le_u64(&mut head, 0, seq);
        put_le_u64(&mut head, 8, arrival_delta_ns);
        put_le_u64(&mut head, 16, offset);
        put_le_u32(&mut head, 24, data.len() as u32);
        self.out.write_all(&head)?;
        self.out.write_all(data)?;
        self.records += 1;
        Ok(())
    }

    #[must_use]
    pub fn records_written(&self) -> u64 {
        self.records
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub struct TraceReader<R: Read> {
    input: R,
    header: TraceHeader,
    index: u64,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut input: R) -> Result<Self, TraceError> {
        let mut buf = [0u8; HEADER_LEN];
        input.read_exact(&mut buf).map_err(|e| TraceError::BadHeader(e.to_string()))?;
        let header = TraceHeader::decode(&buf)?;
        Ok(Self { input, header, index: 0 })
    }

    #[must_use]
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    /// Next record, or None at a clean end of stream.
    pub fn next_record(&mut self) -> Result<Option<TraceRecord>, TraceError> {
        let mut head = [0u8; RECORD_HEADER_LEN];
        match self.input.read_exact(&mut head) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = le_u32(&head, 24);
        if len > MAX_RECORD_LEN {
            return Err(TraceError::BadRecord {
                index: self.index,
                reason: format!("payload length {len} exceeds the cap"),
            });
        }
        let mut data = vec![0u8; len as usize];
        self.input.read_exact(&mut data).map_err(|e| TraceError::BadRecord {
            index: self.index,
            reason: format!("truncated payload: {e}"),
        })?;
        let rec = TraceRecord {
            seq: le_u64(&head, 0),
            arrival_delta_ns: le_u64(&head, 8),
            offset: le_u64(&head, 16),
            data,
        };
        self.index += 1;
        Ok(Some(rec))
    }
}
