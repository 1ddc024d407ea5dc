//! Byte-addressed block image backed by a regular file.
//!
//! The image is the device payload an NBD session reads and writes. Every
//! accepted write is persisted first and then forwarded, in sequence order,
//! to the single inference subscriber. Reads of never-written ranges return
//! zeros, which downstream coherency logic relies on.

use std::fs::{File, OpenOptions};
use std::io::{self, Read};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use crossbeam_channel::{unbounded, Receiver, Sender};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Device addressing granularity. Requests are byte-addressed but clients
/// overwhelmingly issue multiples of this.
pub const SECTOR_SIZE: u64 = 512;

/// Queue depth at which the tap starts warning about a slow subscriber.
const TAP_HIGH_WATER: usize = 4096;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("range {offset}+{len} exceeds image capacity {capacity}")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("image already has a subscriber")]
    SubscriberTaken,
    #[error("image capacity must be a positive multiple of {SECTOR_SIZE}, got {0}")]
    BadCapacity(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One accepted write, as seen by the inference side of the device.
///
/// `data` holds the bytes that were actually persisted, so a fault-injected
/// write carries the zeros that landed on the image, not the lost payload.
#[derive(Debug, Clone)]
pub struct WriteOp {
    pub seq: u64,
    pub offset: u64,
    pub data: Arc<[u8]>,
    /// Monotonic nanoseconds relative to device start (virtual during replay).
    pub arrival_ns: u64,
}

impl WriteOp {
    #[must_use]
    pub fn len(&self) -> u64 {
        self.data.len() as u64
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[must_use]
    pub fn end(&self) -> u64 {
        self.offset + self.len()
    }
}

/// A payload withheld by the fault injector: the image holds zeros for this
/// range until a reader has come back for it once.
struct Stash {
    offset: u64,
    data: Vec<u8>,
    fresh: bool,
}

struct Inner {
    next_seq: u64,
    tap: Option<Sender<WriteOp>>,
    tap_taken: bool,
    tap_warned: bool,
    inject_counter: u64,
    stashes: Vec<Stash>,
}

/// Image open parameters.
#[derive(Debug, Clone)]
pub struct ImageOptions {
    /// Required when creating; ignored for an existing image.
    pub capacity: Option<u64>,
    pub create: bool,
    /// Test-only fault injection: every second write is persisted as zeros
    /// and the true payload surfaces only after one read has observed the
    /// zeros. Models a device that delays data blocks past metadata.
    pub zero_injection: bool,
}

impl Default for ImageOptions {
    fn default() -> Self {
        Self { capacity: None, create: false, zero_injection: false }
    }
}

pub struct BlockImage {
    file: File,
    capacity: u64,
    zero_injection: bool,
    inner: Mutex<Inner>,
}

impl BlockImage {
    /// Opens or creates the backing file. A created image is zero-filled to
    /// `capacity`; an existing image derives capacity from its length.
    pub fn open(path: &Path, opts: &ImageOptions) -> Result<Self, BlockError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(opts.create)
            .open(path)?;
        let existing = file.metadata()?.len();
        let capacity = if existing == 0 {
            let cap = opts.capacity.ok_or(BlockError::BadCapacity(0))?;
            if cap == 0 || cap % SECTOR_SIZE != 0 {
                return Err(BlockError::BadCapacity(cap));
            }
            file.set_len(cap)?;
            cap
        } else {
            existing
        };
        Ok(Self {
            file,
            capacity,
            zero_injection: opts.zero_injection,
            inner: Mutex::new(Inner {
                next_seq: 0,
                tap: None,
                tap_taken: false,
                tap_warned: false,
                inject_counter: 0,
                stashes: Vec::new(),
            }),
        })
    }

    #[must_use]
    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<(), BlockError> {
        let end = offset.checked_add(len).ok_or(BlockError::OutOfBounds {
            offset,
            len,
            capacity: self.capacity,
        })?;
        if end > self.capacity {
            return Err(BlockError::OutOfBounds { offset, len, capacity: self.capacity });
        }
        Ok(())
    }

    /// Reads `len` bytes at `offset`. Holes and never-written space read as
    /// zeros.
    pub fn read_range(&self, offset: u64, len: u64) -> Result<Vec<u8>, BlockError> {
        self.check_range(offset, len)?;
        if self.zero_injection {
            self.visit_stashes(offset, len)?;
        }
        let mut buf = vec![0u8; len as usize];
        self.read_exact_at(&mut buf, offset)?;
        Ok(buf)
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> Result<(), BlockError> {
        self.file.read_exact_at(buf, offset)?;
        Ok(())
    }

    /// First read over a stashed range observes the injected zeros; the next
    /// read materializes the withheld payload.
    fn visit_stashes(&self, offset: u64, len: u64) -> Result<(), BlockError> {
        let mut inner = self.inner.lock().unwrap();
        let mut keep = Vec::with_capacity(inner.stashes.len());
        for mut stash in inner.stashes.drain(..) {
            let s_range = (stash.offset, stash.offset + stash.data.len() as u64);
            if crate::util::range_overlap(s_range, (offset, offset + len)).is_none() {
                keep.push(stash);
            } else if stash.fresh {
                stash.fresh = false;
                keep.push(stash);
            } else {
                self.file.write_all_at(&stash.data, stash.offset)?;
            }
        }
        inner.stashes = keep;
        Ok(())
    }

    /// Persists a write, assigns it a sequence number, and forwards it to the
    /// subscriber (if any) before returning. The sequence order equals the
    /// order the subscriber observes.
    pub fn apply_write(
        &self,
        offset: u64,
        data: &[u8],
        arrival_ns: u64,
    ) -> Result<u64, BlockError> {
        self.check_range(offset, data.len() as u64)?;
        let mut inner = self.inner.lock().unwrap();
        let persisted: Arc<[u8]> = if self.zero_injection {
            inner.inject_counter += 1;
            Self::trim_stashes(&mut inner.stashes, offset, data.len() as u64);
            if inner.inject_counter % 2 == 0 {
                inner.stashes.push(Stash { offset, data: data.to_vec(), fresh: true });
                Arc::from(vec![0u8; data.len()])
            } else {
                Arc::from(data)
            }
        } else {
            Arc::from(data)
        };
        self.file.write_all_at(&persisted, offset)?;
        let seq = inner.next_seq;
        inner.next_seq += 1;
        if let Some(tap) = &inner.tap {
            let op = WriteOp { seq, offset, data: persisted, arrival_ns };
            if tap.send(op).is_err() {
                inner.tap = None;
            } else if tap.len() > TAP_HIGH_WATER && !inner.tap_warned {
                inner.tap_warned = true;
                log::warn!(
                    "write tap queue exceeded {} entries; subscriber is lagging",
                    TAP_HIGH_WATER
                );
            } else if tap.len() < TAP_HIGH_WATER / 2 {
                inner.tap_warned = false;
            }
        }
        Ok(seq)
    }

    /// Drops or splits stashed payloads that a newer write supersedes, so a
    /// later materialization can never clobber fresher bytes.
    fn trim_stashes(stashes: &mut Vec<Stash>, offset: u64, len: u64) {
        let new_range = (offset, offset + len);
        let mut out = Vec::with_capacity(stashes.len());
        for stash in stashes.drain(..) {
            let s_start = stash.offset;
            let s_end = s_start + stash.data.len() as u64;
            match crate::util::range_overlap((s_start, s_end), new_range) {
                None => out.push(stash),
                Some((lo, hi)) => {
                    if s_start < lo {
                        out.push(Stash {
                            offset: s_start,
                            data: stash.data[..(lo - s_start) as usize].to_vec(),
                            fresh: stash.fresh,
                        });
                    }
                    if hi < s_end {
                        out.push(Stash {
                            offset: hi,
                            data: stash.data[(hi - s_start) as usize..].to_vec(),
                            fresh: stash.fresh,
                        });
                    }
                }
            }
        }
        *stashes = out;
    }

    /// Registers the single inference subscriber. A second call fails.
    pub fn subscribe(&self) -> Result<Receiver<WriteOp>, BlockError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.tap_taken {
            return Err(BlockError::SubscriberTaken);
        }
        let (tx, rx) = unbounded();
        inner.tap = Some(tx);
        inner.tap_taken = true;
        Ok(rx)
    }

    /// Makes all previously acknowledged writes durable.
    pub fn flush(&self) -> Result<(), BlockError> {
        self.file.sync_data()?;
        Ok(())
    }

    /// SHA-256 over the full image contents, used as the image identity in
    /// trace headers and init summaries.
    pub fn content_sha256(&self) -> Result<[u8; 32], BlockError> {
        let mut hasher = Sha256::new();
        let mut pos = 0u64;
        let mut buf = vec![0u8; 1 << 20];
        while pos < self.capacity {
            let want = ((self.capacity - pos) as usize).min(buf.len());
            let got = FileExt::read_at(&self.file, &mut buf[..want], pos)?;
            if got == 0 {
                break;
            }
            hasher.update(&buf[..got]);
            pos += got as u64;
        }
        // A sparse tail past EOF still counts as zeros.
        if pos < self.capacity {
            let zeros = vec![0u8; 1 << 20];
            while pos < self.capacity {
                let want = ((self.capacity - pos) as usize).min(zeros.len());
                hasher.update(&zeros[..want]);
                pos += want as u64;
            }
        }
        Ok(hasher.finalize().into())
    }
}

/// Positioned read access, the only capability on-disk parsers get. Keeps
/// the read path honest (no parser can write) and lets tests decode plain
/// buffers and files without an image wrapper.
pub trait ReadAt {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError>;
}

impl ReadAt for BlockImage {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError> {
        self.read_range(offset, len as u64)
    }
}

impl ReadAt for [u8] {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError> {
        let end = offset
            .checked_add(len as u64)
            .filter(|&e| e <= self.len() as u64)
            .ok_or(BlockError::OutOfBounds { offset, len: len as u64, capacity: self.len() as u64 })?;
        Ok(self[offset as usize..end as usize].to_vec())
    }
}

impl ReadAt for File {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError> {
        let mut buf = vec![0u8; len];
        FileExt::read_exact_at(self, &mut buf, offset)?;
        Ok(buf)
    }
}

impl<T: ReadAt + ?Sized> ReadAt for &T {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError> {
        (**self).read_at(offset, len)
    }
}

/// Hash helper for files outside an open image (fixture tooling, audits).
pub fn file_sha256(path: &Path) -> Result<[u8; 32], BlockError> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let got = f.read(&mut buf)?;
        if got == 0 {
            break;
        }
        hasher.update(&buf[..got]);
    }
    Ok(hasher.finalize().into())
}
