//! Streaming jbd2 transaction observer.
//!
//! Consumes raw writes that land inside the journal file and reassembles
//! transactions: descriptor tags, their data blocks (escape-restored), revoke
//! records, and commit blocks. Emits a committed transaction exactly when its
//! commit record arrives, which is the strong extraction point for
//! data-journaled filesystems. All journal structures are big-endian.
//!
//! Checksum fields (v2/v3) are verified when the journal advertises them;
//! a mismatch aborts the transaction and surfaces as a tamper event rather
//! than a parse error.

use std::collections::HashMap;

use thiserror::Error;

use crate::block::ReadAt;
use crate::ext4::{read_inode, resolve_extents, Ext4Error, Superblock};
use crate::util::{be_u16, be_u32, be_u64};

pub const JBD2_MAGIC: u32 = 0xC03B_3998;

pub const BLOCKTYPE_DESCRIPTOR: u32 = 1;
pub const BLOCKTYPE_COMMIT: u32 = 2;
pub const BLOCKTYPE_SUPERBLOCK_V1: u32 = 3;
pub const BLOCKTYPE_SUPERBLOCK_V2: u32 = 4;
pub const BLOCKTYPE_REVOKE: u32 = 5;

pub const TAG_FLAG_ESCAPE: u32 = 1;
pub const TAG_FLAG_SAME_UUID: u32 = 2;
pub const TAG_FLAG_DELETED: u32 = 4;
pub const TAG_FLAG_LAST: u32 = 8;

pub const INCOMPAT_REVOKE: u32 = 0x01;
pub const INCOMPAT_64BIT: u32 = 0x02;
pub const INCOMPAT_ASYNC_COMMIT: u32 = 0x04;
pub const INCOMPAT_CSUM_V2: u32 = 0x08;
pub const INCOMPAT_CSUM_V3: u32 = 0x10;
pub const INCOMPAT_FAST_COMMIT: u32 = 0x20;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal superblock: {0}")]
    BadSuperblock(String),
    #[error("unsupported journal feature: {0}")]
    UnsupportedFeature(&'static str),
    #[error(transparent)]
    Fs(#[from] Ext4Error),
    #[error(transparent)]
    Block(#[from] crate::block::BlockError),
}

/// Journal geometry: journal block index -> image byte offset.
#[derive(Debug, Clone)]
pub struct JournalMap {
    pub block_size: u64,
    /// Physical image byte offset of each journal block, indexed by journal
    /// block number.
    pub blocks: Vec<u64>,
    pub first: u32,
    pub maxlen: u32,
}

impl JournalMap {
    #[must_use]
    pub fn byte_offset(&self, jblock: u64) -> Option<u64> {
        self.blocks.get(jblock as usize).copied()
    }

    /// Journal block index containing an image byte offset, if any.
    #[must_use]
    pub fn jblock_at(&self, image_offset: u64) -> Option<u64> {
        self.blocks.iter().position(|&b| {
            b <= image_offset && image_offset < b + self.block_size
        }).map(|i| i as u64)
    }

    /// Merged image byte ranges the journal occupies.
    #[must_use]
    pub fn byte_ranges(&self) -> Vec<(u64, u64)> {
        let mut sorted: Vec<u64> = self.blocks.clone();
        sorted.sort_unstable();
        let mut out: Vec<(u64, u64)> = Vec::new();
        for b in sorted {
            match out.last_mut() {
                Some((_, end)) if *end == b => *end = b + self.block_size,
                _ => out.push((b, b + self.block_size)),
            }
        }
        out
    }

    fn next_jblock(&self, j: u64) -> u64 {
        let n = j + 1;
        if n >= u64::from(self.maxlen) {
            u64::from(self.first)
        } else {
            n
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JournalFeatures {
    pub has_64bit: bool,
    pub csum_v2: bool,
    pub csum_v3: bool,
}

impl JournalFeatures {
    #[must_use]
    pub fn checksummed(&self) -> bool {
        self.csum_v2 || self.csum_v3
    }

    #[must_use]
    fn tag_size(&self) -> usize {
        if self.csum_v3 {
            16
        } else if self.has_64bit {
            12
        } else {
            8
        }
    }
}

/// One data block captured from a committed transaction, already unescaped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournaledBlock {
    pub fs_block: u64,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedTxn {
    pub seq: u32,
    pub blocks: Vec<JournaledBlock>,
    /// FS blocks this transaction revoked (suppressing older journal copies).
    pub revoked: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalEvent {
    Commit(CommittedTxn),
    /// A descriptor or commit carried a sequence older than the stream
    /// position: journal contents moved backwards.
    SequenceRegression { expected: u32, found: u32 },
    /// A checksummed structure failed verification. The transaction is
    /// dropped, never committed.
    ChecksumMismatch { seq: u32, jblock: u64, what: &'static str },
    /// The stream jumped forward (journal superblock advance or a descriptor
    /// from a sequence we had not reached). Informational.
    FastForward { from: u32, to: u32 },
}

struct TagSlot {
    fs_block: u64,
    jblock: u64,
    escape: bool,
    csum: Option<u32>,
    data: Option<Vec<u8>>,
}

struct PendingTxn {
    seq: u32,
    slots: Vec<TagSlot>,
    /// Next journal block a descriptor or data block is expected in.
    cursor: u64,
    staged_revokes: Vec<u64>,
    poisoned: bool,
}

pub struct JournalWatch {
    pub map: JournalMap,
    pub features: JournalFeatures,
    uuid: [u8; 16],
    csum_seed: u32,
    expected_seq: u32,
    pub last_committed: Option<u32>,
    pending: Option<PendingTxn>,
    /// fs block -> highest sequence that revoked it.
    revoked: HashMap<u64, u32>,
}

/// Raw crc32c chaining as the journal uses it: no pre/post inversion at the
/// call boundary, seed carried between calls.
#[must_use]
pub fn jbd2_crc(seed: u32, data: &[u8]) -> u32 {
    !crc32c::crc32c_append(!seed, data)
}

impl JournalWatch {
    /// Loads journal geometry from the filesystem's journal inode and parses
    /// the journal superblock (journal block 0).
    pub fn load<R: ReadAt + ?Sized>(img: &R, sb: &Superblock) -> Result<Self, JournalError> {
        if !sb.has_journal() {
            return Err(JournalError::BadSuperblock("filesystem has no journal".into()));
        }
        let jinode = read_inode(img, sb, u64::from(sb.journal_inum))?;
        let extents = resolve_extents(img, sb, &jinode)?;
        let bs = sb.block_size();
        let total_blocks = jinode.size / bs;
        let mut blocks = vec![0u64; total_blocks as usize];
        for e in &extents {
            for i in 0..u64::from(e.block_count) {
                let logical = u64::from(e.logical_block) + i;
                if logical < total_blocks {
                    blocks[logical as usize] = (e.physical_block + i) * bs;
                }
            }
        }
        let jsb_raw = img.read_at(blocks[0], bs as usize)?;
        Self::from_superblock(blocks, bs, &jsb_raw)
    }

    /// Builds the watch from an already-resolved block map plus the journal
    /// superblock bytes.
    pub fn from_superblock(
        blocks: Vec<u64>,
        block_size: u64,
        jsb: &[u8],
    ) -> Result<Self, JournalError> {
        if jsb.len() < 64 {
            return Err(JournalError::BadSuperblock("short superblock".into()));
        }
        if be_u32(jsb, 0) != JBD2_MAGIC {
            return Err(JournalError::BadSuperblock(format!(
                "bad magic {:#010x}",
                be_u32(jsb, 0)
            )));
        }
        let btype = be_u32(jsb, 4);
        if btype != BLOCKTYPE_SUPERBLOCK_V1 && btype != BLOCKTYPE_SUPERBLOCK_V2 {
            return Err(JournalError::BadSuperblock(format!("bad block type {btype}")));
        }
        if u64::from(be_u32(jsb, 12)) != block_size {
            return Err(JournalError::BadSuperblock(format!(
                "journal blocksize {} != fs blocksize {}",
                be_u32(jsb, 12),
                block_size
            )));
        }
        let maxlen = be_u32(jsb, 16);
        if u64::from(maxlen) > blocks.len() as u64 || maxlen < 2 {
            return Err(JournalError::BadSuperblock(format!("implausible maxlen {maxlen}")));
        }
        let first = be_u32(jsb, 20);
        if first == 0 || first >= maxlen {
            return Err(JournalError::BadSuperblock(format!("implausible first {first}")));
        }
        let incompat = be_u32(jsb, 40);
        if incompat & INCOMPAT_FAST_COMMIT != 0 {
            return Err(JournalError::UnsupportedFeature("fast_commit"));
        }
        if incompat & INCOMPAT_ASYNC_COMMIT != 0 {
            return Err(JournalError::UnsupportedFeature("async_commit"));
        }
        let known = INCOMPAT_REVOKE | INCOMPAT_64BIT | INCOMPAT_CSUM_V2 | INCOMPAT_CSUM_V3;
        if incompat & !known != 0 {
            return Err(JournalError::UnsupportedFeature("unknown incompat bits"));
        }
        let features = JournalFeatures {
            has_64bit: incompat & INCOMPAT_64BIT != 0,
            csum_v2: incompat & INCOMPAT_CSUM_V2 != 0,
            csum_v3: incompat & INCOMPAT_CSUM_V3 != 0,
        };
        let uuid: [u8; 16] = jsb[48..64].try_into().unwrap();
        let csum_seed = jbd2_crc(u32::MAX, &uuid);
        Ok(Self {
            map: JournalMap { block_size, blocks, first, maxlen },
            features,
            uuid,
            csum_seed,
            expected_seq: be_u32(jsb, 24),
            last_committed: None,
            pending: None,
            revoked: HashMap::new(),
        })
    }

    #[must_use]
    pub fn expected_seq(&self) -> u32 {
        self.expected_seq
    }

    /// Feeds an image write that overlaps the journal. Partial block updates
    /// are completed by re-reading the image (the write has already been
    /// applied). Returns the events the write produced.
    pub fn on_journal_write<R: ReadAt + ?Sized>(
        &mut self,
        img: &R,
        offset: u64,
        data: &[u8],
    ) -> Vec<JournalEvent> {
        let mut events = Vec::new();
        let bs = self.map.block_size;
        let end = offset + data.len() as u64;
        // Visit every journal block the write touches, in journal order of
        // the write's span.
        let mut touched: Vec<u64> = Vec::new();
        let mut pos = offset;
        while pos < end {
            if let Some(j) = self.map.jblock_at(pos) {
                if touched.last() != Some(&j) {
                    touched.push(j);
                }
            }
            let next = (pos / bs + 1) * bs;
            pos = next.max(pos + 1);
        }
        for j in touched {
            let jstart = self.map.byte_offset(j).unwrap();
            let block = if offset <= jstart && jstart + bs <= end {
                data[(jstart - offset) as usize..][..bs as usize].to_vec()
            } else {
                match img.read_at(jstart, bs as usize) {
                    Ok(b) => b,
                    Err(_) => continue,
                }
            };
            self.process_block(img, j, &block, &mut events);
        }
        events
    }

    fn process_block<R: ReadAt + ?Sized>(
        &mut self,
        img: &R,
        jblock: u64,
        block: &[u8],
        events: &mut Vec<JournalEvent>,
    ) {
        if jblock == 0 {
            self.on_superblock_update(block, events);
            return;
        }
        let is_header = be_u32(block, 0) == JBD2_MAGIC;
        if !is_header {
            self.fill_data_slot(jblock, block);
            return;
        }
        let btype = be_u32(block, 4);
        let seq = be_u32(block, 8);
        match btype {
            BLOCKTYPE_DESCRIPTOR => self.on_descriptor(jblock, seq, block, events),
            BLOCKTYPE_COMMIT => self.on_commit(img, jblock, seq, block, events),
            BLOCKTYPE_REVOKE => self.on_revoke(jblock, seq, block, events),
            BLOCKTYPE_SUPERBLOCK_V1 | BLOCKTYPE_SUPERBLOCK_V2 => {
                // Only journal block 0 holds the superblock; elsewhere this
                // has to be an escaped-looking data block that lost its
                // escape marker, or garbage. Either way it may be a pending
                // data slot.
                self.fill_data_slot(jblock, block);
            }
            _ => self.fill_data_slot(jblock, block),
        }
    }

    fn on_superblock_update(&mut self, block: &[u8], events: &mut Vec<JournalEvent>) {
        if block.len() < 32 || be_u32(block, 0) != JBD2_MAGIC {
            return;
        }
        let seq = be_u32(block, 24);
        // The on-disk superblock sequence trails the live stream (it marks
        // the recovery start), so only a forward jump is meaningful.
        if seq > self.expected_seq {
            events.push(JournalEvent::FastForward { from: self.expected_seq, to: seq });
            self.expected_seq = seq;
            self.pending = None;
        }
    }

    fn on_descriptor(
        &mut self,
        jblock: u64,
        seq: u32,
        block: &[u8],
        events: &mut Vec<JournalEvent>,
    ) {
        match &self.pending {
            Some(p) if p.seq == seq => {
                // Continuation descriptor of the open transaction; must sit
                // at the cursor.
            }
            Some(_) | None => {
                if seq < self.expected_seq
                    || self.last_committed.is_some_and(|c| seq <= c)
                {
                    events.push(JournalEvent::SequenceRegression {
                        expected: self.expected_seq,
                        found: seq,
                    });
                    return;
                }
                if seq > self.expected_seq {
                    events.push(JournalEvent::FastForward { from: self.expected_seq, to: seq });
                    self.expected_seq = seq;
                }
                self.pending = Some(PendingTxn {
                    seq,
                    slots: Vec::new(),
                    cursor: 0,
                    staged_revokes: Vec::new(),
                    poisoned: false,
                });
            }
        }

        if self.features.checksummed() && !self.verify_tail_csum(block) {
            events.push(JournalEvent::ChecksumMismatch { seq, jblock, what: "descriptor" });
            if let Some(p) = &mut self.pending {
                p.poisoned = true;
            }
            return;
        }

        let tag_size = self.features.tag_size();
        let tail_reserve = if self.features.checksummed() { 4 } else { 0 };
        let mut pos = 12;
        let mut cursor = self.map.next_jblock(jblock);
        let mut new_slots = Vec::new();
        while pos + tag_size <= block.len() - tail_reserve {
            let fs_lo = u64::from(be_u32(block, pos));
            let (flags, csum, fs_hi) = if self.features.csum_v3 {
                let flags = be_u32(block, pos + 4);
                let hi = if self.features.has_64bit { u64::from(be_u32(block, pos + 8)) } else { 0 };
                (flags, Some(be_u32(block, pos + 12)), hi)
            } else {
                let csum16 = be_u16(block, pos + 4);
                let flags = u32::from(be_u16(block, pos + 6));
                let hi = if self.features.has_64bit && pos + 12 <= block.len() {
                    u64::from(be_u32(block, pos + 8))
                } else {
                    0
                };
                let csum = if self.features.csum_v2 { Some(u32::from(csum16)) } else { None };
                (flags, csum, hi)
            };
            pos += tag_size;
            if flags & TAG_FLAG_SAME_UUID == 0 {
                pos += 16;
            }
            if flags & TAG_FLAG_DELETED == 0 {
                new_slots.push(TagSlot {
                    fs_block: (fs_hi << 32) | fs_lo,
                    jblock: cursor,
                    escape: flags & TAG_FLAG_ESCAPE != 0,
                    csum,
                    data: None,
                });
                cursor = self.map.next_jblock(cursor);
            }
            if flags & TAG_FLAG_LAST != 0 {
                break;
            }
        }
        if let Some(p) = &mut self.pending {
            p.slots.extend(new_slots);
            p.cursor = cursor;
        }
    }

    fn fill_data_slot(&mut self, jblock: u64, block: &[u8]) {
        if let Some(p) = &mut self.pending {
            if let Some(slot) = p.slots.iter_mut().find(|s| s.jblock == jblock && s.data.is_none())
            {
                slot.data = Some(block.to_vec());
            }
        }
    }

    fn on_revoke(&mut self, jblock: u64, seq: u32, block: &[u8], events: &mut Vec<JournalEvent>) {
        match &self.pending {
            Some(p) if p.seq == seq => {}
            _ => {
                if seq < self.expected_seq || self.last_committed.is_some_and(|c| seq <= c) {
                    events.push(JournalEvent::SequenceRegression {
                        expected: self.expected_seq,
                        found: seq,
                    });
                    return;
                }
                if seq > self.expected_seq {
                    events.push(JournalEvent::FastForward { from: self.expected_seq, to: seq });
                    self.expected_seq = seq;
                }
                self.pending = Some(PendingTxn {
                    seq,
                    slots: Vec::new(),
                    cursor: self.map.next_jblock(jblock),
                    staged_revokes: Vec::new(),
                    poisoned: false,
                });
            }
        }
        if self.features.checksummed() && !self.verify_tail_csum(block) {
            events.push(JournalEvent::ChecksumMismatch { seq, jblock, what: "revoke" });
            if let Some(p) = &mut self.pending {
                p.poisoned = true;
            }
            return;
        }
        let count = be_u32(block, 12) as usize;
        if count < 16 || count > block.len() {
            return;
        }
        let step = if self.features.has_64bit { 8 } else { 4 };
        let mut pos = 16;
        let mut staged = Vec::new();
        while pos + step <= count {
            let b = if step == 8 { be_u64(block, pos) } else { u64::from(be_u32(block, pos)) };
            staged.push(b);
            pos += step;
        }
        if let Some(p) = &mut self.pending {
            p.staged_revokes.extend(staged);
        }
    }

    fn on_commit<R: ReadAt + ?Sized>(
        &mut self,
        img: &R,
        jblock: u64,
        seq: u32,
        block: &[u8],
        events: &mut Vec<JournalEvent>,
    ) {
        let Some(pending) = self.pending.take() else {
            // Commit without a transaction body: an empty transaction is
            // legal (sync with no changes), but a stale sequence is not.
            if seq < self.expected_seq || self.last_committed.is_some_and(|c| seq <= c) {
                events.push(JournalEvent::SequenceRegression {
                    expected: self.expected_seq,
                    found: seq,
                });
            }
            return;
        };
        if pending.seq != seq {
            if seq <= pending.seq {
                events.push(JournalEvent::SequenceRegression {
                    expected: pending.seq,
                    found: seq,
                });
            }
            self.pending = Some(pending);
            return;
        }
        if pending.poisoned {
            return;
        }
        if self.features.checksummed() && !self.verify_commit_csum(block) {
            events.push(JournalEvent::ChecksumMismatch { seq, jblock, what: "commit" });
            return;
        }

        // Merge this transaction's revokes first: a block revoked at seq S
        // suppresses journal copies from any transaction <= S.
        for b in &pending.staged_revokes {
            let e = self.revoked.entry(*b).or_insert(seq);
            if *e < seq {
                *e = seq;
            }
        }

        let mut blocks = Vec::with_capacity(pending.slots.len());
        for slot in pending.slots {
            if self.revoked.get(&slot.fs_block).copied().unwrap_or(0) >= seq {
                continue;
            }
            let mut data = match slot.data {
                Some(d) => d,
                // Ordering artifact: the data write was observed only as a
                // coalesced image state. It has been applied, so read it.
                None => match img.read_at(
                    self.map.byte_offset(slot.jblock).unwrap_or(u64::MAX),
                    self.map.block_size as usize,
                ) {
                    Ok(d) => d,
                    Err(_) => continue,
                },
            };
            if let Some(expect) = slot.csum {
                let seed = jbd2_crc(self.csum_seed, &seq.to_be_bytes());
                let got = jbd2_crc(seed, &data);
                let got = if self.features.csum_v3 { got } else { got & 0xFFFF };
                if got != expect {
                    events.push(JournalEvent::ChecksumMismatch {
                        seq,
                        jblock: slot.jblock,
                        what: "data tag",
                    });
                    return;
                }
            }
            if slot.escape {
                data[0..4].copy_from_slice(&JBD2_MAGIC.to_be_bytes());
            }
            blocks.push(JournaledBlock { fs_block: slot.fs_block, data });
        }
        self.last_committed = Some(seq);
        self.expected_seq = seq + 1;
        events.push(JournalEvent::Commit(CommittedTxn {
            seq,
            blocks,
            revoked: pending.staged_revokes,
        }));
    }

    fn verify_tail_csum(&self, block: &[u8]) -> bool {
        if block.len() < 16 {
            return false;
        }
        let stored = be_u32(block, block.len() - 4);
        let mut copy = block.to_vec();
        let n = copy.len();
        copy[n - 4..].fill(0);
        jbd2_crc(self.csum_seed, &copy) == stored
    }

    fn verify_commit_csum(&self, block: &[u8]) -> bool {
        if block.len() < 32 {
            return false;
        }
        let stored = be_u32(block, 16);
        let mut copy = block.to_vec();
        copy[16..20].fill(0);
        jbd2_crc(self.csum_seed, &copy) == stored
    }

    #[must_use]
    pub fn uuid(&self) -> [u8; 16] {
        self.uuid
    }
}
