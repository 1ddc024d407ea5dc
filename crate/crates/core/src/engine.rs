//! Append inference and compromise response.
//!
//! The engine consumes the raw write stream already applied to the image,
//! classifies each write against the filesystem layout, and decides when a
//! watched log file has coherently grown. Grown byte ranges are read back
//! out of the image (never taken from the host's claims) and sealed.
//! Anything that contradicts append-only discipline raises a tamper
//! indicator and triggers the configured response policy.
//!
//! Timing model: a watched file becomes extraction-eligible when its own
//! metadata has been stable for tau = lambda + omega and the device as a
//! whole has been idle for lambda. Data-journaled filesystems short-circuit
//! the wait: a journal commit record is itself the coherence point, so
//! extraction runs at commit arrival.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::block::{BlockError, BlockImage, ReadAt, WriteOp};
use crate::exfat::{self, BootSector, ExfatError};
use crate::ext4::{self, Ext4Error, Ext4Layout};
use crate::jbd2::{JournalError, JournalEvent, JournalWatch};
use crate::nbd::{WriteGate, EPERM};
use crate::seal::{SealError, SealStore};
use crate::util::range_overlap;

pub const DEFAULT_LAMBDA_NS: u64 = 10_000_000;
pub const DEFAULT_OMEGA_NS: u64 = 1_000_000_000;
pub const DEFAULT_MAX_ZERO_RETRIES: u32 = 10;
pub const DEFAULT_FREE_FLOOR_PERCENT: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fs(#[from] Ext4Error),
    #[error(transparent)]
    Exfat(#[from] ExfatError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Block(#[from] BlockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JournalMode {
    None,
    Ordered,
    DataJournal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsKind {
    Ext4,
    Exfat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    ReadOnlyRemount,
    Honeypot,
}

#[derive(Debug, Clone)]
pub struct WatchSpec {
    pub log_id: u32,
    /// Root-relative file name, leading slash optional.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub fs: FsKind,
    pub journal_mode: JournalMode,
    pub lambda_ns: u64,
    pub omega_ns: u64,
    pub max_zero_retries: u32,
    pub free_floor_percent: u32,
    pub policy: Policy,
    pub watches: Vec<WatchSpec>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            fs: FsKind::Ext4,
            journal_mode: JournalMode::None,
            lambda_ns: DEFAULT_LAMBDA_NS,
            omega_ns: DEFAULT_OMEGA_NS,
            max_zero_retries: DEFAULT_MAX_ZERO_RETRIES,
            free_floor_percent: DEFAULT_FREE_FLOOR_PERCENT,
            policy: Policy::ReadOnlyRemount,
            watches: Vec::new(),
        }
    }
}

impl EngineConfig {
    #[must_use]
    pub fn tau_ns(&self) -> u64 {
        self.lambda_ns + self.omega_ns
    }
}

/// The five compromise indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndicatorKind {
    /// A watched file's committed size went backwards.
    SizeShrink,
    /// Bytes inside a watched file's sealed range were rewritten with
    /// different content.
    NonAppendWrite,
    /// An immutable superblock or boot-region field changed.
    SuperblockTamper,
    /// Filesystem structures became self-inconsistent: journal checksum or
    /// sequence violations, broken chains, deleted watch files.
    StructureTamper,
    /// Free space fell below the configured floor.
    VolumeExhaustion,
}

impl IndicatorKind {
    #[must_use]
    pub fn name(&self) -> &'static str {
        match self {
            Self::SizeShrink => "size_shrink",
            Self::NonAppendWrite => "non_append_write",
            Self::SuperblockTamper => "superblock_tamper",
            Self::StructureTamper => "structure_tamper",
            Self::VolumeExhaustion => "volume_exhaustion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indicator {
    pub kind: IndicatorKind,
    /// Affected watch, when the indicator is file-scoped.
    pub log_id: Option<u32>,
    pub detail: String,
    pub at_ns: u64,
}

/// What authorized an extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionBasis {
    /// tau elapsed on the watch window and lambda on the device.
    Quiescence,
    /// A journal commit record was decoded; no settle wait applies.
    JournalCommit { seq: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeferReason {
    /// Metadata not yet decodable (blank inode, bad set checksum, missing
    /// dirent). Bounded before escalating to a structure indicator.
    NotCoherent,
    /// The appended range maps to holes or unwritten extents.
    MappingIncomplete,
    /// An all-zero filesystem block overlaps the appended range.
    ZeroBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    Sealed {
        log_id: u32,
        offset: u64,
        length: u64,
        record_index: u64,
        basis: ExtractionBasis,
        at_ns: u64,
    },
    Deferred {
        log_id: u32,
        reason: DeferReason,
    },
    /// Zero-block deferral budget exhausted; the range was sealed as-is.
    ZeroCommitted {
        log_id: u32,
        offset: u64,
        length: u64,
    },
    Indicator(Indicator),
    Frozen {
        policy: Policy,
        at_ns: u64,
    },
    /// Post-freeze observation recorded in the divergence journal.
    Divergence {
        line: String,
    },
}

/// Write admission gate shared with the NBD session. Honeypot mode leaves it
/// open after freeze; read-only mode closes it.
pub struct GateState {
    writable: AtomicBool,
}

impl GateState {
    #[must_use]
    pub fn new() -> Arc<Self> {
        Arc::new(Self { writable: AtomicBool::new(true) })
    }

    #[must_use]
    pub fn is_writable(&self) -> bool {
        self.writable.load(Ordering::SeqCst)
    }

    pub fn set_writable(&self, value: bool) {
        self.writable.store(value, Ordering::SeqCst);
    }
}

impl WriteGate for GateState {
    fn admit(&self, _offset: u64, _length: u64) -> Result<(), u32> {
        if self.is_writable() {
            Ok(())
        } else {
            Err(EPERM)
        }
    }
}

/// One committed physical segment of a watched file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CommittedSeg {
    physical: u64,
    len: u64,
    file_offset: u64,
}

struct WatchState {
    log_id: u32,
    path: String,
    committed_len: u64,
    committed_segs: Vec<CommittedSeg>,
    /// Arrival time of the newest watch-relevant write; None when clean.
    window_last_ns: Option<u64>,
    defer_retries: u32,
    last_defer: Option<DeferReason>,
    // ext4
    inode_no: u64,
    inode_record_offset: u64,
    // exfat
    last_stream_flags: Option<u8>,
}

struct Ext4State {
    layout: Ext4Layout,
    journal: Option<JournalWatch>,
    /// Journal overlay: fs block -> (commit seq, block bytes). Authoritative
    /// over the image until checkpointed.
    overlay: HashMap<u64, (u32, Vec<u8>)>,
}

struct ExfatState {
    sb: BootSector,
    immutable_boot: Vec<u8>,
    fat_range: (u64, u64),
    bitmap_range: (u64, u64),
    root_ranges: Vec<(u64, u64)>,
    boot_len: u64,
}

enum FsState {
    Ext4(Ext4State),
    Exfat(ExfatState),
}

/// Image reader that prefers journal overlay blocks.
struct OverlayReader<'a> {
    img: &'a BlockImage,
    overlay: &'a HashMap<u64, (u32, Vec<u8>)>,
    block_size: u64,
}

impl ReadAt for OverlayReader<'_> {
    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>, BlockError> {
        if self.overlay.is_empty() {
            return self.img.read_at(offset, len);
        }
        let mut out = Vec::with_capacity(len);
        let mut pos = offset;
        let end = offset + len as u64;
        while pos < end {
            let block = pos / self.block_size;
            let within = (pos % self.block_size) as usize;
            let take = ((self.block_size as usize) - within).min((end - pos) as usize);
            match self.overlay.get(&block) {
                Some((_, bytes)) if bytes.len() >= within + take => {
                    out.extend_from_slice(&bytes[within..within + take]);
                }
                _ => out.extend_from_slice(&self.img.read_at(pos, take)?),
            }
            pos += take as u64;
        }
        Ok(out)
    }
}

/// Result of a read-only extraction evaluation, applied in a second phase.
enum Outcome {
    Defer(DeferReason),
    Tamper { kind: IndicatorKind, detail: String },
    Clean { segs: Vec<CommittedSeg>, stream_flags: Option<u8> },
    Extract {
        offset: u64,
        data: Vec<u8>,
        /// File-relative offset of an all-zero block inside the new range.
        zero_at: Option<u64>,
        segs: Vec<CommittedSeg>,
        stream_flags: Option<u8>,
    },
}

pub struct Engine {
    img: Arc<BlockImage>,
    store: SealStore,
    cfg: EngineConfig,
    fs: FsState,
    watches: Vec<WatchState>,
    gate: Arc<GateState>,
    device_last_write_ns: u64,
    events: Vec<EngineEvent>,
    raised: HashSet<(IndicatorKind, u64)>,
    bitmap_dirty: bool,
    sb_suspect: bool,
    frozen: bool,
}

impl Engine {
    pub fn new(
        img: Arc<BlockImage>,
        store: SealStore,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        if cfg.watches.is_empty() {
            return Err(EngineError::Config("no watched logs configured".into()));
        }
        if cfg.fs == FsKind::Exfat && cfg.journal_mode != JournalMode::None {
            return Err(EngineError::Config("exfat has no journal".into()));
        }

        let mut watches: Vec<WatchState> = cfg
            .watches
            .iter()
            .map(|spec| WatchState {
                log_id: spec.log_id,
                path: spec.path.trim_start_matches('/').to_string(),
                committed_len: store.authenticated_len(spec.log_id),
                committed_segs: Vec::new(),
                // A dirty window at start reconciles growth that happened
                // while the engine was down.
                window_last_ns: Some(0),
                defer_retries: 0,
                last_defer: None,
                inode_no: 0,
                inode_record_offset: 0,
                last_stream_flags: None,
            })
            .collect();

        let fs = match cfg.fs {
            FsKind::Ext4 => {
                let mut layout = Ext4Layout::load(img.as_ref())?;
                for w in &mut watches {
                    let watched = layout.watch(img.as_ref(), &format!("/{}", w.path))?;
                    w.inode_no = watched.inode_no;
                    w.inode_record_offset = watched.record_offset;
                }
                let journal = if layout.sb.has_journal() {
                    if cfg.journal_mode == JournalMode::None {
                        return Err(EngineError::Config(
                            "filesystem has a journal; configure ordered or data mode".into(),
                        ));
                    }
                    let jw = JournalWatch::load(img.as_ref(), &layout.sb)?;
                    layout.journal_ranges = jw.map.byte_ranges();
                    Some(jw)
                } else {
                    if cfg.journal_mode != JournalMode::None {
                        return Err(EngineError::Config(format!(
                            "journal mode {:?} configured but the filesystem has no journal",
                            cfg.journal_mode
                        )));
                    }
                    None
                };
                FsState::Ext4(Ext4State { layout, journal, overlay: HashMap::new() })
            }
            FsKind::Exfat => {
                let raw0 = img.read_at(0, 512)?;
                let sb = exfat::parse_boot_sector(&raw0)?;
                exfat::verify_boot_regions(img.as_ref(), &sb)?;
                for w in &mut watches {
                    let set = exfat::lookup_root(img.as_ref(), &sb, &w.path)?;
                    w.last_stream_flags = Some(set.stream.flags);
                }
                let sector0 = img.read_at(0, sb.bytes_per_sector() as usize)?;
                let (bm_off, bm_len) = exfat::bitmap_location(img.as_ref(), &sb)?;
                let root_ranges = root_dir_ranges(img.as_ref(), &sb)?;
                FsState::Exfat(ExfatState {
                    immutable_boot: exfat::immutable_boot_view(&sector0),
                    fat_range: (
                        sb.fat_byte_offset(),
                        sb.fat_byte_offset() + sb.fat_byte_len() * u64::from(sb.number_of_fats),
                    ),
                    bitmap_range: (bm_off, bm_off + bm_len),
                    root_ranges,
                    boot_len: sb.boot_regions_len(),
                    sb,
                })
            }
        };

        let frozen = store.is_frozen();
        let gate = GateState::new();
        if frozen && cfg.policy == Policy::ReadOnlyRemount {
            gate.set_writable(false);
        }
        Ok(Self {
            img,
            store,
            cfg,
            fs,
            watches,
            gate,
            device_last_write_ns: 0,
            events: Vec::new(),
            raised: HashSet::new(),
            bitmap_dirty: true,
            sb_suspect: false,
            frozen,
        })
    }

    #[must_use]
    pub fn gate(&self) -> Arc<GateState> {
        Arc::clone(&self.gate)
    }

    #[must_use]
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    #[must_use]
    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    #[must_use]
    pub fn store(&self) -> &SealStore {
        &self.store
    }

    #[must_use]
    pub fn committed_len(&self, log_id: u32) -> u64 {
        self.watches
            .iter()
            .find(|w| w.log_id == log_id)
            .map_or(0, |w| w.committed_len)
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    /// Ingest one applied write. Classification and any commit-basis
    /// extraction happen before return.
    pub fn on_write(&mut self, op: &WriteOp) {
        self.device_last_write_ns = self.device_last_write_ns.max(op.arrival_ns);
        if op.is_empty() {
            return;
        }
        match &self.fs {
            FsState::Ext4(_) => self.on_write_ext4(op),
            FsState::Exfat(_) => self.on_write_exfat(op),
        }
    }

    fn on_write_ext4(&mut self, op: &WriteOp) {
        let img = Arc::clone(&self.img);
        let now = op.arrival_ns;

        let journal_events = {
            let FsState::Ext4(st) = &mut self.fs else { unreachable!() };
            if st.layout.in_journal(op.offset, op.len()) {
                st.journal
                    .as_mut()
                    .map(|j| j.on_journal_write(img.as_ref(), op.offset, &op.data))
            } else {
                None
            }
        };
        if let Some(events) = journal_events {
            self.on_journal_events(events, now);
            return;
        }

        let classes = {
            let FsState::Ext4(st) = &self.fs else { unreachable!() };
            ext4::classify_write_all(&st.layout, img.as_ref(), op.offset, &op.data)
        };
        let mut sb_to_check: Option<Option<ext4::Superblock>> = None;
        for class in classes {
            match class {
                ext4::Classification::WatchedInode { inode_no, .. } => {
                    if let Some(w) = self.watches.iter_mut().find(|w| w.inode_no == inode_no) {
                        w.window_last_ns = Some(now);
                    }
                }
                ext4::Classification::SuperblockRegion { sb } => sb_to_check = Some(sb),
                ext4::Classification::JournalRegion | ext4::Classification::DataOrOther => {}
            }
        }
        if let Some(sb) = sb_to_check {
            self.check_superblock(sb, now);
        }

        let bitmap_hit = {
            let FsState::Ext4(st) = &self.fs else { unreachable!() };
            st.layout.block_bitmap_group(op.offset, op.len()).is_some()
        };
        if bitmap_hit {
            self.bitmap_dirty = true;
        }
        self.check_committed_overlap(op);
    }

    fn on_write_exfat(&mut self, op: &WriteOp) {
        let now = op.arrival_ns;
        let span = (op.offset, op.end());
        let (boot_len, fat_range, bitmap_range, root_hit) = {
            let FsState::Exfat(st) = &self.fs else { unreachable!() };
            (
                st.boot_len,
                st.fat_range,
                st.bitmap_range,
                st.root_ranges.iter().any(|&r| range_overlap(span, r).is_some()),
            )
        };

        if range_overlap(span, (0, boot_len)).is_some() {
            self.check_boot_region(now);
        }
        if range_overlap(span, fat_range).is_some() || root_hit {
            for w in &mut self.watches {
                w.window_last_ns = Some(now);
            }
        }
        if range_overlap(span, bitmap_range).is_some() {
            self.bitmap_dirty = true;
        }
        self.check_committed_overlap(op);
    }

    /// Journal event fan-out. Commits update the overlay; in data mode they
    /// authorize immediate extraction.
    fn on_journal_events(&mut self, events: Vec<JournalEvent>, now: u64) {
        for ev in events {
            match ev {
                JournalEvent::Commit(txn) => {
                    let seq = txn.seq;
                    let mut dirty: Vec<usize> = Vec::new();
                    let mut bitmap_touched = false;
                    {
                        let FsState::Ext4(st) = &mut self.fs else { unreachable!() };
                        for b in &txn.revoked {
                            if let Some((s, _)) = st.overlay.get(b) {
                                if *s <= seq {
                                    st.overlay.remove(b);
                                }
                            }
                        }
                        let bs = st.layout.block_size();
                        for jb in txn.blocks {
                            for (i, w) in self.watches.iter().enumerate() {
                                if w.inode_record_offset / bs == jb.fs_block && !dirty.contains(&i)
                                {
                                    dirty.push(i);
                                }
                            }
                            if st.layout.groups.iter().any(|g| g.block_bitmap == jb.fs_block) {
                                bitmap_touched = true;
                            }
                            st.overlay.insert(jb.fs_block, (seq, jb.data));
                        }
                    }
                    for i in &dirty {
                        self.watches[*i].window_last_ns = Some(now);
                    }
                    if bitmap_touched {
                        self.bitmap_dirty = true;
                    }
                    if self.cfg.journal_mode == JournalMode::DataJournal {
                        let basis = ExtractionBasis::JournalCommit { seq };
                        for i in 0..self.watches.len() {
                            self.attempt_extract(i, now, basis);
                        }
                    }
                }
                JournalEvent::SequenceRegression { expected, found } => {
                    self.raise(
                        IndicatorKind::StructureTamper,
                        None,
                        format!("journal sequence regressed: expected {expected}, found {found}"),
                        now,
                    );
                }
                JournalEvent::ChecksumMismatch { seq, jblock, what } => {
                    self.raise(
                        IndicatorKind::StructureTamper,
                        None,
                        format!(
                            "journal {what} checksum mismatch in txn {seq} at journal block {jblock}"
                        ),
                        now,
                    );
                }
                JournalEvent::FastForward { .. } => {}
            }
        }
    }

    /// A write overlapping sealed bytes is benign only if it rewrites them
    /// with identical content (journal checkpointing does exactly that).
    fn check_committed_overlap(&mut self, op: &WriteOp) {
        let span = (op.offset, op.end());
        let mut hits: Vec<(u32, u64, u64, Vec<u8>)> = Vec::new();
        for w in &self.watches {
            for seg in &w.committed_segs {
                let seg_span = (seg.physical, seg.physical + seg.len);
                if let Some((lo, hi)) = range_overlap(span, seg_span) {
                    let file_off = seg.file_offset + (lo - seg.physical);
                    let written =
                        op.data[(lo - op.offset) as usize..(hi - op.offset) as usize].to_vec();
                    hits.push((w.log_id, file_off, hi - lo, written));
                }
            }
        }
        for (log_id, file_off, len, written) in hits {
            match self.store.read_log_range(log_id, file_off, len) {
                Ok(sealed) if sealed == written => {}
                Ok(_) | Err(_) => {
                    self.raise(
                        IndicatorKind::NonAppendWrite,
                        Some(log_id),
                        format!("sealed range rewritten: file offset {file_off}, {len} bytes"),
                        op.arrival_ns,
                    );
                }
            }
        }
    }

    fn check_superblock(&mut self, parsed: Option<ext4::Superblock>, now: u64) {
        let changed = {
            let FsState::Ext4(st) = &self.fs else { return };
            match &parsed {
                Some(sb) => Some(sb.immutable_view() != st.layout.immutable_sb),
                None => None,
            }
        };
        match changed {
            Some(true) => self.raise(
                IndicatorKind::SuperblockTamper,
                None,
                "immutable superblock field changed".into(),
                now,
            ),
            Some(false) => self.sb_suspect = false,
            // Possibly torn; re-judged at the next quiescent tick.
            None => self.sb_suspect = true,
        }
    }

    fn check_boot_region(&mut self, now: u64) {
        let verdict = {
            let FsState::Exfat(st) = &self.fs else { return };
            let ss = st.sb.bytes_per_sector() as usize;
            match self.img.read_at(0, ss) {
                Ok(sector0) => {
                    if exfat::immutable_boot_view(&sector0) != st.immutable_boot {
                        Some((IndicatorKind::SuperblockTamper, "immutable boot sector field changed"))
                    } else if exfat::verify_boot_regions(self.img.as_ref(), &st.sb).is_err() {
                        Some((IndicatorKind::StructureTamper, "boot region checksum broken"))
                    } else {
                        None
                    }
                }
                Err(_) => None,
            }
        };
        if let Some((kind, detail)) = verdict {
            self.raise(kind, None, detail.into(), now);
        }
    }

    /// Periodic driver. `now_ns` comes from the same clock as write
    /// arrivals; replay substitutes a virtual clock.
    pub fn tick(&mut self, now_ns: u64) {
        let tau = self.cfg.tau_ns();
        let device_quiet =
            now_ns.saturating_sub(self.device_last_write_ns) >= self.cfg.lambda_ns;

        for i in 0..self.watches.len() {
            let Some(last) = self.watches[i].window_last_ns else { continue };
            if now_ns.saturating_sub(last) >= tau && device_quiet {
                self.attempt_extract(i, now_ns, ExtractionBasis::Quiescence);
            }
        }

        if self.bitmap_dirty && device_quiet {
            self.bitmap_dirty = false;
            self.check_free_space(now_ns);
        }

        if self.sb_suspect && device_quiet {
            self.sb_suspect = false;
            self.recheck_superblock(now_ns);
        }
    }

    fn recheck_superblock(&mut self, now: u64) {
        let verdict = {
            let FsState::Ext4(st) = &self.fs else { return };
            let raw = self
                .img
                .read_at(ext4::SUPERBLOCK_OFFSET, ext4::SUPERBLOCK_LEN)
                .unwrap_or_default();
            match ext4::parse_superblock_bytes(&raw) {
                Ok(sb) => {
                    if sb.immutable_view() != st.layout.immutable_sb {
                        Some("immutable superblock field changed")
                    } else {
                        None
                    }
                }
                Err(_) => Some("superblock no longer decodes"),
            }
        };
        if let Some(detail) = verdict {
            self.raise(IndicatorKind::SuperblockTamper, None, detail.into(), now);
        }
    }

    fn check_free_space(&mut self, now: u64) {
        let result: Option<(u64, u64)> = match &self.fs {
            FsState::Ext4(st) => {
                let reader = OverlayReader {
                    img: self.img.as_ref(),
                    overlay: &st.overlay,
                    block_size: st.layout.block_size(),
                };
                let bs = st.layout.block_size();
                let mut free = 0u64;
                let mut readable = true;
                for gd in &st.layout.groups {
                    match reader.read_at(gd.block_bitmap * bs, bs as usize) {
                        Ok(bitmap) => free += ext4::bitmap_free_count(&bitmap),
                        Err(_) => readable = false,
                    }
                }
                readable.then_some((free, st.layout.sb.blocks_count))
            }
            FsState::Exfat(st) => exfat::free_cluster_count(self.img.as_ref(), &st.sb)
                .ok()
                .map(|f| (f, u64::from(st.sb.cluster_count))),
        };
        let Some((free, total)) = result else { return };
        if total == 0 {
            return;
        }
        let floor = (total * u64::from(self.cfg.free_floor_percent) / 100).max(1);
        if free < floor {
            self.raise(
                IndicatorKind::VolumeExhaustion,
                None,
                format!(
                    "free units {free} of {total} below {}% floor",
                    self.cfg.free_floor_percent
                ),
                now,
            );
        }
    }

    fn attempt_extract(&mut self, widx: usize, now: u64, basis: ExtractionBasis) {
        let outcome = match &self.fs {
            FsState::Ext4(_) => self.evaluate_ext4(widx),
            FsState::Exfat(_) => self.evaluate_exfat(widx),
        };
        self.apply_outcome(widx, outcome, now, basis);
    }

    fn apply_outcome(&mut self, widx: usize, outcome: Outcome, now: u64, basis: ExtractionBasis) {
        match outcome {
            Outcome::Defer(reason) => {
                self.defer(widx, reason, now);
            }
            Outcome::Tamper { kind, detail } => {
                let log_id = self.watches[widx].log_id;
                self.watches[widx].window_last_ns = None;
                self.raise(kind, Some(log_id), detail, now);
            }
            Outcome::Clean { segs, stream_flags } => {
                self.refresh_exfat_root_ranges();
                let w = &mut self.watches[widx];
                w.committed_segs = segs;
                if stream_flags.is_some() {
                    w.last_stream_flags = stream_flags;
                }
                w.window_last_ns = None;
                w.defer_retries = 0;
                w.last_defer = None;
            }
            Outcome::Extract { offset, data, zero_at, segs, stream_flags } => {
                if let Some(rel) = zero_at {
                    if self.defer(widx, DeferReason::ZeroBlock, now) {
                        return;
                    }
                    let log_id = self.watches[widx].log_id;
                    self.events.push(EngineEvent::ZeroCommitted {
                        log_id,
                        offset: offset + rel,
                        length: data.len() as u64,
                    });
                }
                if let Err(e) = self.seal_extracted(widx, offset, &data, basis, now) {
                    log::error!("sealing failed for log {}: {e}", self.watches[widx].log_id);
                    return;
                }
                self.refresh_exfat_root_ranges();
                let w = &mut self.watches[widx];
                w.committed_segs = segs;
                if stream_flags.is_some() {
                    w.last_stream_flags = stream_flags;
                }
                w.window_last_ns = None;
                w.defer_retries = 0;
                w.last_defer = None;
            }
        }
    }

    fn refresh_exfat_root_ranges(&mut self) {
        let new_ranges = {
            let FsState::Exfat(st) = &self.fs else { return };
            root_dir_ranges(self.img.as_ref(), &st.sb).ok()
        };
        if let (FsState::Exfat(st), Some(r)) = (&mut self.fs, new_ranges) {
            st.root_ranges = r;
        }
    }

    /// Returns true when the caller should stop (the defer stands); false
    /// means the zero-block budget ran out and extraction may proceed.
    fn defer(&mut self, widx: usize, reason: DeferReason, now: u64) -> bool {
        let max = self.cfg.max_zero_retries;
        let (escalate, log_id, path) = {
            let log_id = self.watches[widx].log_id;
            let w = &mut self.watches[widx];
            if w.last_defer == Some(reason) {
                w.defer_retries += 1;
            } else {
                w.last_defer = Some(reason);
                w.defer_retries = 1;
                self.events.push(EngineEvent::Deferred { log_id, reason });
            }
            // Restamp so each retry waits out a fresh settle period instead
            // of spinning every tick.
            let w = &mut self.watches[widx];
            w.window_last_ns = Some(now);
            (w.defer_retries > max, log_id, w.path.clone())
        };
        if !escalate {
            return true;
        }
        match reason {
            DeferReason::ZeroBlock => false,
            DeferReason::NotCoherent | DeferReason::MappingIncomplete => {
                let w = &mut self.watches[widx];
                w.window_last_ns = None;
                w.defer_retries = 0;
                w.last_defer = None;
                self.raise(
                    IndicatorKind::StructureTamper,
                    Some(log_id),
                    format!("metadata for {path} failed to become coherent"),
                    now,
                );
                true
            }
        }
    }

    fn evaluate_ext4(&self, widx: usize) -> Outcome {
        let FsState::Ext4(st) = &self.fs else { unreachable!() };
        let reader = OverlayReader {
            img: self.img.as_ref(),
            overlay: &st.overlay,
            block_size: st.layout.block_size(),
        };
        let w = &self.watches[widx];
        let sb = &st.layout.sb;

        let record = match ext4::read_inode(&reader, sb, w.inode_no) {
            Ok(r) => r,
            Err(_) => return Outcome::Defer(DeferReason::NotCoherent),
        };
        if record.is_blank() {
            return Outcome::Defer(DeferReason::NotCoherent);
        }
        if !record.is_regular() || record.links_count == 0 {
            return Outcome::Tamper {
                kind: IndicatorKind::StructureTamper,
                detail: format!(
                    "watched inode {} is no longer a live regular file (mode {:#o}, links {})",
                    w.inode_no, record.mode, record.links_count
                ),
            };
        }
        let size = record.size;
        if size < w.committed_len {
            return Outcome::Tamper {
                kind: IndicatorKind::SizeShrink,
                detail: format!(
                    "committed size {size} below sealed length {}",
                    w.committed_len
                ),
            };
        }

        let extents = match ext4::resolve_extents(&reader, sb, &record) {
            Ok(e) => e,
            Err(_) => return Outcome::Defer(DeferReason::NotCoherent),
        };
        let full = ext4::map_file_range(sb, &extents, 0, size);
        let segs: Vec<CommittedSeg> = full
            .iter()
            .filter_map(|s| {
                s.physical.map(|p| CommittedSeg {
                    physical: p,
                    len: s.len,
                    file_offset: s.file_offset,
                })
            })
            .collect();

        if size == w.committed_len {
            return Outcome::Clean { segs, stream_flags: None };
        }

        let new_len = size - w.committed_len;
        let new_segs = ext4::map_file_range(sb, &extents, w.committed_len, new_len);
        if new_segs.iter().any(|s| s.physical.is_none()) {
            return Outcome::Defer(DeferReason::MappingIncomplete);
        }
        let mut data = Vec::with_capacity(new_len as usize);
        for seg in &new_segs {
            match reader.read_at(seg.physical.unwrap(), seg.len as usize) {
                Ok(b) => data.extend_from_slice(&b),
                Err(e) => {
                    return Outcome::Tamper {
                        kind: IndicatorKind::StructureTamper,
                        detail: format!("mapped extent is unreadable: {e}"),
                    }
                }
            }
        }
        let zero_at = match find_zero_block(&reader, &new_segs, st.layout.block_size()) {
            Ok(z) => z,
            Err(_) => return Outcome::Defer(DeferReason::MappingIncomplete),
        };
        Outcome::Extract { offset: w.committed_len, data, zero_at, segs, stream_flags: None }
    }

    fn evaluate_exfat(&self, widx: usize) -> Outcome {
        let FsState::Exfat(st) = &self.fs else { unreachable!() };
        let sb = st.sb;
        let img = self.img.as_ref();
        let w = &self.watches[widx];

        let set = match exfat::lookup_root(img, &sb, &w.path) {
            Ok(s) => s,
            Err(ExfatError::NotFound(_)) => return Outcome::Defer(DeferReason::NotCoherent),
            Err(ExfatError::ChainLoop(c)) => {
                return Outcome::Tamper {
                    kind: IndicatorKind::StructureTamper,
                    detail: format!("root directory chain is cyclic at cluster {c}"),
                }
            }
            Err(_) => return Outcome::Defer(DeferReason::NotCoherent),
        };
        if !set.checksum_ok {
            return Outcome::Defer(DeferReason::NotCoherent);
        }
        let stream = set.stream;
        if stream.valid_data_length > stream.data_length {
            return Outcome::Tamper {
                kind: IndicatorKind::StructureTamper,
                detail: format!(
                    "valid data length {} exceeds data length {}",
                    stream.valid_data_length, stream.data_length
                ),
            };
        }
        if let Some(prev) = w.last_stream_flags {
            let was_chained = prev & exfat::FLAG_NO_FAT_CHAIN == 0;
            if was_chained && stream.no_fat_chain() && w.committed_len > 0 {
                return Outcome::Tamper {
                    kind: IndicatorKind::StructureTamper,
                    detail: "FAT-chained file flipped to NoFatChain, discarding its chain".into(),
                };
            }
        }
        let size = stream.valid_data_length;
        if size < w.committed_len {
            return Outcome::Tamper {
                kind: IndicatorKind::SizeShrink,
                detail: format!(
                    "committed size {size} below sealed length {}",
                    w.committed_len
                ),
            };
        }

        let chain = match exfat::cluster_chain(
            img,
            &sb,
            stream.first_cluster,
            stream.no_fat_chain(),
            stream.data_length,
        ) {
            Ok(c) => c,
            Err(ExfatError::ChainLoop(c)) => {
                return Outcome::Tamper {
                    kind: IndicatorKind::StructureTamper,
                    detail: format!("FAT chain for {} is cyclic at cluster {c}", w.path),
                }
            }
            Err(_) => return Outcome::Defer(DeferReason::NotCoherent),
        };

        let to_segs = |ranges: &[(u64, u64, Option<u64>)]| -> Vec<CommittedSeg> {
            ranges
                .iter()
                .filter_map(|&(fo, l, p)| {
                    p.map(|phys| CommittedSeg { physical: phys, len: l, file_offset: fo })
                })
                .collect()
        };

        let full = match exfat::map_file_range(&sb, &chain, 0, size) {
            Ok(f) => f,
            Err(_) => return Outcome::Defer(DeferReason::MappingIncomplete),
        };
        let segs = to_segs(&full);

        if size == w.committed_len {
            return Outcome::Clean { segs, stream_flags: Some(stream.flags) };
        }

        let new_len = size - w.committed_len;
        let new_ranges = match exfat::map_file_range(&sb, &chain, w.committed_len, new_len) {
            Ok(r) => r,
            Err(_) => return Outcome::Defer(DeferReason::MappingIncomplete),
        };
        if new_ranges.iter().any(|(_, _, p)| p.is_none()) {
            return Outcome::Defer(DeferReason::MappingIncomplete);
        }
        let mut data = Vec::with_capacity(new_len as usize);
        for (_, len, phys) in &new_ranges {
            match img.read_at(phys.unwrap(), *len as usize) {
                Ok(b) => data.extend_from_slice(&b),
                Err(e) => {
                    return Outcome::Tamper {
                        kind: IndicatorKind::StructureTamper,
                        detail: format!("mapped cluster is unreadable: {e}"),
                    }
                }
            }
        }
        let mapped: Vec<ext4::Segment> = new_ranges
            .iter()
            .map(|&(fo, l, p)| ext4::Segment { file_offset: fo, len: l, physical: p })
            .collect();
        let zero_at = match find_zero_block(img, &mapped, sb.cluster_size()) {
            Ok(z) => z,
            Err(_) => return Outcome::Defer(DeferReason::MappingIncomplete),
        };
        Outcome::Extract {
            offset: w.committed_len,
            data,
            zero_at,
            segs,
            stream_flags: Some(stream.flags),
        }
    }

    fn seal_extracted(
        &mut self,
        widx: usize,
        offset: u64,
        data: &[u8],
        basis: ExtractionBasis,
        now: u64,
    ) -> Result<(), EngineError> {
        let log_id = self.watches[widx].log_id;
        let length = data.len() as u64;
        if self.frozen {
            let line = format!(
                "{{\"kind\":\"append_after_freeze\",\"log_id\":{log_id},\"offset\":{offset},\"length\":{length},\"at_ns\":{now}}}"
            );
            let _ = self.store.append_divergence(&line);
            self.events.push(EngineEvent::Divergence { line });
            self.watches[widx].committed_len = offset + length;
            return Ok(());
        }
        let record_index = self.store.append(log_id, data)?;
        self.watches[widx].committed_len = offset + length;
        self.events.push(EngineEvent::Sealed {
            log_id,
            offset,
            length,
            record_index,
            basis,
            at_ns: now,
        });
        Ok(())
    }

    fn raise(&mut self, kind: IndicatorKind, log_id: Option<u32>, detail: String, now: u64) {
        let subject = log_id.map_or(u64::MAX, u64::from);
        if !self.raised.insert((kind, subject)) {
            return;
        }
        let indicator = Indicator { kind, log_id, detail, at_ns: now };
        let report = incident_json(&indicator);
        if self.frozen {
            let _ = self.store.append_divergence(&report);
            self.events.push(EngineEvent::Divergence { line: report });
            self.events.push(EngineEvent::Indicator(indicator));
            return;
        }
        if self.store.append_incident(report.as_bytes()).is_err() {
            log::error!("failed to seal incident report");
        }
        if self.store.freeze().is_err() {
            log::error!("failed to freeze seal store");
        }
        self.frozen = true;
        if self.cfg.policy == Policy::ReadOnlyRemount {
            self.gate.set_writable(false);
        }
        self.events.push(EngineEvent::Indicator(indicator));
        self.events.push(EngineEvent::Frozen { policy: self.cfg.policy, at_ns: now });
    }
}

/// Byte ranges of the root directory clusters.
fn root_dir_ranges<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
) -> Result<Vec<(u64, u64)>, ExfatError> {
    let chain = exfat::cluster_chain(img, sb, sb.first_cluster_of_root, false, u64::MAX)?;
    let cs = sb.cluster_size();
    chain
        .iter()
        .map(|&c| sb.cluster_byte_offset(c).map(|o| (o, o + cs)))
        .collect()
}

/// File-relative offset of the first all-zero filesystem block overlapping
/// the mapped segments, if any. Overlap is judged per block, not per whole
/// segment.
fn find_zero_block<R: ReadAt + ?Sized>(
    reader: &R,
    segs: &[ext4::Segment],
    block_size: u64,
) -> Result<Option<u64>, BlockError> {
    let base = segs.first().map_or(0, |s| s.file_offset);
    for seg in segs {
        let Some(phys) = seg.physical else { continue };
        let first_block = phys / block_size;
        let last_block = (phys + seg.len - 1) / block_size;
        for b in first_block..=last_block {
            let raw = reader.read_at(b * block_size, block_size as usize)?;
            if raw.iter().all(|&x| x == 0) {
                let block_start = b * block_size;
                let rel = block_start.saturating_sub(phys);
                return Ok(Some(seg.file_offset - base + rel));
            }
        }
    }
    Ok(None)
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Stable single-line JSON for sealed incident reports.
#[must_use]
pub fn incident_json(ind: &Indicator) -> String {
    let log = ind.log_id.map_or("null".to_string(), |l| l.to_string());
    format!(
        "{{\"kind\":\"{}\",\"log_id\":{},\"detail\":\"{}\",\"at_ns\":{}}}",
        ind.kind.name(),
        log,
        json_escape(&ind.detail),
        ind.at_ns
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incident_json_is_stable_and_escaped() {
        let ind = Indicator {
            kind: IndicatorKind::SizeShrink,
            log_id: Some(3),
            detail: "size \"went\" back\n".into(),
            at_ns: 17,
        };
        assert_eq!(
            incident_json(&ind),
            "{\"kind\":\"size_shrink\",\"log_id\":3,\"detail\":\"size \\\"went\\\" back\\n\",\"at_ns\":17}"
        );
        let global = Indicator {
            kind: IndicatorKind::VolumeExhaustion,
            log_id: None,
            detail: String::new(),
            at_ns: 0,
        };
        assert!(incident_json(&global).contains("\"log_id\":null"));
    }

    #[test]
    fn gate_flips_to_read_only() {
        let gate = GateState::new();
        assert!(gate.admit(0, 512).is_ok());
        gate.set_writable(false);
        assert_eq!(gate.admit(0, 512), Err(EPERM));
    }

    #[test]
    fn indicator_names_are_distinct() {
        let kinds = [
            IndicatorKind::SizeShrink,
            IndicatorKind::NonAppendWrite,
            IndicatorKind::SuperblockTamper,
            IndicatorKind::StructureTamper,
            IndicatorKind::VolumeExhaustion,
        ];
        let names: HashSet<&str> = kinds.iter().map(|k| k.name()).collect();
        assert_eq!(names.len(), kinds.len());
    }

    #[test]
    fn tau_is_lambda_plus_omega() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.tau_ns(), DEFAULT_LAMBDA_NS + DEFAULT_OMEGA_NS);
    }
}
