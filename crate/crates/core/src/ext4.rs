//! Read-only ext4 on-disk structure decoding.
//!
//! Covers exactly what append inference needs: superblock and group
//! descriptors, inode records, extent trees (depth-capped), linear directory
//! walks of the root directory, file range mapping, and classification of
//! raw image writes against watched locations. Metadata checksums are
//! tolerated but never verified. Nothing here writes to the image.

use thiserror::Error;

use crate::block::{BlockError, ReadAt};
use crate::util::{all_zero, le_u16, le_u32, range_overlap};

pub const SUPERBLOCK_OFFSET: u64 = 1024;
pub const SUPERBLOCK_LEN: usize = 1024;
pub const EXT4_MAGIC: u16 = 0xEF53;
pub const ROOT_INODE: u64 = 2;
pub const EXTENT_MAGIC: u16 = 0xF30A;
/// Maximum extent tree depth accepted before declaring the tree corrupt.
pub const MAX_EXTENT_DEPTH: u16 = 5;
/// An ee_len above this encodes an unwritten extent.
pub const EXT_INIT_MAX_LEN: u16 = 1 << 15;

// Incompat feature bits.
pub const INCOMPAT_FILETYPE: u32 = 0x0002;
pub const INCOMPAT_RECOVER: u32 = 0x0004;
pub const INCOMPAT_JOURNAL_DEV: u32 = 0x0008;
pub const INCOMPAT_META_BG: u32 = 0x0010;
pub const INCOMPAT_EXTENTS: u32 = 0x0040;
pub const INCOMPAT_64BIT: u32 = 0x0080;
pub const INCOMPAT_INLINE_DATA: u32 = 0x8000;
pub const INCOMPAT_ENCRYPT: u32 = 0x0001_0000;
pub const INCOMPAT_CASEFOLD: u32 = 0x0002_0000;

// Read-only compat feature bits.
pub const RO_COMPAT_BIGALLOC: u32 = 0x0200;
pub const RO_COMPAT_METADATA_CSUM: u32 = 0x0400;

// Inode flags.
pub const FL_IMMUTABLE: u32 = 0x0000_0010;
pub const FL_APPEND: u32 = 0x0000_0020;
pub const FL_EXTENTS: u32 = 0x0008_0000;
pub const FL_INLINE_DATA: u32 = 0x1000_0000;

// Inode field offsets within the record.
pub const INODE_MODE: usize = 0x00;
pub const INODE_SIZE_LO: usize = 0x04;
pub const INODE_LINKS: usize = 0x1A;
pub const INODE_FLAGS: usize = 0x20;
pub const INODE_BLOCK: usize = 0x28;
pub const INODE_SIZE_HI: usize = 0x6C;
pub const INODE_BLOCK_LEN: usize = 60;

pub const S_IFMT: u16 = 0xF000;
pub const S_IFREG: u16 = 0x8000;
pub const S_IFDIR: u16 = 0x4000;

// Group descriptor field offsets.
pub const GD_BLOCK_BITMAP_LO: usize = 0x00;
pub const GD_INODE_BITMAP_LO: usize = 0x04;
pub const GD_INODE_TABLE_LO: usize = 0x08;
pub const GD_FREE_BLOCKS_LO: usize = 0x0C;
pub const GD_FREE_INODES_LO: usize = 0x0E;
pub const GD_USED_DIRS_LO: usize = 0x10;
pub const GD_ITABLE_UNUSED_LO: usize = 0x1C;
pub const GD_BLOCK_BITMAP_HI: usize = 0x20;
pub const GD_INODE_BITMAP_HI: usize = 0x24;
pub const GD_INODE_TABLE_HI: usize = 0x28;
pub const GD_FREE_BLOCKS_HI: usize = 0x2C;
pub const GD_FREE_INODES_HI: usize = 0x2E;

pub const DIRENT_FT_REG: u8 = 1;
pub const DIRENT_FT_DIR: u8 = 2;

#[derive(Debug, Error)]
pub enum Ext4Error {
    #[error("short read while decoding {what}: need {need} bytes, have {have}")]
    InsufficientData { what: &'static str, need: usize, have: usize },
    #[error("bad magic in {what}: expected {expected:#06x}, found {found:#06x}")]
    BadMagic { what: &'static str, expected: u16, found: u16 },
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(&'static str),
    #[error("invalid {field}: {value}")]
    InvalidField { field: &'static str, value: u64 },
    #[error("extent tree deeper than {MAX_EXTENT_DEPTH}")]
    ExtentDepthExceeded,
    #[error("file range maps to a hole at logical block {logical}")]
    MappingGap { logical: u64 },
    #[error("path not found: {0}")]
    NotFound(String),
    #[error("directory walk failed: {0}")]
    DirWalk(String),
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// Parsed superblock, only the fields inference needs. The raw immutable
/// subset is kept for tamper comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superblock {
    pub inodes_count: u32,
    pub blocks_count: u64,
    pub first_data_block: u32,
    pub log_block_size: u32,
    pub blocks_per_group: u32,
    pub inodes_per_group: u32,
    pub mnt_count: u16,
    pub state: u16,
    pub first_ino: u32,
    pub inode_size: u16,
    pub feature_compat: u32,
    pub feature_incompat: u32,
    pub feature_ro_compat: u32,
    pub uuid: [u8; 16],
    pub journal_inum: u32,
    pub desc_size: u16,
    pub free_blocks_count: u64,
    pub free_inodes_count: u32,
}

impl Superblock {
    #[must_use]
    pub fn block_size(&self) -> u64 {
        1024u64 << self.log_block_size
    }

    #[must_use]
    pub fn has_64bit(&self) -> bool {
        self.feature_incompat & INCOMPAT_64BIT != 0
    }

    #[must_use]
    pub fn group_desc_size(&self) -> u64 {
        if self.has_64bit() && self.desc_size >= 64 {
            u64::from(self.desc_size)
        } else {
            32
        }
    }

    #[must_use]
    pub fn groups_count(&self) -> u64 {
        let bpg = u64::from(self.blocks_per_group);
        let data_blocks = self.blocks_count - u64::from(self.first_data_block);
        data_blocks.div_ceil(bpg)
    }

    /// First block of the group descriptor table.
    #[must_use]
    pub fn gdt_start_block(&self) -> u64 {
        u64::from(self.first_data_block) + 1
    }

    #[must_use]
    pub fn has_journal(&self) -> bool {
        self.journal_inum != 0 && self.feature_compat & 0x0004 != 0
    }

    /// Fields that never change on a live filesystem. The RECOVER bit is
    /// masked out of incompat because journaled mounts toggle it.
    #[must_use]
    pub fn immutable_view(&self) -> ImmutableSb {
        ImmutableSb {
            inodes_count: self.inodes_count,
            blocks_count: self.blocks_count,
            first_data_block: self.first_data_block,
            log_block_size: self.log_block_size,
            blocks_per_group: self.blocks_per_group,
            inodes_per_group: self.inodes_per_group,
            first_ino: self.first_ino,
            inode_size: self.inode_size,
            feature_incompat: self.feature_incompat & !INCOMPAT_RECOVER,
            feature_ro_compat: self.feature_ro_compat,
            uuid: self.uuid,
            journal_inum: self.journal_inum,
            desc_size: self.desc_size,
        }
    }
}

/// The pinned immutable superblock subset used for tamper detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImmutableSb {
    pub inodes_count: u32,
    pub blocks_count: u64,
    pub first_data_block: u32,
    pub log_block_size: u32,
    pub blocks_per_group: u32,
    pub inodes_per_group: u32,
    pub first_ino: u32,
    pub inode_size: u16,
    pub feature_incompat: u32,
    pub feature_ro_compat: u32,
    pub uuid: [u8; 16],
    pub journal_inum: u32,
    pub desc_size: u16,
}

/// Decodes the 1024-byte superblock record.
pub fn parse_superblock_bytes(buf: &[u8]) -> Result<Superblock, Ext4Error> {
    if buf.len() < SUPERBLOCK_LEN {
        return Err(Ext4Error::InsufficientData {
            what: "superblock",
            need: SUPERBLOCK_LEN,
            have: buf.len(),
        });
    }
    let magic = le_u16(buf, 0x38);
    if magic != EXT4_MAGIC {
        return Err(Ext4Error::BadMagic { what: "superblock", expected: EXT4_MAGIC, found: magic });
    }
    let log_block_size = le_u32(buf, 0x18);
    if log_block_size > 2 {
        return Err(Ext4Error::InvalidField {
            field: "log_block_size",
            value: u64::from(log_block_size),
        });
    }
    let feature_incompat = le_u32(buf, 0x60);
    let feature_ro_compat = le_u32(buf, 0x64);
    if feature_incompat & INCOMPAT_INLINE_DATA != 0 {
        return Err(Ext4Error::UnsupportedFeature("inline_data"));
    }
    if feature_incompat & INCOMPAT_ENCRYPT != 0 {
        return Err(Ext4Error::UnsupportedFeature("encrypt"));
    }
    if feature_incompat & INCOMPAT_META_BG != 0 {
        return Err(Ext4Error::UnsupportedFeature("meta_bg"));
    }
    if feature_incompat & INCOMPAT_JOURNAL_DEV != 0 {
        return Err(Ext4Error::UnsupportedFeature("journal_dev"));
    }
    if feature_ro_compat & RO_COMPAT_BIGALLOC != 0 {
        return Err(Ext4Error::UnsupportedFeature("bigalloc"));
    }

    let has_64bit = feature_incompat & INCOMPAT_64BIT != 0;
    let blocks_count_lo = u64::from(le_u32(buf, 0x04));
    let blocks_count_hi = if has_64bit { u64::from(le_u32(buf, 0x150)) } else { 0 };
    let free_blocks_lo = u64::from(le_u32(buf, 0x0C));
    let free_blocks_hi = if has_64bit { u64::from(le_u32(buf, 0x158)) } else { 0 };

    let sb = Superblock {
        inodes_count: le_u32(buf, 0x00),
        blocks_count: (blocks_count_hi << 32) | blocks_count_lo,
        first_data_block: le_u32(buf, 0x14),
        log_block_size,
        blocks_per_group: le_u32(buf, 0x20),
        inodes_per_group: le_u32(buf, 0x28),
        mnt_count: le_u16(buf, 0x34),
        state: le_u16(buf, 0x3A),
        first_ino: le_u32(buf, 0x54),
        inode_size: le_u16(buf, 0x58),
        feature_compat: le_u32(buf, 0x5C),
        feature_incompat,
        feature_ro_compat,
        uuid: buf[0x68..0x78].try_into().unwrap(),
        journal_inum: le_u32(buf, 0xE0),
        desc_size: le_u16(buf, 0xFE),
        free_blocks_count: (free_blocks_hi << 32) | free_blocks_lo,
        free_inodes_count: le_u32(buf, 0x10),
    };

    if sb.blocks_per_group == 0 || sb.inodes_per_group == 0 {
        return Err(Ext4Error::InvalidField { field: "blocks_per_group", value: 0 });
    }
    if sb.inode_size < 128 || !sb.inode_size.is_power_of_two() {
        return Err(Ext4Error::InvalidField {
            field: "inode_size",
            value: u64::from(sb.inode_size),
        });
    }
    let expected_first = if sb.block_size() == 1024 { 1 } else { 0 };
    if sb.first_data_block != expected_first {
        return Err(Ext4Error::InvalidField {
            field: "first_data_block",
            value: u64::from(sb.first_data_block),
        });
    }
    Ok(sb)
}

/// Reads and decodes the primary superblock of an image.
pub fn parse_superblock<R: ReadAt + ?Sized>(img: &R) -> Result<Superblock, Ext4Error> {
    let buf = img.read_at(SUPERBLOCK_OFFSET, SUPERBLOCK_LEN)?;
    parse_superblock_bytes(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupDesc {
    pub block_bitmap: u64,
    pub inode_bitmap: u64,
    pub inode_table: u64,
    pub free_blocks_count: u32,
    pub free_inodes_count: u32,
}

/// Byte offset of group `group`'s descriptor within the image.
#[must_use]
pub fn group_desc_offset(sb: &Superblock, group: u64) -> u64 {
    sb.gdt_start_block() * sb.block_size() + group * sb.group_desc_size()
}

pub fn read_group_desc<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    group: u64,
) -> Result<GroupDesc, Ext4Error> {
    if group >= sb.groups_count() {
        return Err(Ext4Error::InvalidField { field: "group", value: group });
    }
    let raw = img.read_at(group_desc_offset(sb, group), sb.group_desc_size() as usize)?;
    parse_group_desc(&raw, sb)
}

pub fn parse_group_desc(raw: &[u8], sb: &Superblock) -> Result<GroupDesc, Ext4Error> {
    if raw.len() < 32 {
        return Err(Ext4Error::InsufficientData {
            what: "group descriptor",
            need: 32,
            have: raw.len(),
        });
    }
    let wide = sb.has_64bit() && raw.len() >= 64;
    let hi = |off: usize| -> u64 {
        if wide {
            u64::from(le_u32(raw, off))
        } else {
            0
        }
    };
    let hi16 = |off: usize| -> u32 {
        if wide {
            u32::from(le_u16(raw, off))
        } else {
            0
        }
    };
    Ok(GroupDesc {
        block_bitmap: (hi(GD_BLOCK_BITMAP_HI) << 32) | u64::from(le_u32(raw, GD_BLOCK_BITMAP_LO)),
        inode_bitmap: (hi(GD_INODE_BITMAP_HI) << 32) | u64::from(le_u32(raw, GD_INODE_BITMAP_LO)),
        inode_table: (hi(GD_INODE_TABLE_HI) << 32) | u64::from(le_u32(raw, GD_INODE_TABLE_LO)),
        free_blocks_count: (hi16(GD_FREE_BLOCKS_HI) << 16)
            | u32::from(le_u16(raw, GD_FREE_BLOCKS_LO)),
        free_inodes_count: (hi16(GD_FREE_INODES_HI) << 16)
            | u32::from(le_u16(raw, GD_FREE_INODES_LO)),
    })
}

/// Decoded inode record. `i_block` is kept raw because the extent tree root
/// lives there and tamper comparison wants the exact bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InodeRecord {
    pub mode: u16,
    pub size: u64,
    pub links_count: u16,
    pub flags: u32,
    pub i_block: [u8; INODE_BLOCK_LEN],
}

impl InodeRecord {
    #[must_use]
    pub fn is_regular(&self) -> bool {
        self.mode & S_IFMT == S_IFREG
    }

    #[must_use]
    pub fn is_dir(&self) -> bool {
        self.mode & S_IFMT == S_IFDIR
    }

    #[must_use]
    pub fn uses_extents(&self) -> bool {
        self.flags & FL_EXTENTS != 0
    }

    #[must_use]
    pub fn append_only(&self) -> bool {
        self.flags & FL_APPEND != 0
    }

    /// True when the record is entirely zero, which is how an inode table
    /// block looks before its write has actually landed.
    #[must_use]
    pub fn is_blank(&self) -> bool {
        self.mode == 0 && self.size == 0 && self.links_count == 0 && self.flags == 0
    }
}

pub fn decode_inode(raw: &[u8]) -> Result<InodeRecord, Ext4Error> {
    if raw.len() < 128 {
        return Err(Ext4Error::InsufficientData { what: "inode", need: 128, have: raw.len() });
    }
    let size_lo = u64::from(le_u32(raw, INODE_SIZE_LO));
    let size_hi = u64::from(le_u32(raw, INODE_SIZE_HI));
    let mode = le_u16(raw, INODE_MODE);
    let size = if mode & S_IFMT == S_IFREG { (size_hi << 32) | size_lo } else { size_lo };
    Ok(InodeRecord {
        mode,
        size,
        links_count: le_u16(raw, INODE_LINKS),
        flags: le_u32(raw, INODE_FLAGS),
        i_block: raw[INODE_BLOCK..INODE_BLOCK + INODE_BLOCK_LEN].try_into().unwrap(),
    })
}

/// Byte offset of inode `ino`'s record within the image.
pub fn inode_location<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    ino: u64,
) -> Result<u64, Ext4Error> {
    if ino == 0 || ino > u64::from(sb.inodes_count) {
        return Err(Ext4Error::InvalidField { field: "inode number", value: ino });
    }
    let group = (ino - 1) / u64::from(sb.inodes_per_group);
    let index = (ino - 1) % u64::from(sb.inodes_per_group);
    let gd = read_group_desc(img, sb, group)?;
    Ok(gd.inode_table * sb.block_size() + index * u64::from(sb.inode_size))
}

pub fn read_inode<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    ino: u64,
) -> Result<InodeRecord, Ext4Error> {
    let off = inode_location(img, sb, ino)?;
    let raw = img.read_at(off, sb.inode_size as usize)?;
    decode_inode(&raw)
}

/// One initialized mapping run from the extent tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub logical_block: u32,
    pub physical_block: u64,
    pub block_count: u32,
    pub unwritten: bool,
}

#[derive(Debug, Clone, Copy)]
struct ExtentHeader {
    entries: u16,
    max: u16,
    depth: u16,
}

fn parse_extent_header(raw: &[u8]) -> Result<ExtentHeader, Ext4Error> {
    if raw.len() < 12 {
        return Err(Ext4Error::InsufficientData {
            what: "extent header",
            need: 12,
            have: raw.len(),
        });
    }
    let magic = le_u16(raw, 0);
    if magic != EXTENT_MAGIC {
        return Err(Ext4Error::BadMagic { what: "extent header", expected: EXTENT_MAGIC, found: magic });
    }
    let hdr = ExtentHeader { entries: le_u16(raw, 2), max: le_u16(raw, 4), depth: le_u16(raw, 6) };
    if hdr.depth > MAX_EXTENT_DEPTH {
        return Err(Ext4Error::ExtentDepthExceeded);
    }
    if hdr.entries > hdr.max {
        return Err(Ext4Error::InvalidField {
            field: "extent entries",
            value: u64::from(hdr.entries),
        });
    }
    let cap = (raw.len() - 12) / 12;
    if usize::from(hdr.max) > cap {
        return Err(Ext4Error::InvalidField { field: "extent max", value: u64::from(hdr.max) });
    }
    Ok(hdr)
}

fn collect_extents<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    node: &[u8],
    depth_budget: u16,
    out: &mut Vec<Extent>,
) -> Result<(), Ext4Error> {
    let hdr = parse_extent_header(node)?;
    if hdr.depth > 0 {
        if depth_budget == 0 {
            return Err(Ext4Error::ExtentDepthExceeded);
        }
        for i in 0..usize::from(hdr.entries) {
            let off = 12 + i * 12;
            let leaf_lo = u64::from(le_u32(node, off + 4));
            let leaf_hi = u64::from(le_u16(node, off + 8));
            let child_block = (leaf_hi << 32) | leaf_lo;
            let child =
                img.read_at(child_block * sb.block_size(), sb.block_size() as usize)?;
            collect_extents(img, sb, &child, depth_budget - 1, out)?;
        }
    } else {
        for i in 0..usize::from(hdr.entries) {
            let off = 12 + i * 12;
            let raw_len = le_u16(node, off + 4);
            let (count, unwritten) = if raw_len > EXT_INIT_MAX_LEN {
                (u32::from(raw_len - EXT_INIT_MAX_LEN), true)
            } else {
                (u32::from(raw_len), false)
            };
            let start_hi = u64::from(le_u16(node, off + 6));
            let start_lo = u64::from(le_u32(node, off + 8));
            out.push(Extent {
                logical_block: le_u32(node, off),
                physical_block: (start_hi << 32) | start_lo,
                block_count: count,
                unwritten,
            });
        }
    }
    Ok(())
}

/// Walks the extent tree rooted in `i_block` and returns leaf extents sorted
/// by logical block.
pub fn resolve_extents<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    inode: &InodeRecord,
) -> Result<Vec<Extent>, Ext4Error> {
    if !inode.uses_extents() {
        if inode.flags & FL_INLINE_DATA != 0 {
            return Err(Ext4Error::UnsupportedFeature("inline_data inode"));
        }
        return Err(Ext4Error::UnsupportedFeature("block-mapped inode"));
    }
    let mut out = Vec::new();
    collect_extents(img, sb, &inode.i_block, MAX_EXTENT_DEPTH, &mut out)?;
    out.sort_by_key(|e| e.logical_block);
    Ok(out)
}

/// A contiguous piece of a file range. `physical` is the image byte offset,
/// or None for a hole / unwritten extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub file_offset: u64,
    pub len: u64,
    pub physical: Option<u64>,
}

/// Maps `[offset, offset+len)` of the file onto image byte ranges.
pub fn map_file_range(
    sb: &Superblock,
    extents: &[Extent],
    offset: u64,
    len: u64,
) -> Vec<Segment> {
    let bs = sb.block_size();
    let mut segments = Vec::new();
    let mut pos = offset;
    let end = offset + len;
    while pos < end {
        let logical_block = pos / bs;
        let within = pos % bs;
        let hit = extents.iter().find(|e| {
            u64::from(e.logical_block) <= logical_block
                && logical_block < u64::from(e.logical_block) + u64::from(e.block_count)
        });
        match hit {
            Some(e) if !e.unwritten => {
                let delta = logical_block - u64::from(e.logical_block);
                let run_end_block = u64::from(e.logical_block) + u64::from(e.block_count);
                let run_len = ((run_end_block * bs).min(end) - pos).max(1);
                segments.push(Segment {
                    file_offset: pos,
                    len: run_len,
                    physical: Some((e.physical_block + delta) * bs + within),
                });
                pos += run_len;
            }
            other => {
                // Hole or unwritten: extend to the next mapped extent edge.
                let next_edge = extents
                    .iter()
                    .map(|e| u64::from(e.logical_block) * bs)
                    .filter(|&s| s > pos)
                    .min()
                    .unwrap_or(end)
                    .min(end);
                let run_len = match other {
                    Some(e) => {
                        let run_end = (u64::from(e.logical_block) + u64::from(e.block_count)) * bs;
                        run_end.min(end) - pos
                    }
                    None => next_edge - pos,
                };
                segments.push(Segment { file_offset: pos, len: run_len.max(1), physical: None });
                pos += run_len.max(1);
            }
        }
    }
    segments
}

/// Reads file bytes through the extent mapping. A hole or unwritten extent
/// inside the range is an error; appends never legitimately read them.
pub fn read_file_range<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    inode: &InodeRecord,
    offset: u64,
    len: u64,
) -> Result<Vec<u8>, Ext4Error> {
    if offset + len > inode.size {
        return Err(Ext4Error::InvalidField { field: "read past i_size", value: offset + len });
    }
    let extents = resolve_extents(img, sb, inode)?;
    let mut out = Vec::with_capacity(len as usize);
    for seg in map_file_range(sb, &extents, offset, len) {
        match seg.physical {
            Some(p) => out.extend_from_slice(&img.read_at(p, seg.len as usize)?),
            None => return Err(Ext4Error::MappingGap { logical: seg.file_offset / sb.block_size() }),
        }
    }
    Ok(out)
}

/// A linear directory entry plus its byte offset inside the directory file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub inode: u32,
    pub rec_len: u16,
    pub file_type: u8,
    pub name: String,
    pub offset_in_dir: u64,
}

/// Linear walk of one directory inode. Tree-indexed interior nodes are not
/// followed; watched files are required to live in linearly readable blocks,
/// which holds for small root directories.
pub fn iterate_dir<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    dir: &InodeRecord,
) -> Result<Vec<DirEntry>, Ext4Error> {
    if !dir.is_dir() {
        return Err(Ext4Error::DirWalk("inode is not a directory".into()));
    }
    let bs = sb.block_size();
    let extents = resolve_extents(img, sb, dir)?;
    let mut entries = Vec::new();
    for seg in map_file_range(sb, &extents, 0, dir.size) {
        let Some(phys) = seg.physical else { continue };
        let data = img.read_at(phys, seg.len as usize)?;
        let mut block_pos = 0u64;
        while block_pos < seg.len {
            let pos = block_pos as usize;
            if seg.len - block_pos < 8 {
                break;
            }
            let inode = le_u32(&data, pos);
            let rec_len = le_u16(&data, pos + 4);
            let name_len = data[pos + 6] as usize;
            let file_type = data[pos + 7];
            if rec_len < 8 || u64::from(rec_len) + block_pos > seg.len || rec_len % 4 != 0 {
                return Err(Ext4Error::DirWalk(format!(
                    "bad rec_len {rec_len} at dir offset {}",
                    seg.file_offset + block_pos
                )));
            }
            if 8 + name_len > usize::from(rec_len) {
                return Err(Ext4Error::DirWalk(format!(
                    "name_len {name_len} overflows rec_len {rec_len}"
                )));
            }
            if inode != 0 {
                let name = String::from_utf8_lossy(&data[pos + 8..pos + 8 + name_len]).into_owned();
                entries.push(DirEntry {
                    inode,
                    rec_len,
                    file_type,
                    name,
                    offset_in_dir: seg.file_offset + block_pos,
                });
            }
            block_pos += u64::from(rec_len);
            // Entries never straddle a block boundary.
            let bpos = seg.file_offset + block_pos;
            if bpos % bs == 0 && block_pos < seg.len {
                continue;
            }
        }
    }
    Ok(entries)
}

/// Resolves a root-level path ("/name") to its inode number.
pub fn lookup_root<R: ReadAt + ?Sized>(
    img: &R,
    sb: &Superblock,
    path: &str,
) -> Result<u64, Ext4Error> {
    let name = path.strip_prefix('/').unwrap_or(path);
    if name.is_empty() || name.contains('/') {
        return Err(Ext4Error::NotFound(format!("{path} (only root-level files are watched)")));
    }
    let root = read_inode(img, sb, ROOT_INODE)?;
    for entry in iterate_dir(img, sb, &root)? {
        if entry.name == name {
            return Ok(u64::from(entry.inode));
        }
    }
    Err(Ext4Error::NotFound(path.to_string()))
}

/// One watched inode's location inside the inode table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchedInode {
    pub inode_no: u64,
    /// Image byte offset of the inode record.
    pub record_offset: u64,
}

/// Immutable geometry derived at init time, used to classify raw writes.
#[derive(Debug, Clone)]
pub struct Ext4Layout {
    pub sb: Superblock,
    pub immutable_sb: ImmutableSb,
    pub groups: Vec<GroupDesc>,
    pub watched: Vec<WatchedInode>,
    /// Image byte ranges covered by the journal file, if any.
    pub journal_ranges: Vec<(u64, u64)>,
}

impl Ext4Layout {
    pub fn load<R: ReadAt + ?Sized>(img: &R) -> Result<Self, Ext4Error> {
        let sb = parse_superblock(img)?;
        let mut groups = Vec::with_capacity(sb.groups_count() as usize);
        for g in 0..sb.groups_count() {
            groups.push(read_group_desc(img, &sb, g)?);
        }
        let immutable_sb = sb.immutable_view();
        Ok(Self { sb, immutable_sb, groups, watched: Vec::new(), journal_ranges: Vec::new() })
    }

    pub fn watch<R: ReadAt + ?Sized>(&mut self, img: &R, path: &str) -> Result<WatchedInode, Ext4Error> {
        let ino = lookup_root(img, &self.sb, path)?;
        let record_offset = inode_location(img, &self.sb, ino)?;
        let w = WatchedInode { inode_no: ino, record_offset };
        self.watched.push(w);
        Ok(w)
    }

    #[must_use]
    pub fn block_size(&self) -> u64 {
        self.sb.block_size()
    }

    /// Which group's block bitmap a byte range touches, if any.
    #[must_use]
    pub fn block_bitmap_group(&self, offset: u64, len: u64) -> Option<u64> {
        let bs = self.block_size();
        self.groups.iter().enumerate().find_map(|(g, gd)| {
            let start = gd.block_bitmap * bs;
            range_overlap((start, start + bs), (offset, offset + len)).map(|_| g as u64)
        })
    }

    #[must_use]
    pub fn in_journal(&self, offset: u64, len: u64) -> bool {
        self.journal_ranges
            .iter()
            .any(|&(s, e)| range_overlap((s, e), (offset, offset + len)).is_some())
    }
}

/// What a raw image write landed on, relative to the watched layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Classification {
    /// The write covered a watched inode record. `record` is the decoded
    /// post-write state; None when the bytes do not currently decode.
    WatchedInode { inode_no: u64, record: Option<InodeRecord>, blank: bool },
    /// The write touched the primary superblock. `sb` decodes the post-write
    /// bytes when possible.
    SuperblockRegion { sb: Option<Superblock> },
    /// The write landed inside the journal file.
    JournalRegion,
    /// Anything else: file data, bitmaps, unrelated metadata.
    DataOrOther,
}

/// All classifications a write matches, in detection priority order. A write
/// that matches nothing yields a single `DataOrOther`.
pub fn classify_write_all<R: ReadAt + ?Sized>(
    layout: &Ext4Layout,
    img: &R,
    offset: u64,
    data: &[u8],
) -> Vec<Classification> {
    let len = data.len() as u64;
    let mut out = Vec::new();
    if layout.in_journal(offset, len) {
        out.push(Classification::JournalRegion);
    }
    for w in &layout.watched {
        let rec_range = (w.record_offset, w.record_offset + u64::from(layout.sb.inode_size));
        if range_overlap(rec_range, (offset, offset + len)).is_some() {
            let raw = if w.record_offset >= offset
                && rec_range.1 <= offset + len
            {
                Some(data[(w.record_offset - offset) as usize..][..layout.sb.inode_size as usize].to_vec())
            } else {
                img.read_at(w.record_offset, layout.sb.inode_size as usize).ok()
            };
            let (record, blank) = match raw {
                Some(bytes) => {
                    let blank = all_zero(&bytes);
                    (decode_inode(&bytes).ok(), blank)
                }
                None => (None, false),
            };
            out.push(Classification::WatchedInode { inode_no: w.inode_no, record, blank });
        }
    }
    let sb_range = (SUPERBLOCK_OFFSET, SUPERBLOCK_OFFSET + SUPERBLOCK_LEN as u64);
    if range_overlap(sb_range, (offset, offset + len)).is_some() {
        let raw = if offset <= sb_range.0 && sb_range.1 <= offset + len {
            Some(data[(sb_range.0 - offset) as usize..][..SUPERBLOCK_LEN].to_vec())
        } else {
            img.read_at(SUPERBLOCK_OFFSET, SUPERBLOCK_LEN).ok()
        };
        out.push(Classification::SuperblockRegion { sb: raw.and_then(|b| parse_superblock_bytes(&b).ok()) });
    }
    if out.is_empty() {
        out.push(Classification::DataOrOther);
    }
    out
}

/// Highest-priority classification for a write.
pub fn classify_write<R: ReadAt + ?Sized>(
    layout: &Ext4Layout,
    img: &R,
    offset: u64,
    data: &[u8],
) -> Classification {
    classify_write_all(layout, img, offset, data).remove(0)
}

/// Counts zero bits in a block bitmap, i.e. free blocks in the group. Tail
/// padding past the last real block is written as ones by the formatter, so
/// plain popcount is exact.
#[must_use]
pub fn bitmap_free_count(bitmap: &[u8]) -> u64 {
    bitmap.iter().map(|b| u64::from(b.count_zeros())).sum()
}
