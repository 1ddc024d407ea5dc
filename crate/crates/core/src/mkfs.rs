//! In-memory image construction: an exFAT formatter and empty-file writers
//! for both filesystems.
//!
//! Everything here mutates a plain byte buffer so callers can build fixture
//! images without loop devices or external tools. ext4 formatting itself is
//! left to mke2fs; only the post-format step of claiming an inode and a root
//! directory entry is done here.

use thiserror::Error;

use crate::exfat::{
    self, boot_checksum, entry_set_checksum, name_hash, BootSector, ExfatError, DIRENT_SIZE,
    ENTRY_BITMAP, ENTRY_FILE, ENTRY_LABEL, ENTRY_NAME, ENTRY_STREAM, ENTRY_UPCASE, FAT_EOC,
    FIRST_CLUSTER, FLAG_ALLOCATION_POSSIBLE,
};
use crate::ext4::{
    self, Ext4Error, DIRENT_FT_REG, EXTENT_MAGIC, FL_APPEND, FL_EXTENTS, INODE_BLOCK, INODE_FLAGS,
    INODE_LINKS, INODE_MODE, S_IFREG, SUPERBLOCK_OFFSET,
};
use crate::util::{le_u16, le_u32, put_le_u16, put_le_u32, put_le_u64};

const EXFAT_MEDIA_DESCRIPTOR: u32 = 0xFFFF_FFF8;
const FIXED_EPOCH: u32 = 1_600_000_000;

#[derive(Debug, Error)]
pub enum MkfsError {
    #[error("image geometry: {0}")]
    Geometry(String),
    #[error("no space left in {0}")]
    Full(&'static str),
    #[error("name {0:?} is not usable")]
    BadName(String),
    #[error(transparent)]
    Exfat(#[from] ExfatError),
    #[error(transparent)]
    Ext4(#[from] Ext4Error),
}

#[derive(Debug, Clone)]
pub struct ExfatParams {
    pub bytes_per_sector_shift: u8,
    pub sectors_per_cluster_shift: u8,
    pub volume_serial: u32,
    pub label: Option<String>,
}

impl Default for ExfatParams {
    fn default() -> Self {
        Self {
            bytes_per_sector_shift: 9,
            sectors_per_cluster_shift: 3,
            volume_serial: 0x1234_5678,
            label: None,
        }
    }
}

/// Identity upcase table covering the first 128 code points, with the ASCII
/// lowercase range folded. Enough for the names this crate ever generates.
fn upcase_table() -> Vec<u8> {
    let mut table = Vec::with_capacity(256);
    for cp in 0u16..128 {
        let up = if (0x61..=0x7A).contains(&cp) { cp - 0x20 } else { cp };
        table.extend_from_slice(&up.to_le_bytes());
    }
    table
}

fn table_checksum(data: &[u8]) -> u32 {
    let mut checksum: u32 = 0;
    for &b in data {
        checksum = checksum.rotate_right(1).wrapping_add(u32::from(b));
    }
    checksum
}

struct ExfatGeometry {
    sector: usize,
    cluster: usize,
    total_sectors: u64,
    fat_offset_sectors: u64,
    fat_length_sectors: u64,
    heap_offset_sectors: u64,
    cluster_count: u64,
    bitmap_bytes: u64,
    bitmap_first: u32,
    upcase_first: u32,
    root_first: u32,
    used_clusters: u32,
}

fn exfat_geometry(total_len: u64, params: &ExfatParams) -> Result<ExfatGeometry, MkfsError> {
    let bpss = params.bytes_per_sector_shift;
    let spcs = params.sectors_per_cluster_shift;
    if !(9..=12).contains(&bpss) || spcs > 25 - bpss {
        return Err(MkfsError::Geometry(format!("shifts {bpss}/{spcs} out of range")));
    }
    let sector = 1usize << bpss;
    let cluster = sector << spcs;
    if total_len % sector as u64 != 0 {
        return Err(MkfsError::Geometry(format!(
            "image length {total_len} is not sector aligned"
        )));
    }
    let total_sectors = total_len / sector as u64;
    let fat_offset_sectors = 24u64;

    // FAT length and cluster count depend on each other; two rounds settle.
    let mut cluster_count = (total_sectors.saturating_sub(fat_offset_sectors)) >> spcs;
    let mut fat_length_sectors = 0u64;
    for _ in 0..2 {
        fat_length_sectors = ((cluster_count + 2) * 4).div_ceil(sector as u64);
        let heap_offset = fat_offset_sectors + fat_length_sectors;
        cluster_count = total_sectors.saturating_sub(heap_offset) >> spcs;
    }
    if cluster_count < 8 {
        return Err(MkfsError::Geometry(format!(
            "volume too small: {cluster_count} clusters"
        )));
    }
    if cluster_count > u64::from(u32::MAX - FIRST_CLUSTER) {
        return Err(MkfsError::Geometry("volume too large".into()));
    }
    let heap_offset_sectors = fat_offset_sectors + fat_length_sectors;

    let bitmap_bytes = cluster_count.div_ceil(8);
    let bitmap_clusters = bitmap_bytes.div_ceil(cluster as u64).max(1) as u32;
    let upcase = upcase_table();
    let upcase_clusters = (upcase.len() as u64).div_ceil(cluster as u64).max(1) as u32;
    let bitmap_first = FIRST_CLUSTER;
    let upcase_first = bitmap_first + bitmap_clusters;
    let root_first = upcase_first + upcase_clusters;
    let used_clusters = bitmap_clusters + upcase_clusters + 1;
    if u64::from(used_clusters) + 2 > cluster_count {
        return Err(MkfsError::Geometry("volume too small for system areas".into()));
    }
    Ok(ExfatGeometry {
        sector,
        cluster,
        total_sectors,
        fat_offset_sectors,
        fat_length_sectors,
        heap_offset_sectors,
        cluster_count,
        bitmap_bytes,
        bitmap_first,
        upcase_first,
        root_first,
        used_clusters,
    })
}

/// Bytes from offset zero that formatting actually touches: boot regions,
/// FAT, and the system clusters at the head of the heap. Everything past
/// this is left zero, so a sparse file needs only this much backed data.
pub fn exfat_metadata_len(total_len: u64, params: &ExfatParams) -> Result<u64, MkfsError> {
    let g = exfat_geometry(total_len, params)?;
    Ok(g.heap_offset_sectors * g.sector as u64
        + u64::from(g.used_clusters) * g.cluster as u64)
}

/// Formats the buffer as an exFAT volume: two checksummed boot regions, one
/// FAT, allocation bitmap, a minimal upcase table, and an empty root
/// directory. Returns the parsed boot sector.
pub fn format_exfat(img: &mut [u8], params: &ExfatParams) -> Result<BootSector, MkfsError> {
    let total = img.len() as u64;
    format_exfat_prefix(img, total, params)
}

/// Same as [`format_exfat`], but the volume size is `total_len` while the
/// buffer covers only the leading bytes. `prefix` must reach at least
/// [`exfat_metadata_len`] and any file content past it must already be zero;
/// the caller writes the buffer back over a zero-filled file of `total_len`.
pub fn format_exfat_prefix(
    prefix: &mut [u8],
    total_len: u64,
    params: &ExfatParams,
) -> Result<BootSector, MkfsError> {
    let g = exfat_geometry(total_len, params)?;
    let (sector, cluster) = (g.sector, g.cluster);
    let (total_sectors, fat_offset_sectors) = (g.total_sectors, g.fat_offset_sectors);
    let (fat_length_sectors, heap_offset_sectors) = (g.fat_length_sectors, g.heap_offset_sectors);
    let cluster_count = g.cluster_count;
    let bitmap_bytes = g.bitmap_bytes;
    let (bitmap_first, upcase_first, root_first) = (g.bitmap_first, g.upcase_first, g.root_first);
    let used_clusters = g.used_clusters;
    let bitmap_clusters = upcase_first - bitmap_first;
    let upcase_clusters = root_first - upcase_first;
    let upcase = upcase_table();

    let (bpss, spcs) = (params.bytes_per_sector_shift, params.sectors_per_cluster_shift);
    let need = heap_offset_sectors * sector as u64 + u64::from(used_clusters) * cluster as u64;
    if (prefix.len() as u64) < need || prefix.len() as u64 > total_len {
        return Err(MkfsError::Geometry(format!(
            "prefix of {} bytes does not cover the {need} metadata bytes",
            prefix.len()
        )));
    }
    let img = prefix;

    img.fill(0);

    // Boot sector.
    {
        let bs = &mut img[..sector];
        bs[0] = 0xEB;
        bs[1] = 0x76;
        bs[2] = 0x90;
        bs[3..11].copy_from_slice(b"EXFAT   ");
        put_le_u64(bs, 72, total_sectors);
        put_le_u32(bs, 80, fat_offset_sectors as u32);
        put_le_u32(bs, 84, fat_length_sectors as u32);
        put_le_u32(bs, 88, heap_offset_sectors as u32);
        put_le_u32(bs, 92, cluster_count as u32);
        put_le_u32(bs, 96, root_first);
        put_le_u32(bs, 100, params.volume_serial);
        put_le_u16(bs, 104, 0x0100);
        put_le_u16(bs, 106, 0);
        bs[108] = bpss;
        bs[109] = spcs;
        bs[110] = 1;
        bs[111] = 0x80;
        bs[112] = ((u64::from(used_clusters) * 100) / cluster_count) as u8;
        put_le_u16(bs, sector - 2, 0xAA55);
    }
    // Extended boot sectors carry only the trailing signature.
    for s in 1..=8usize {
        put_le_u16(img, (s + 1) * sector - 2, 0xAA55);
    }
    // Sectors 9 (OEM) and 10 (reserved) stay zero. Sector 11 repeats the
    // region checksum in every four bytes.
    let checksum = boot_checksum(&img[..11 * sector]);
    for i in (0..sector).step_by(4) {
        put_le_u32(img, 11 * sector + i, checksum);
    }
    // Backup region is a straight copy of sectors 0 through 11.
    img.copy_within(0..12 * sector, 12 * sector);

    // FAT.
    let fat_base = (fat_offset_sectors as usize) * sector;
    put_le_u32(img, fat_base, EXFAT_MEDIA_DESCRIPTOR);
    put_le_u32(img, fat_base + 4, FAT_EOC);
    let mut chain_fill = |first: u32, count: u32| {
        for i in 0..count {
            let c = first + i;
            let next = if i + 1 == count { FAT_EOC } else { c + 1 };
            put_le_u32(img, fat_base + c as usize * 4, next);
        }
    };
    chain_fill(bitmap_first, bitmap_clusters);
    chain_fill(upcase_first, upcase_clusters);
    chain_fill(root_first, 1);

    let heap_base = (heap_offset_sectors as usize) * sector;
    let cluster_base =
        |c: u32| heap_base + (c - FIRST_CLUSTER) as usize * cluster;

    // Allocation bitmap: system clusters marked used.
    for c in 0..used_clusters {
        let byte = cluster_base(bitmap_first) + (c / 8) as usize;
        img[byte] |= 1 << (c % 8);
    }

    // Upcase table.
    img[cluster_base(upcase_first)..cluster_base(upcase_first) + upcase.len()]
        .copy_from_slice(&upcase);

    // Root directory: optional label, bitmap, upcase.
    let mut pos = cluster_base(root_first);
    if let Some(label) = &params.label {
        let units: Vec<u16> = label.encode_utf16().collect();
        if units.len() > 11 {
            return Err(MkfsError::BadName(label.clone()));
        }
        img[pos] = ENTRY_LABEL;
        img[pos + 1] = units.len() as u8;
        for (i, u) in units.iter().enumerate() {
            put_le_u16(img, pos + 2 + 2 * i, *u);
        }
        pos += DIRENT_SIZE;
    }
    img[pos] = ENTRY_BITMAP;
    put_le_u32(img, pos + 20, bitmap_first);
    put_le_u64(img, pos + 24, bitmap_bytes);
    pos += DIRENT_SIZE;
    img[pos] = ENTRY_UPCASE;
    put_le_u32(img, pos + 4, table_checksum(&upcase));
    put_le_u32(img, pos + 20, upcase_first);
    put_le_u64(img, pos + 24, upcase.len() as u64);

    let data: &[u8] = img;
    let sb = exfat::parse_boot_sector(&data[..sector])?;
    exfat::verify_boot_regions(data, &sb)?;
    Ok(sb)
}

fn utf16_name(name: &str) -> Result<Vec<u16>, MkfsError> {
    let units: Vec<u16> = name.encode_utf16().collect();
    if units.is_empty() || units.len() > 255 {
        return Err(MkfsError::BadName(name.to_string()));
    }
    if name.contains(['/', '\\', ':', '*', '?', '"', '<', '>', '|']) {
        return Err(MkfsError::BadName(name.to_string()));
    }
    Ok(units)
}

fn upcased(units: &[u16]) -> Vec<u16> {
    units
        .iter()
        .map(|&u| if (0x61..=0x7A).contains(&u) { u - 0x20 } else { u })
        .collect()
}

/// Appends an empty file entry set to the exFAT root directory.
pub fn exfat_add_empty_file(img: &mut [u8], name: &str) -> Result<(), MkfsError> {
    let data: &[u8] = img;
    if data.len() < 4096 {
        return Err(MkfsError::Geometry("image too small for exFAT".into()));
    }
    let sb = exfat::parse_boot_sector(&data[..4096])?;
    if exfat::lookup_root(data, &sb, name).is_ok() {
        return Err(MkfsError::BadName(format!("{name} already exists")));
    }
    let units = utf16_name(name)?;
    let name_entries = units.len().div_ceil(15);
    let set_len = (2 + name_entries) * DIRENT_SIZE;

    // Find the end-of-directory position within the root chain.
    let chain = exfat::cluster_chain(data, &sb, sb.first_cluster_of_root, false, u64::MAX)?;
    let cluster = sb.cluster_size() as usize;
    let mut slot = None;
    'outer: for &c in &chain {
        let base = sb.cluster_byte_offset(c)? as usize;
        let mut pos = 0;
        while pos + DIRENT_SIZE <= cluster {
            let etype = data[base + pos];
            if etype == 0 {
                if pos + set_len <= cluster {
                    slot = Some(base + pos);
                }
                break 'outer;
            }
            let step = if etype == ENTRY_FILE {
                (usize::from(data[base + pos + 1]) + 1) * DIRENT_SIZE
            } else {
                DIRENT_SIZE
            };
            pos += step;
        }
    }
    let Some(at) = slot else {
        return Err(MkfsError::Full("root directory"));
    };

    let mut set = vec![0u8; set_len];
    set[0] = ENTRY_FILE;
    set[1] = (1 + name_entries) as u8;
    put_le_u16(&mut set, 4, 0x0020);
    set[DIRENT_SIZE] = ENTRY_STREAM;
    set[DIRENT_SIZE + 1] = FLAG_ALLOCATION_POSSIBLE;
    set[DIRENT_SIZE + 3] = units.len() as u8;
    put_le_u16(&mut set, DIRENT_SIZE + 4, name_hash(&upcased(&units)));
    for (i, chunk) in units.chunks(15).enumerate() {
        let base = (2 + i) * DIRENT_SIZE;
        set[base] = ENTRY_NAME;
        for (j, u) in chunk.iter().enumerate() {
            put_le_u16(&mut set, base + 2 + 2 * j, *u);
        }
    }
    let cs = entry_set_checksum(&set);
    put_le_u16(&mut set, 2, cs);
    img[at..at + set_len].copy_from_slice(&set);
    Ok(())
}

fn find_zero_bit(bitmap: &[u8], limit: usize) -> Option<usize> {
    for (byte_idx, &b) in bitmap.iter().enumerate() {
        if b == 0xFF {
            continue;
        }
        for bit in 0..8 {
            let idx = byte_idx * 8 + bit;
            if idx >= limit {
                return None;
            }
            if b & (1 << bit) == 0 {
                return Some(idx);
            }
        }
    }
    None
}

fn align4(n: usize) -> usize {
    (n + 3) & !3
}

/// Claims a free inode in a freshly formatted ext4 image and links an empty
/// regular file named `name` into the root directory. The inode carries the
/// extents and append-only flags with an empty extent root. Returns the
/// inode number.
pub fn ext4_add_empty_file(img: &mut [u8], name: &str) -> Result<u64, MkfsError> {
    if name.is_empty() || name.len() > 255 || name.contains(['/', '\0']) {
        return Err(MkfsError::BadName(name.to_string()));
    }
    let data: &[u8] = img;
    let sb = ext4::parse_superblock(data)?;
    let bs = sb.block_size() as usize;

    // Pick the first free inode at or above first_ino.
    let mut claimed = None;
    'groups: for g in 0..sb.groups_count() {
        let gd = ext4::read_group_desc(data, &sb, g)?;
        let bitmap_off = gd.inode_bitmap as usize * bs;
        let per_group = sb.inodes_per_group as usize;
        let bitmap = &data[bitmap_off..bitmap_off + per_group.div_ceil(8)];
        let mut start_bit = 0;
        while let Some(bit) = find_zero_bit(&bitmap[start_bit / 8..], per_group - start_bit) {
            let bit = bit + (start_bit / 8) * 8;
            let ino = g * u64::from(sb.inodes_per_group) + bit as u64 + 1;
            if ino >= u64::from(sb.first_ino) {
                claimed = Some((g, bit, ino));
                break 'groups;
            }
            start_bit = (bit / 8 + 1) * 8;
        }
    }
    let Some((group, bit, ino)) = claimed else {
        return Err(MkfsError::Full("inode table"));
    };

    let gd = ext4::read_group_desc(data, &sb, group)?;
    let inode_off = ext4::inode_location(data, &sb, ino)? as usize;
    let inode_size = sb.inode_size as usize;

    // Root directory geometry, read before any mutation below.
    let root = ext4::read_inode(data, &sb, ext4::ROOT_INODE)?;
    let extents = ext4::resolve_extents(data, &sb, &root)?;
    let Some(first) = extents.first() else {
        return Err(MkfsError::Ext4(Ext4Error::DirWalk("root has no blocks".into())));
    };
    let dir_off = first.physical_block as usize * bs;

    // Inode bitmap bit.
    let bitmap_off = gd.inode_bitmap as usize * bs;
    img[bitmap_off + bit / 8] |= 1 << (bit % 8);

    // Free inode counters in the descriptor and superblock.
    let gd_off = ext4::group_desc_offset(&sb, group) as usize;
    let gd_free = le_u16(img, gd_off + ext4::GD_FREE_INODES_LO);
    put_le_u16(img, gd_off + ext4::GD_FREE_INODES_LO, gd_free - 1);
    let sb_base = SUPERBLOCK_OFFSET as usize;
    let sb_free = le_u32(img, sb_base + 0x10);
    put_le_u32(img, sb_base + 0x10, sb_free - 1);

    // The inode record itself.
    let rec = &mut img[inode_off..inode_off + inode_size];
    rec.fill(0);
    put_le_u16(rec, INODE_MODE, S_IFREG | 0o644);
    put_le_u32(rec, 0x08, FIXED_EPOCH);
    put_le_u32(rec, 0x0C, FIXED_EPOCH);
    put_le_u32(rec, 0x10, FIXED_EPOCH);
    put_le_u16(rec, INODE_LINKS, 1);
    put_le_u32(rec, INODE_FLAGS, FL_EXTENTS | FL_APPEND);
    put_le_u16(rec, INODE_BLOCK, EXTENT_MAGIC);
    put_le_u16(rec, INODE_BLOCK + 4, 4);
    if inode_size > 128 {
        put_le_u16(rec, 0x80, 32);
    }

    // Root directory entry. The root of a fresh volume is a single block of
    // linear dirents.
    let need = align4(8 + name.len());
    let mut pos = 0usize;
    let mut placed = false;
    while pos < bs {
        let e_off = dir_off + pos;
        let rec_len = le_u16(img, e_off + 4) as usize;
        if rec_len < 8 || pos + rec_len > bs {
            return Err(MkfsError::Ext4(Ext4Error::DirWalk(format!(
                "bad rec_len {rec_len} at {pos}"
            ))));
        }
        let e_ino = le_u32(img, e_off);
        let used = if e_ino == 0 { 0 } else { align4(8 + img[e_off + 6] as usize) };
        if rec_len - used >= need {
            let new_off = e_off + used;
            let new_rec_len = rec_len - used;
            if used > 0 {
                put_le_u16(img, e_off + 4, used as u16);
            }
            put_le_u32(img, new_off, ino as u32);
            put_le_u16(img, new_off + 4, new_rec_len as u16);
            img[new_off + 6] = name.len() as u8;
            img[new_off + 7] = DIRENT_FT_REG;
            img[new_off + 8..new_off + 8 + name.len()].copy_from_slice(name.as_bytes());
            placed = true;
            break;
        }
        pos += rec_len;
    }
    if !placed {
        return Err(MkfsError::Full("root directory block"));
    }
    Ok(ino)
}
