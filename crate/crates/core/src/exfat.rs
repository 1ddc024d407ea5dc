//! exFAT on-disk structures: boot region, FAT, allocation bitmap, and
//! directory entry sets.
//!
//! Only the pieces the write-stream observer needs are decoded. Named file
//! lookup is restricted to the root directory and ASCII names, matching the
//! log naming scheme this engine watches. All multi-byte fields are
//! little-endian.

use thiserror::Error;

use crate::block::ReadAt;
use crate::util::{le_u16, le_u32, le_u64};

pub const ENTRY_BITMAP: u8 = 0x81;
pub const ENTRY_UPCASE: u8 = 0x82;
pub const ENTRY_LABEL: u8 = 0x83;
pub const ENTRY_FILE: u8 = 0x85;
pub const ENTRY_STREAM: u8 = 0xC0;
pub const ENTRY_NAME: u8 = 0xC1;

pub const FLAG_ALLOCATION_POSSIBLE: u8 = 0x01;
pub const FLAG_NO_FAT_CHAIN: u8 = 0x02;

pub const FAT_FREE: u32 = 0;
pub const FAT_BAD: u32 = 0xFFFF_FFF7;
pub const FAT_EOC: u32 = 0xFFFF_FFFF;

/// First data cluster index; FAT entries 0 and 1 are reserved.
pub const FIRST_CLUSTER: u32 = 2;

pub const DIRENT_SIZE: usize = 32;

/// Sectors in one boot region (main at sector 0, backup at sector 12).
pub const BOOT_REGION_SECTORS: u64 = 12;

#[derive(Debug, Error)]
pub enum ExfatError {
    #[error("boot sector: {0}")]
    BadBootSector(String),
    #[error("boot region checksum mismatch in sector {sector}")]
    BootChecksum { sector: u64 },
    #[error("directory entry set at {offset:#x}: {reason}")]
    BadEntrySet { offset: u64, reason: String },
    #[error("FAT chain from cluster {0} is cyclic or overlong")]
    ChainLoop(u32),
    #[error("cluster {0} out of range")]
    BadCluster(u32),
    #[error("file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Block(#[from] crate::block::BlockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootSector {
    pub volume_length: u64,
    pub fat_offset: u32,
    pub fat_length: u32,
    pub cluster_heap_offset: u32,
    pub cluster_count: u32,
    pub first_cluster_of_root: u32,
    pub volume_serial: u32,
    pub volume_flags: u16,
    pub bytes_per_sector_shift: u8,
    pub sectors_per_cluster_shift: u8,
    pub number_of_fats: u8,
    pub percent_in_use: u8,
}

impl BootSector {
    #[must_use]
    pub fn bytes_per_sector(&self) -> u64 {
        1u64 << self.bytes_per_sector_shift
    }

    #[must_use]
    pub fn cluster_size(&self) -> u64 {
        self.bytes_per_sector() << self.sectors_per_cluster_shift
    }

    #[must_use]
    pub fn fat_byte_offset(&self) -> u64 {
        u64::from(self.fat_offset) * self.bytes_per_sector()
    }

    #[must_use]
    pub fn fat_byte_len(&self) -> u64 {
        u64::from(self.fat_length) * self.bytes_per_sector()
    }

    #[must_use]
    pub fn heap_byte_offset(&self) -> u64 {
        u64::from(self.cluster_heap_offset) * self.bytes_per_sector()
    }

    /// Image byte offset of a data cluster.
    pub fn cluster_byte_offset(&self, cluster: u32) -> Result<u64, ExfatError> {
        if cluster < FIRST_CLUSTER || cluster >= FIRST_CLUSTER + self.cluster_count {
            return Err(ExfatError::BadCluster(cluster));
        }
        Ok(self.heap_byte_offset() + u64::from(cluster - FIRST_CLUSTER) * self.cluster_size())
    }

    /// Byte span of both boot regions (main + backup), which hold no
    /// mutable state besides the excluded flag fields.
    #[must_use]
    pub fn boot_regions_len(&self) -> u64 {
        2 * BOOT_REGION_SECTORS * self.bytes_per_sector()
    }
}

pub fn parse_boot_sector(bytes: &[u8]) -> Result<BootSector, ExfatError> {
    if bytes.len() < 512 {
        return Err(ExfatError::BadBootSector(format!("short sector: {} bytes", bytes.len())));
    }
    if &bytes[3..11] != b"EXFAT   " {
        return Err(ExfatError::BadBootSector("missing EXFAT filesystem name".into()));
    }
    if bytes[11..64].iter().any(|&b| b != 0) {
        return Err(ExfatError::BadBootSector("MustBeZero region is not zero".into()));
    }
    let bpss = bytes[108];
    if !(9..=12).contains(&bpss) {
        return Err(ExfatError::BadBootSector(format!("bytes_per_sector_shift {bpss}")));
    }
    let spcs = bytes[109];
    if spcs > 25 - bpss {
        return Err(ExfatError::BadBootSector(format!("sectors_per_cluster_shift {spcs}")));
    }
    let sector = 1usize << bpss;
    if bytes.len() >= sector && le_u16(bytes, sector - 2) != 0xAA55 {
        return Err(ExfatError::BadBootSector("missing boot signature".into()));
    }
    let sb = BootSector {
        volume_length: le_u64(bytes, 72),
        fat_offset: le_u32(bytes, 80),
        fat_length: le_u32(bytes, 84),
        cluster_heap_offset: le_u32(bytes, 88),
        cluster_count: le_u32(bytes, 92),
        first_cluster_of_root: le_u32(bytes, 96),
        volume_serial: le_u32(bytes, 100),
        volume_flags: le_u16(bytes, 106),
        bytes_per_sector_shift: bpss,
        sectors_per_cluster_shift: spcs,
        number_of_fats: bytes[110],
        percent_in_use: bytes[112],
    };
    if sb.cluster_count == 0 {
        return Err(ExfatError::BadBootSector("zero cluster count".into()));
    }
    if sb.first_cluster_of_root < FIRST_CLUSTER
        || sb.first_cluster_of_root >= FIRST_CLUSTER + sb.cluster_count
    {
        return Err(ExfatError::BadBootSector(format!(
            "root cluster {} out of range",
            sb.first_cluster_of_root
        )));
    }
    if sb.number_of_fats == 0 || sb.number_of_fats > 2 {
        return Err(ExfatError::BadBootSector(format!("{} FATs", sb.number_of_fats)));
    }
    Ok(sb)
}

/// Boot region checksum: rotate-right-and-add over the first eleven sectors,
/// skipping VolumeFlags (106, 107) and PercentInUse (112) of sector 0.
#[must_use]
pub fn boot_checksum(sectors: &[u8]) -> u32 {
    let mut checksum: u32 = 0;
    for (i, &b) in sectors.iter().enumerate() {
        if i == 106 || i == 107 || i == 112 {
            continue;
        }
        checksum = checksum.rotate_right(1).wrapping_add(u32::from(b));
    }
    checksum
}

/// Directory entry set checksum: same shape over u16, skipping the
/// SetChecksum field itself (bytes 2 and 3 of the first entry).
#[must_use]
pub fn entry_set_checksum(entries: &[u8]) -> u16 {
    let mut checksum: u16 = 0;
    for (i, &b) in entries.iter().enumerate() {
        if i == 2 || i == 3 {
            continue;
        }
        checksum = checksum.rotate_right(1).wrapping_add(u16::from(b));
    }
    checksum
}

/// NameHash over the up-cased UTF-16LE file name. Only ASCII up-casing is
/// applied, which covers every name this engine creates or watches.
#[must_use]
pub fn name_hash(name_utf16: &[u16]) -> u16 {
    let mut hash: u16 = 0;
    for &unit in name_utf16 {
        let up = match unit {
            0x61..=0x7A => unit - 0x20,
            other => other,
        };
        for b in up.to_le_bytes() {
            hash = hash.rotate_right(1).wrapping_add(u16::from(b));
        }
    }
    hash
}

/// Verifies both boot regions: every u32 of each checksum sector (11 and 23)
/// must equal the checksum of its region's first eleven sectors.
pub fn verify_boot_regions<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
) -> Result<(), ExfatError> {
    let ss = sb.bytes_per_sector();
    for region in 0..2u64 {
        let base = region * BOOT_REGION_SECTORS * ss;
        let body = img.read_at(base, (11 * ss) as usize)?;
        let expect = boot_checksum(&body);
        let csum_sector = img.read_at(base + 11 * ss, ss as usize)?;
        for chunk in csum_sector.chunks_exact(4) {
            if le_u32(chunk, 0) != expect {
                return Err(ExfatError::BootChecksum {
                    sector: region * BOOT_REGION_SECTORS + 11,
                });
            }
        }
    }
    Ok(())
}

pub fn read_fat_entry<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
    cluster: u32,
) -> Result<u32, ExfatError> {
    if u64::from(cluster) * 4 + 4 > sb.fat_byte_len() {
        return Err(ExfatError::BadCluster(cluster));
    }
    let raw = img.read_at(sb.fat_byte_offset() + u64::from(cluster) * 4, 4)?;
    Ok(le_u32(&raw, 0))
}

/// Resolves a file's cluster list. NoFatChain files occupy consecutive
/// clusters sized by `data_length`; chained files follow the FAT until the
/// end-of-chain marker, bounded against cycles.
pub fn cluster_chain<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
    first_cluster: u32,
    no_fat_chain: bool,
    data_length: u64,
) -> Result<Vec<u32>, ExfatError> {
    if first_cluster == 0 || data_length == 0 {
        return Ok(Vec::new());
    }
    let cluster_size = sb.cluster_size();
    let need = data_length.div_ceil(cluster_size);
    if no_fat_chain {
        let mut chain = Vec::with_capacity(need as usize);
        for i in 0..need {
            let c = first_cluster + i as u32;
            if c >= FIRST_CLUSTER + sb.cluster_count {
                return Err(ExfatError::BadCluster(c));
            }
            chain.push(c);
        }
        return Ok(chain);
    }
    let mut chain = Vec::new();
    let mut c = first_cluster;
    let limit = sb.cluster_count as usize + 2;
    loop {
        if c < FIRST_CLUSTER || c >= FIRST_CLUSTER + sb.cluster_count {
            return Err(ExfatError::BadCluster(c));
        }
        chain.push(c);
        if chain.len() > limit {
            return Err(ExfatError::ChainLoop(first_cluster));
        }
        let next = read_fat_entry(img, sb, c)?;
        if next == FAT_EOC {
            return Ok(chain);
        }
        if next == FAT_FREE || next == FAT_BAD {
            return Err(ExfatError::BadCluster(next));
        }
        c = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamExt {
    pub flags: u8,
    pub name_length: u8,
    pub name_hash: u16,
    pub valid_data_length: u64,
    pub first_cluster: u32,
    pub data_length: u64,
}

impl StreamExt {
    #[must_use]
    pub fn no_fat_chain(&self) -> bool {
        self.flags & FLAG_NO_FAT_CHAIN != 0
    }
}

/// A decoded file entry set: the 0x85 entry, its stream extension, and the
/// assembled name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntrySet {
    /// Image byte offset of the 0x85 primary entry.
    pub entry_offset: u64,
    pub secondary_count: u8,
    pub set_checksum: u16,
    pub attributes: u16,
    pub stream: StreamExt,
    pub name: String,
    /// True when the stored SetChecksum matches the entry bytes.
    pub checksum_ok: bool,
}

impl FileEntrySet {
    /// Total byte length of the set on disk.
    #[must_use]
    pub fn set_len(&self) -> u64 {
        (u64::from(self.secondary_count) + 1) * DIRENT_SIZE as u64
    }
}

/// Any entry found while walking a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DirItem {
    File(FileEntrySet),
    Bitmap { entry_offset: u64, first_cluster: u32, data_length: u64 },
    Upcase { entry_offset: u64, first_cluster: u32, data_length: u64 },
    Label { entry_offset: u64, label: String },
    EndOfDirectory,
}

fn decode_file_set(buf: &[u8], pos: usize, image_offset: u64) -> Result<FileEntrySet, ExfatError> {
    let secondary_count = buf[pos + 1];
    let total = (usize::from(secondary_count) + 1) * DIRENT_SIZE;
    if secondary_count < 2 || pos + total > buf.len() {
        return Err(ExfatError::BadEntrySet {
            offset: image_offset,
            reason: format!("secondary count {secondary_count} does not fit"),
        });
    }
    let set = &buf[pos..pos + total];
    let stream_raw = &set[DIRENT_SIZE..2 * DIRENT_SIZE];
    if stream_raw[0] != ENTRY_STREAM {
        return Err(ExfatError::BadEntrySet {
            offset: image_offset,
            reason: format!("expected stream extension, found {:#04x}", stream_raw[0]),
        });
    }
    let stream = StreamExt {
        flags: stream_raw[1],
        name_length: stream_raw[3],
        name_hash: le_u16(stream_raw, 4),
        valid_data_length: le_u64(stream_raw, 8),
        first_cluster: le_u32(stream_raw, 20),
        data_length: le_u64(stream_raw, 24),
    };
    let mut units: Vec<u16> = Vec::with_capacity(usize::from(stream.name_length));
    for sec in 2..=usize::from(secondary_count) {
        let e = &set[sec * DIRENT_SIZE..(sec + 1) * DIRENT_SIZE];
        if e[0] != ENTRY_NAME {
            break;
        }
        for i in 0..15 {
            units.push(le_u16(e, 2 + 2 * i));
        }
    }
    units.truncate(usize::from(stream.name_length));
    let name = String::from_utf16_lossy(&units);
    Ok(FileEntrySet {
        entry_offset: image_offset,
        secondary_count,
        set_checksum: le_u16(set, 2),
        attributes: le_u16(set, 4),
        stream,
        name,
        checksum_ok: entry_set_checksum(set) == le_u16(set, 2),
    })
}

/// Walks a directory given by its first cluster. The root directory is
/// always FAT-chained. Returns decoded items in on-disk order.
pub fn iterate_dir<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
    first_cluster: u32,
) -> Result<Vec<DirItem>, ExfatError> {
    let chain = cluster_chain(img, sb, first_cluster, false, u64::MAX)?;
    let cluster_size = sb.cluster_size() as usize;
    let mut buf = Vec::with_capacity(chain.len() * cluster_size);
    let mut offsets = Vec::with_capacity(chain.len());
    for &c in &chain {
        let off = sb.cluster_byte_offset(c)?;
        offsets.push(off);
        buf.extend_from_slice(&img.read_at(off, cluster_size)?);
    }
    let image_offset = |pos: usize| offsets[pos / cluster_size] + (pos % cluster_size) as u64;

    let mut items = Vec::new();
    let mut pos = 0;
    while pos + DIRENT_SIZE <= buf.len() {
        let etype = buf[pos];
        match etype {
            0 => {
                items.push(DirItem::EndOfDirectory);
                break;
            }
            ENTRY_FILE => {
                let set = decode_file_set(&buf, pos, image_offset(pos))?;
                pos += set.set_len() as usize;
                items.push(DirItem::File(set));
                continue;
            }
            ENTRY_BITMAP => items.push(DirItem::Bitmap {
                entry_offset: image_offset(pos),
                first_cluster: le_u32(&buf, pos + 20),
                data_length: le_u64(&buf, pos + 24),
            }),
            ENTRY_UPCASE => items.push(DirItem::Upcase {
                entry_offset: image_offset(pos),
                first_cluster: le_u32(&buf, pos + 20),
                data_length: le_u64(&buf, pos + 24),
            }),
            ENTRY_LABEL => {
                let n = usize::from(buf[pos + 1]).min(11);
                let units: Vec<u16> =
                    (0..n).map(|i| le_u16(&buf, pos + 2 + 2 * i)).collect();
                items.push(DirItem::Label {
                    entry_offset: image_offset(pos),
                    label: String::from_utf16_lossy(&units),
                });
            }
            // Deleted entries (high bit clear) and unrecognized benign
            // entries are skipped.
            _ => {}
        }
        pos += DIRENT_SIZE;
    }
    Ok(items)
}

/// Finds a file by exact name in the root directory.
pub fn lookup_root<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
    name: &str,
) -> Result<FileEntrySet, ExfatError> {
    for item in iterate_dir(img, sb, sb.first_cluster_of_root)? {
        if let DirItem::File(set) = item {
            if set.name == name {
                return Ok(set);
            }
        }
    }
    Err(ExfatError::NotFound(name.to_string()))
}

/// Allocation bitmap location from the root directory.
pub fn bitmap_location<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
) -> Result<(u64, u64), ExfatError> {
    for item in iterate_dir(img, sb, sb.first_cluster_of_root)? {
        if let DirItem::Bitmap { first_cluster, data_length, .. } = item {
            let off = sb.cluster_byte_offset(first_cluster)?;
            return Ok((off, data_length));
        }
    }
    Err(ExfatError::NotFound("allocation bitmap".into()))
}

/// Free clusters according to the allocation bitmap (zero bits, one bit per
/// cluster starting at cluster 2).
pub fn free_cluster_count<R: ReadAt + ?Sized>(
    img: &R,
    sb: &BootSector,
) -> Result<u64, ExfatError> {
    let (off, len) = bitmap_location(img, sb)?;
    let bytes = img.read_at(off, len as usize)?;
    let mut free = 0u64;
    for i in 0..u64::from(sb.cluster_count) {
        let byte = bytes.get((i / 8) as usize).copied().unwrap_or(0xFF);
        if byte & (1 << (i % 8)) == 0 {
            free += 1;
        }
    }
    Ok(free)
}

/// Boot sector bytes with the mutable fields (VolumeFlags, PercentInUse)
/// masked out, for immutable-region comparison.
#[must_use]
pub fn immutable_boot_view(sector0: &[u8]) -> Vec<u8> {
    let mut v = sector0.to_vec();
    if v.len() > 112 {
        v[106] = 0;
        v[107] = 0;
        v[112] = 0;
    }
    v
}

/// Maps a byte range of a file to image byte segments using its cluster
/// list. Ranges beyond the chain are reported as None segments.
pub fn map_file_range(
    sb: &BootSector,
    chain: &[u32],
    offset: u64,
    len: u64,
) -> Result<Vec<(u64, u64, Option<u64>)>, ExfatError> {
    let cluster_size = sb.cluster_size();
    let mut out: Vec<(u64, u64, Option<u64>)> = Vec::new();
    let mut pos = offset;
    let end = offset + len;
    while pos < end {
        let idx = (pos / cluster_size) as usize;
        let within = pos % cluster_size;
        let take = (cluster_size - within).min(end - pos);
        let phys = match chain.get(idx) {
            Some(&c) => Some(sb.cluster_byte_offset(c)? + within),
            None => None,
        };
        match (out.last_mut(), phys) {
            (Some((_, l, Some(p))), Some(np)) if *p + *l == np => *l += take,
            (Some((_, l, None)), None) => *l += take,
            _ => out.push((pos, take, phys)),
        }
        pos += take;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{put_le_u16, put_le_u32, put_le_u64};

    fn boot_sector_bytes() -> Vec<u8> {
        let mut b = vec![0u8; 512];
        b[0] = 0xEB;
        b[1] = 0x76;
        b[2] = 0x90;
        b[3..11].copy_from_slice(b"EXFAT   ");
        put_le_u64(&mut b, 72, 8192); // volume_length sectors
        put_le_u32(&mut b, 80, 24); // fat_offset
        put_le_u32(&mut b, 84, 8); // fat_length
        put_le_u32(&mut b, 88, 32); // cluster_heap_offset
        put_le_u32(&mut b, 92, 1020); // cluster_count
        put_le_u32(&mut b, 96, 4); // root cluster
        put_le_u32(&mut b, 100, 0xDEAD_BEEF);
        put_le_u16(&mut b, 104, 0x0100); // fs revision 1.00
        b[108] = 9; // 512-byte sectors
        b[109] = 3; // 8 sectors per cluster
        b[110] = 1;
        put_le_u16(&mut b, 510, 0xAA55);
        b
    }

    #[test]
    fn boot_sector_round_trip() {
        let sb = parse_boot_sector(&boot_sector_bytes()).unwrap();
        assert_eq!(sb.bytes_per_sector(), 512);
        assert_eq!(sb.cluster_size(), 4096);
        assert_eq!(sb.fat_byte_offset(), 24 * 512);
        assert_eq!(sb.heap_byte_offset(), 32 * 512);
        assert_eq!(sb.cluster_byte_offset(2).unwrap(), 32 * 512);
        assert_eq!(sb.cluster_byte_offset(3).unwrap(), 32 * 512 + 4096);
        assert!(sb.cluster_byte_offset(1).is_err());
        assert!(sb.cluster_byte_offset(2 + 1020).is_err());
    }

    #[test]
    fn boot_sector_rejects_bad_shapes() {
        let mut b = boot_sector_bytes();
        b[5] = b'X';
        assert!(parse_boot_sector(&b).is_err());

        let mut b = boot_sector_bytes();
        b[20] = 1; // MustBeZero violation
        assert!(parse_boot_sector(&b).is_err());

        let mut b = boot_sector_bytes();
        b[510] = 0;
        assert!(parse_boot_sector(&b).is_err());

        let mut b = boot_sector_bytes();
        b[108] = 8;
        assert!(parse_boot_sector(&b).is_err());
    }

    /// Reference implementation straight from the published pseudocode,
    /// expressed with explicit bit tests instead of a rotate.
    fn boot_checksum_reference(data: &[u8]) -> u32 {
        let mut checksum: u32 = 0;
        for (i, &b) in data.iter().enumerate() {
            if i == 106 || i == 107 || i == 112 {
                continue;
            }
            let rotated = if checksum & 1 != 0 { 0x8000_0000u32 } else { 0 };
            checksum = rotated.wrapping_add(checksum >> 1).wrapping_add(u32::from(b));
        }
        checksum
    }

    fn entry_checksum_reference(data: &[u8]) -> u16 {
        let mut checksum: u16 = 0;
        for (i, &b) in data.iter().enumerate() {
            if i == 2 || i == 3 {
                continue;
            }
            let rotated = if checksum & 1 != 0 { 0x8000u16 } else { 0 };
            checksum = rotated.wrapping_add(checksum >> 1).wrapping_add(u16::from(b));
        }
        checksum
    }

    #[test]
    fn checksums_match_reference() {
        let mut sectors = vec![0u8; 11 * 512];
        for (i, b) in sectors.iter_mut().enumerate() {
            *b = (i as u8).wrapping_mul(31).wrapping_add(7);
        }
        assert_eq!(boot_checksum(&sectors), boot_checksum_reference(&sectors));

        let mut entries = vec![0u8; 96];
        for (i, b) in entries.iter_mut().enumerate() {
            *b = (i as u8).wrapping_mul(13).wrapping_add(1);
        }
        assert_eq!(entry_set_checksum(&entries), entry_checksum_reference(&entries));
    }

    #[test]
    fn checksum_skips_flag_bytes() {
        let base = boot_sector_bytes();
        let mut flipped = base.clone();
        flipped[106] = 0xFF;
        flipped[107] = 0xFF;
        flipped[112] = 0x63;
        assert_eq!(boot_checksum(&base), boot_checksum(&flipped));
        let mut touched = base.clone();
        touched[113] ^= 1;
        assert_ne!(boot_checksum(&base), boot_checksum(&touched));
    }

    #[test]
    fn name_hash_upcases_ascii() {
        let lower: Vec<u16> = "journal.log".encode_utf16().collect();
        let upper: Vec<u16> = "JOURNAL.LOG".encode_utf16().collect();
        assert_eq!(name_hash(&lower), name_hash(&upper));
        let other: Vec<u16> = "JOURNAL.LOH".encode_utf16().collect();
        assert_ne!(name_hash(&lower), name_hash(&other));
    }

    /// Builds a tiny volume in memory: boot regions, FAT, bitmap cluster,
    /// root dir cluster, one file.
    struct TinyVolume {
        img: Vec<u8>,
        sb: BootSector,
    }

    fn file_entry_set(name: &str, first_cluster: u32, vdl: u64, dl: u64, flags: u8) -> Vec<u8> {
        let units: Vec<u16> = name.encode_utf16().collect();
        let name_entries = units.len().div_ceil(15);
        let secondary = 1 + name_entries;
        let mut set = vec![0u8; (1 + secondary) * DIRENT_SIZE];
        set[0] = ENTRY_FILE;
        set[1] = secondary as u8;
        put_le_u16(&mut set, 4, 0x20); // archive attribute
        let s = DIRENT_SIZE;
        set[s] = ENTRY_STREAM;
        set[s + 1] = flags;
        set[s + 3] = units.len() as u8;
        put_le_u16(&mut set, s + 4, name_hash(&units));
        put_le_u64(&mut set, s + 8, vdl);
        put_le_u32(&mut set, s + 20, first_cluster);
        put_le_u64(&mut set, s + 24, dl);
        for (i, chunk) in units.chunks(15).enumerate() {
            let base = (2 + i) * DIRENT_SIZE;
            set[base] = ENTRY_NAME;
            for (j, &u) in chunk.iter().enumerate() {
                put_le_u16(&mut set, base + 2 + 2 * j, u);
            }
        }
        let cs = entry_set_checksum(&set);
        put_le_u16(&mut set, 2, cs);
        set
    }

    fn tiny_volume() -> TinyVolume {
        let boot = boot_sector_bytes();
        let sb = parse_boot_sector(&boot).unwrap();
        let mut img = vec![0u8; 8192 * 512];
        // Main boot region.
        img[..512].copy_from_slice(&boot);
        for s in 1..9 {
            put_le_u16(&mut img, s * 512 + 510, 0xAA55);
        }
        let csum = boot_checksum(&img[..11 * 512]);
        for i in 0..128 {
            put_le_u32(&mut img, 11 * 512 + 4 * i, csum);
        }
        // Backup boot region at sector 12.
        let (main, rest) = img.split_at_mut(12 * 512);
        rest[..12 * 512].copy_from_slice(main);

        let fat = sb.fat_byte_offset() as usize;
        put_le_u32(&mut img, fat, 0xFFFF_FFF8);
        put_le_u32(&mut img, fat + 4, FAT_EOC);
        // Cluster 2: bitmap, cluster 3: upcase stub, cluster 4: root dir,
        // clusters 5..: file data.
        for c in [2u32, 3, 4] {
            put_le_u32(&mut img, fat + 4 * c as usize, FAT_EOC);
        }
        // File "a.log" spans clusters 5 -> 7 -> 6 via the FAT.
        put_le_u32(&mut img, fat + 4 * 5, 7);
        put_le_u32(&mut img, fat + 4 * 7, 6);
        put_le_u32(&mut img, fat + 4 * 6, FAT_EOC);

        // Bitmap cluster: clusters 2..=7 allocated.
        let bitmap_off = sb.cluster_byte_offset(2).unwrap() as usize;
        img[bitmap_off] = 0b0011_1111;

        // Root directory.
        let root = sb.cluster_byte_offset(4).unwrap() as usize;
        let mut pos = root;
        let mut bitmap_entry = vec![0u8; DIRENT_SIZE];
        bitmap_entry[0] = ENTRY_BITMAP;
        put_le_u32(&mut bitmap_entry, 20, 2);
        put_le_u64(&mut bitmap_entry, 24, 128);
        img[pos..pos + DIRENT_SIZE].copy_from_slice(&bitmap_entry);
        pos += DIRENT_SIZE;
        let mut upcase_entry = vec![0u8; DIRENT_SIZE];
        upcase_entry[0] = ENTRY_UPCASE;
        put_le_u32(&mut upcase_entry, 20, 3);
        put_le_u64(&mut upcase_entry, 24, 128);
        img[pos..pos + DIRENT_SIZE].copy_from_slice(&upcase_entry);
        pos += DIRENT_SIZE;
        let set = file_entry_set("a.log", 5, 9000, 12288, FLAG_ALLOCATION_POSSIBLE);
        img[pos..pos + set.len()].copy_from_slice(&set);

        // Distinct fill per data cluster.
        for (i, c) in [5u32, 7, 6].iter().enumerate() {
            let off = sb.cluster_byte_offset(*c).unwrap() as usize;
            img[off..off + 4096].fill(0x10 + i as u8);
        }
        TinyVolume { img, sb }
    }

    #[test]
    fn boot_regions_verify_and_detect_tamper() {
        let v = tiny_volume();
        verify_boot_regions(&v.img[..], &v.sb).unwrap();
        let mut tampered = v.img.clone();
        tampered[72] ^= 1; // volume_length byte, covered by checksum
        assert!(verify_boot_regions(&tampered[..], &v.sb).is_err());
        // Flag bytes are excluded from the checksum.
        let mut flags = v.img.clone();
        flags[106] = 0x02;
        flags[112] = 50;
        verify_boot_regions(&flags[..], &v.sb).unwrap();
    }

    #[test]
    fn root_lookup_decodes_entry_set() {
        let v = tiny_volume();
        let set = lookup_root(&v.img[..], &v.sb, "a.log").unwrap();
        assert!(set.checksum_ok);
        assert_eq!(set.stream.valid_data_length, 9000);
        assert_eq!(set.stream.data_length, 12288);
        assert_eq!(set.stream.first_cluster, 5);
        assert!(!set.stream.no_fat_chain());
        assert!(lookup_root(&v.img[..], &v.sb, "missing.log").is_err());
    }

    #[test]
    fn corrupt_set_checksum_is_flagged_not_fatal() {
        let mut v = tiny_volume();
        let set = lookup_root(&v.img[..], &v.sb, "a.log").unwrap();
        let off = set.entry_offset as usize;
        v.img[off + 4] ^= 0xFF; // attribute byte, invalidating the checksum
        let set = lookup_root(&v.img[..], &v.sb, "a.log").unwrap();
        assert!(!set.checksum_ok);
    }

    #[test]
    fn fat_chain_follows_links() {
        let v = tiny_volume();
        let chain = cluster_chain(&v.img[..], &v.sb, 5, false, 12288).unwrap();
        assert_eq!(chain, vec![5, 7, 6]);
        let contiguous = cluster_chain(&v.img[..], &v.sb, 5, true, 12288).unwrap();
        assert_eq!(contiguous, vec![5, 6, 7]);
    }

    #[test]
    fn fat_chain_loop_detected() {
        let mut v = tiny_volume();
        let fat = v.sb.fat_byte_offset() as usize;
        put_le_u32(&mut v.img, fat + 4 * 6, 5); // 5 -> 7 -> 6 -> 5
        assert!(matches!(
            cluster_chain(&v.img[..], &v.sb, 5, false, u64::MAX),
            Err(ExfatError::ChainLoop(5))
        ));
    }

    #[test]
    fn file_range_maps_through_chain() {
        let v = tiny_volume();
        let chain = cluster_chain(&v.img[..], &v.sb, 5, false, 12288).unwrap();
        // Bytes 4000..8200 span the cluster 5 tail, all of 7, entering 6.
        let segs = map_file_range(&v.sb, &chain, 4000, 4296).unwrap();
        let mut collected = Vec::new();
        for (_file_off, len, phys) in &segs {
            let p = phys.unwrap() as usize;
            collected.extend_from_slice(&v.img[p..p + *len as usize]);
        }
        assert_eq!(collected.len(), 4296);
        assert_eq!(&collected[..96], &vec![0x10u8; 96][..]);
        assert_eq!(&collected[96..96 + 4096], &vec![0x11u8; 4096][..]);
        assert_eq!(&collected[96 + 4096..], &vec![0x12u8; 104][..]);
        // Past-chain ranges come back unmapped.
        let segs = map_file_range(&v.sb, &chain, 12288, 100).unwrap();
        assert_eq!(segs, vec![(12288, 100, None)]);
    }

    #[test]
    fn free_cluster_count_reads_bitmap() {
        let v = tiny_volume();
        let free = free_cluster_count(&v.img[..], &v.sb).unwrap();
        assert_eq!(free, u64::from(v.sb.cluster_count) - 6);
    }

    #[test]
    fn immutable_view_masks_only_flag_bytes() {
        let a = boot_sector_bytes();
        let mut b = a.clone();
        b[106] = 0xFF;
        b[112] = 7;
        assert_eq!(immutable_boot_view(&a), immutable_boot_view(&b));
        let mut c = a.clone();
        c[96] ^= 1;
        assert_ne!(immutable_boot_view(&a), immutable_boot_view(&c));
    }
}
