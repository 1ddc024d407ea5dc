//! Synthetic filesystem drivers.
//!
//! These emit the raw block-write streams a mounted host would produce when
//! appending to files, with driver-like granularity and ordering: data first,
//! then allocation structures, then the metadata that exposes the new length.
//! Tests and benches use them to drive a `BlockImage` deterministically;
//! nothing here is visible to the inference engine except the writes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::block::{BlockError, BlockImage};
use crate::exfat::{
    self, entry_set_checksum, BootSector, ExfatError, DIRENT_SIZE, FAT_EOC, FIRST_CLUSTER,
    FLAG_NO_FAT_CHAIN,
};
use crate::ext4::{self, Ext4Error, Superblock, EXTENT_MAGIC, SUPERBLOCK_OFFSET};
use crate::util::{le_u16, le_u32, put_le_u16, put_le_u32, put_le_u64};

/// Longest run a single initialized extent can describe.
const EXT_MAX_LEN: u64 = 32768;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Exfat(#[from] ExfatError),
    #[error(transparent)]
    Ext4(#[from] Ext4Error),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("no free space in {0}")]
    Full(&'static str),
    #[error("simulator cannot handle this image: {0}")]
    State(String),
}

/// Where the simulated driver may allocate from. Units are clusters for
/// exFAT and absolute block numbers for ext4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocPolicy {
    FirstFit,
    Region { start: u64, end: u64 },
}

impl AllocPolicy {
    fn admits(&self, unit: u64) -> bool {
        match *self {
            AllocPolicy::FirstFit => true,
            AllocPolicy::Region { start, end } => unit >= start && unit < end,
        }
    }
}

pub type SimClock<'a> = &'a mut dyn FnMut() -> u64;

/// Collects read-modify-write patches and flushes them as one write per
/// contiguous span, the way a driver flushes dirty buffers.
struct PatchSet {
    granule: u64,
    spans: BTreeMap<u64, Vec<u8>>,
}

impl PatchSet {
    fn new(granule: u64) -> Self {
        Self { granule, spans: BTreeMap::new() }
    }

    /// Stages `bytes` at absolute offset `at`, pulling in the granules that
    /// contain it from the image on first touch. Overlapping and adjacent
    /// spans collapse into one, keeping every previously staged byte.
    fn patch(&mut self, img: &BlockImage, at: u64, bytes: &[u8]) -> Result<(), SimError> {
        if bytes.is_empty() {
            return Ok(());
        }
        let g = self.granule;
        let mut start = (at / g) * g;
        let mut end = (at + bytes.len() as u64).div_ceil(g) * g;

        let absorbed: Vec<u64> = self
            .spans
            .range(..=end)
            .filter(|(&s, v)| s + v.len() as u64 >= start)
            .map(|(&s, _)| s)
            .collect();
        let mut old = Vec::with_capacity(absorbed.len());
        for s in absorbed {
            let v = self.spans.remove(&s).unwrap();
            start = start.min(s);
            end = end.max(s + v.len() as u64);
            old.push((s, v));
        }

        let mut buf = img.read_range(start, end - start)?;
        for (s, v) in old {
            let rel = (s - start) as usize;
            buf[rel..rel + v.len()].copy_from_slice(&v);
        }
        let rel = (at - start) as usize;
        buf[rel..rel + bytes.len()].copy_from_slice(bytes);
        self.spans.insert(start, buf);
        Ok(())
    }

    fn flush(self, img: &BlockImage, clock: SimClock) -> Result<(), SimError> {
        for (off, buf) in self.spans {
            img.apply_write(off, &buf, clock())?;
        }
        Ok(())
    }
}

/// Driver emulator for an exFAT volume.
pub struct ExfatSim {
    sb: BootSector,
    /// Set the VolumeDirty flag in sector 0 around each operation.
    pub toggle_dirty: bool,
    /// Refresh PercentInUse in sector 0 after allocations.
    pub update_percent: bool,
    /// Keep files in the NoFatChain representation while their allocation
    /// stays one contiguous run, the way production drivers do. The default
    /// converts to a FAT chain on the first append.
    pub prefer_no_fat_chain: bool,
}

impl ExfatSim {
    pub fn attach(img: &BlockImage) -> Result<Self, SimError> {
        let first = img.read_range(0, 4096.min(img.capacity()))?;
        let sb = exfat::parse_boot_sector(&first)?;
        Ok(Self { sb, toggle_dirty: false, update_percent: false, prefer_no_fat_chain: false })
    }

    #[must_use]
    pub fn boot(&self) -> &BootSector {
        &self.sb
    }

    fn write_volume_flags(
        &self,
        img: &BlockImage,
        dirty: bool,
        clock: SimClock,
    ) -> Result<(), SimError> {
        let sector = self.sb.bytes_per_sector();
        let mut s0 = img.read_range(0, sector)?;
        let flags = le_u16(&s0, 106);
        put_le_u16(&mut s0, 106, if dirty { flags | 0x0002 } else { flags & !0x0002 });
        img.apply_write(0, &s0, clock())?;
        Ok(())
    }

    fn write_percent_in_use(&self, img: &BlockImage, clock: SimClock) -> Result<(), SimError> {
        let sector = self.sb.bytes_per_sector();
        let free = exfat::free_cluster_count(img, &self.sb)?;
        let used = u64::from(self.sb.cluster_count) - free;
        let mut s0 = img.read_range(0, sector)?;
        s0[112] = ((used * 100) / u64::from(self.sb.cluster_count)) as u8;
        img.apply_write(0, &s0, clock())?;
        Ok(())
    }

    fn allocate(
        &self,
        img: &BlockImage,
        count: usize,
        policy: AllocPolicy,
    ) -> Result<Vec<u32>, SimError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let (bitmap_off, bitmap_len) = exfat::bitmap_location(img, &self.sb)?;
        let bitmap = img.read_range(bitmap_off, bitmap_len)?;
        let mut picked = Vec::with_capacity(count);
        for idx in 0..u64::from(self.sb.cluster_count) {
            let byte = (idx / 8) as usize;
            if bitmap[byte] & (1 << (idx % 8)) != 0 {
                continue;
            }
            let cluster = idx + u64::from(FIRST_CLUSTER);
            if !policy.admits(cluster) {
                continue;
            }
            picked.push(cluster as u32);
            if picked.len() == count {
                return Ok(picked);
            }
        }
        Err(SimError::Full("cluster heap"))
    }

    /// Appends `data` to the named root-level file, emitting data cluster
    /// writes, FAT updates, bitmap updates, and finally the refreshed
    /// directory entry set.
    pub fn append(
        &self,
        img: &BlockImage,
        name: &str,
        data: &[u8],
        policy: AllocPolicy,
        clock: SimClock,
    ) -> Result<(), SimError> {
        if data.is_empty() {
            return Ok(());
        }
        let sector = self.sb.bytes_per_sector();
        let cluster = self.sb.cluster_size();
        let set = exfat::lookup_root(img, &self.sb, name)?;
        if !set.checksum_ok {
            return Err(SimError::State(format!("entry set for {name} has a bad checksum")));
        }
        let old_len = set.stream.data_length;
        let new_len = old_len + data.len() as u64;
        let chain = if set.stream.first_cluster == 0 {
            Vec::new()
        } else {
            exfat::cluster_chain(
                img,
                &self.sb,
                set.stream.first_cluster,
                set.stream.no_fat_chain(),
                old_len,
            )?
        };
        let clusters_total = new_len.div_ceil(cluster) as usize;
        let fresh = self.allocate(img, clusters_total - chain.len(), policy)?;

        if self.toggle_dirty {
            self.write_volume_flags(img, true, clock)?;
        }

        // Data, tail cluster first. Whole sectors only.
        let mut consumed = 0usize;
        let tail_used = (old_len % cluster) as usize;
        if tail_used != 0 {
            let tail = *chain.last().expect("nonempty file has a chain");
            let base = self.sb.cluster_byte_offset(tail)?;
            let take = data.len().min(cluster as usize - tail_used);
            let span_start = (tail_used as u64 / sector) * sector;
            let span_end = ((tail_used + take) as u64).div_ceil(sector) * sector;
            let mut buf = img.read_range(base + span_start, span_end - span_start)?;
            let rel = tail_used - span_start as usize;
            buf[rel..rel + take].copy_from_slice(&data[..take]);
            img.apply_write(base + span_start, &buf, clock())?;
            consumed = take;
        }
        for &c in &fresh {
            let base = self.sb.cluster_byte_offset(c)?;
            let take = (data.len() - consumed).min(cluster as usize);
            let padded = (take as u64).div_ceil(sector) * sector;
            let mut buf = vec![0u8; padded as usize];
            buf[..take].copy_from_slice(&data[consumed..consumed + take]);
            img.apply_write(base, &buf, clock())?;
            consumed += take;
        }
        debug_assert_eq!(consumed, data.len());

        // A file keeps the chainless form only while it stays one run and
        // the operator asked for it; everything else goes through the FAT.
        let run_stays_contiguous = (set.stream.first_cluster == 0 || set.stream.no_fat_chain())
            && chain
                .iter()
                .chain(fresh.iter())
                .zip(chain.iter().chain(fresh.iter()).skip(1))
                .all(|(&a, &b)| b == a + 1);
        let keep_chainless = self.prefer_no_fat_chain && run_stays_contiguous;

        // FAT. When the file was stored without a chain, the run gains one
        // now, entry by entry, before the flag flips off in the dirent.
        if !keep_chainless {
            let mut fat = PatchSet::new(sector);
            let fat_base = self.sb.fat_byte_offset();
            let link = |fat: &mut PatchSet, from: u32, to: u32| -> Result<(), SimError> {
                fat.patch(img, fat_base + u64::from(from) * 4, &to.to_le_bytes())
            };
            if set.stream.no_fat_chain() && !chain.is_empty() {
                for w in chain.windows(2) {
                    link(&mut fat, w[0], w[1])?;
                }
                link(&mut fat, *chain.last().unwrap(), FAT_EOC)?;
            }
            if let (Some(&last), Some(&first)) = (chain.last(), fresh.first()) {
                link(&mut fat, last, first)?;
            }
            for w in fresh.windows(2) {
                link(&mut fat, w[0], w[1])?;
            }
            if let Some(&last) = fresh.last() {
                link(&mut fat, last, FAT_EOC)?;
            }
            fat.flush(img, clock)?;
        }

        // Allocation bitmap. Bits are gathered per byte first so clusters
        // sharing a byte land in one read-modify-write.
        if !fresh.is_empty() {
            let (bitmap_off, _) = exfat::bitmap_location(img, &self.sb)?;
            let mut masks: BTreeMap<u64, u8> = BTreeMap::new();
            for &c in &fresh {
                let idx = u64::from(c - FIRST_CLUSTER);
                *masks.entry(idx / 8).or_insert(0) |= 1 << (idx % 8);
            }
            let mut bits = PatchSet::new(sector);
            for (&rel, &mask) in &masks {
                let at = bitmap_off + rel;
                let byte = img.read_range(at, 1)?[0] | mask;
                bits.patch(img, at, &[byte])?;
            }
            bits.flush(img, clock)?;
        }

        // Directory entry set: length fields, first cluster, checksum.
        let set_len = set.set_len() as usize;
        let mut raw = img.read_range(set.entry_offset, set.set_len())?;
        if keep_chainless {
            raw[DIRENT_SIZE + 1] |= FLAG_NO_FAT_CHAIN;
        } else {
            raw[DIRENT_SIZE + 1] &= !FLAG_NO_FAT_CHAIN;
        }
        put_le_u64(&mut raw, DIRENT_SIZE + 8, new_len);
        if set.stream.first_cluster == 0 {
            put_le_u32(&mut raw, DIRENT_SIZE + 20, fresh[0]);
        }
        put_le_u64(&mut raw, DIRENT_SIZE + 24, new_len);
        let cs = entry_set_checksum(&raw[..set_len]);
        put_le_u16(&mut raw, 2, cs);
        let mut dirent = PatchSet::new(sector);
        dirent.patch(img, set.entry_offset, &raw)?;
        dirent.flush(img, clock)?;

        if self.update_percent {
            self.write_percent_in_use(img, clock)?;
        }
        if self.toggle_dirty {
            self.write_volume_flags(img, false, clock)?;
        }
        Ok(())
    }

    /// Rewrites the entry set with a shorter length, as a host-side truncate
    /// would. The cluster chain is left for lazy reclamation.
    pub fn truncate(
        &self,
        img: &BlockImage,
        name: &str,
        new_len: u64,
        clock: SimClock,
    ) -> Result<(), SimError> {
        let set = exfat::lookup_root(img, &self.sb, name)?;
        if new_len > set.stream.data_length {
            return Err(SimError::State("truncate cannot grow".into()));
        }
        let set_len = set.set_len() as usize;
        let mut raw = img.read_range(set.entry_offset, set.set_len())?;
        put_le_u64(&mut raw, DIRENT_SIZE + 8, new_len);
        put_le_u64(&mut raw, DIRENT_SIZE + 24, new_len);
        let cs = entry_set_checksum(&raw[..set_len]);
        put_le_u16(&mut raw, 2, cs);
        let mut dirent = PatchSet::new(self.sb.bytes_per_sector());
        dirent.patch(img, set.entry_offset, &raw)?;
        dirent.flush(img, clock)?;
        Ok(())
    }

    /// Overwrites bytes inside the existing extent of a file, in place.
    pub fn overwrite(
        &self,
        img: &BlockImage,
        name: &str,
        file_offset: u64,
        bytes: &[u8],
        clock: SimClock,
    ) -> Result<(), SimError> {
        let set = exfat::lookup_root(img, &self.sb, name)?;
        if file_offset + bytes.len() as u64 > set.stream.data_length {
            return Err(SimError::State("overwrite extends past end of file".into()));
        }
        let chain = exfat::cluster_chain(
            img,
            &self.sb,
            set.stream.first_cluster,
            set.stream.no_fat_chain(),
            set.stream.data_length,
        )?;
        let cluster = self.sb.cluster_size();
        let mut patch = PatchSet::new(self.sb.bytes_per_sector());
        for (i, &b) in bytes.iter().enumerate() {
            let pos = file_offset + i as u64;
            let c = chain[(pos / cluster) as usize];
            let at = self.sb.cluster_byte_offset(c)? + pos % cluster;
            patch.patch(img, at, &[b])?;
        }
        patch.flush(img, clock)?;
        Ok(())
    }
}

/// Driver emulator for ext4 volumes without a journal.
pub struct Ext4Sim {
    sb: Superblock,
}

impl Ext4Sim {
    pub fn attach(img: &BlockImage) -> Result<Self, SimError> {
        let sb = ext4::parse_superblock(img)?;
        if sb.has_journal() {
            return Err(SimError::State(
                "journaled volumes need a recorded trace, not the simulator".into(),
            ));
        }
        Ok(Self { sb })
    }

    #[must_use]
    pub fn superblock(&self) -> &Superblock {
        &self.sb
    }

    pub fn resolve(&self, img: &BlockImage, path: &str) -> Result<u64, SimError> {
        Ok(ext4::lookup_root(img, &self.sb, path)?)
    }

    fn allocate(
        &self,
        img: &BlockImage,
        count: usize,
        policy: AllocPolicy,
    ) -> Result<Vec<u64>, SimError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let bs = self.sb.block_size();
        let first = u64::from(self.sb.first_data_block);
        let mut picked = Vec::with_capacity(count);
        for g in 0..self.sb.groups_count() {
            let gd = ext4::read_group_desc(img, &self.sb, g)?;
            let in_group = (self.sb.blocks_count - first - g * u64::from(self.sb.blocks_per_group))
                .min(u64::from(self.sb.blocks_per_group));
            let bitmap = img.read_range(gd.block_bitmap * bs, in_group.div_ceil(8))?;
            for idx in 0..in_group {
                if bitmap[(idx / 8) as usize] & (1 << (idx % 8)) != 0 {
                    continue;
                }
                let block = first + g * u64::from(self.sb.blocks_per_group) + idx;
                if !policy.admits(block) {
                    continue;
                }
                picked.push(block);
                if picked.len() == count {
                    return Ok(picked);
                }
            }
        }
        Err(SimError::Full("block groups"))
    }

    /// Appends to an inode: data blocks, then bitmaps and counters, then the
    /// inode record with its grown extent tree and new size.
    pub fn append(
        &self,
        img: &BlockImage,
        ino: u64,
        data: &[u8],
        policy: AllocPolicy,
        clock: SimClock,
    ) -> Result<(), SimError> {
        if data.is_empty() {
            return Ok(());
        }
        let bs = self.sb.block_size();
        let inode = ext4::read_inode(img, &self.sb, ino)?;
        if !inode.is_regular() {
            return Err(SimError::State(format!("inode {ino} is not a regular file")));
        }
        let extents = ext4::resolve_extents(img, &self.sb, &inode)?;
        let size = inode.size;
        let new_size = size + data.len() as u64;
        let blocks_now = size.div_ceil(bs);
        let need = (new_size.div_ceil(bs) - blocks_now) as usize;
        let fresh = self.allocate(img, need, policy)?;

        // Tail block read-modify-write.
        let mut consumed = 0usize;
        if size % bs != 0 {
            let logical = blocks_now - 1;
            let phys = extents
                .iter()
                .find(|e| {
                    u64::from(e.logical_block) <= logical
                        && logical < u64::from(e.logical_block) + u64::from(e.block_count)
                })
                .map(|e| e.physical_block + (logical - u64::from(e.logical_block)))
                .ok_or_else(|| SimError::State(format!("inode {ino} tail block unmapped")))?;
            let mut buf = img.read_range(phys * bs, bs)?;
            let rel = (size % bs) as usize;
            let take = data.len().min(bs as usize - rel);
            buf[rel..rel + take].copy_from_slice(&data[..take]);
            img.apply_write(phys * bs, &buf, clock())?;
            consumed = take;
        }
        for &b in &fresh {
            let take = (data.len() - consumed).min(bs as usize);
            let mut buf = vec![0u8; bs as usize];
            buf[..take].copy_from_slice(&data[consumed..consumed + take]);
            img.apply_write(b * bs, &buf, clock())?;
            consumed += take;
        }
        debug_assert_eq!(consumed, data.len());

        if !fresh.is_empty() {
            // Block bitmaps, whole blocks, one write per touched group.
            let first = u64::from(self.sb.first_data_block);
            let mut by_group: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for &b in &fresh {
                by_group.entry((b - first) / u64::from(self.sb.blocks_per_group)).or_default().push(b);
            }
            for (&g, blocks) in &by_group {
                let gd = ext4::read_group_desc(img, &self.sb, g)?;
                let mut bitmap = img.read_range(gd.block_bitmap * bs, bs)?;
                for &b in blocks {
                    let idx = (b - first) % u64::from(self.sb.blocks_per_group);
                    bitmap[(idx / 8) as usize] |= 1 << (idx % 8);
                }
                img.apply_write(gd.block_bitmap * bs, &bitmap, clock())?;
            }
            // Group descriptor counters, whole descriptor-table blocks.
            let mut gdt = PatchSet::new(bs);
            for (&g, blocks) in &by_group {
                let gd_off = ext4::group_desc_offset(&self.sb, g);
                let cur = le_u16(&img.read_range(gd_off, 32)?, ext4::GD_FREE_BLOCKS_LO);
                let mut two = [0u8; 2];
                put_le_u16(&mut two, 0, cur - blocks.len() as u16);
                gdt.patch(img, gd_off + ext4::GD_FREE_BLOCKS_LO as u64, &two)?;
            }
            gdt.flush(img, clock)?;
            // Superblock free block counter, as one whole-block write.
            let sb_block = (SUPERBLOCK_OFFSET / bs) * bs;
            let mut raw = img.read_range(sb_block, bs)?;
            let rel = (SUPERBLOCK_OFFSET - sb_block) as usize;
            let cur = le_u32(&raw, rel + 0x0C);
            put_le_u32(&mut raw, rel + 0x0C, cur - fresh.len() as u32);
            img.apply_write(sb_block, &raw, clock())?;
        }

        // Inode record: extents, block usage, size. Whole table block.
        let inode_off = ext4::inode_location(img, &self.sb, ino)?;
        let table_block = (inode_off / bs) * bs;
        let mut raw = img.read_range(table_block, bs)?;
        let rec = (inode_off - table_block) as usize;
        self.grow_extents(&mut raw[rec + ext4::INODE_BLOCK..rec + ext4::INODE_BLOCK + 60], blocks_now, &fresh)?;
        let spb = (bs / 512) as u32;
        let cur_sectors = le_u32(&raw, rec + 0x1C);
        put_le_u32(&mut raw, rec + 0x1C, cur_sectors + fresh.len() as u32 * spb);
        put_le_u32(&mut raw, rec + ext4::INODE_SIZE_LO, new_size as u32);
        put_le_u32(&mut raw, rec + ext4::INODE_SIZE_HI, (new_size >> 32) as u32);
        put_le_u32(&mut raw, rec + 0x10, 1_600_000_123);
        img.apply_write(table_block, &raw, clock())?;
        Ok(())
    }

    /// Extends the inline extent root in `i_block` with freshly allocated
    /// blocks, merging physically contiguous runs.
    fn grow_extents(
        &self,
        i_block: &mut [u8],
        mut next_logical: u64,
        fresh: &[u64],
    ) -> Result<(), SimError> {
        if fresh.is_empty() {
            return Ok(());
        }
        if le_u16(i_block, 0) != EXTENT_MAGIC {
            return Err(SimError::State("inode does not use extents".into()));
        }
        if le_u16(i_block, 6) != 0 {
            return Err(SimError::State("simulator only grows inline extent roots".into()));
        }
        let max = le_u16(i_block, 4) as usize;
        let mut entries = le_u16(i_block, 2) as usize;
        for &b in fresh {
            let merged = entries > 0 && {
                let at = 12 + (entries - 1) * 12;
                let len = u64::from(le_u16(i_block, at + 4));
                let phys = u64::from(le_u32(i_block, at + 8))
                    | (u64::from(le_u16(i_block, at + 6)) << 32);
                if len < EXT_MAX_LEN && phys + len == b {
                    put_le_u16(i_block, at + 4, (len + 1) as u16);
                    true
                } else {
                    false
                }
            };
            if !merged {
                if entries == max {
                    return Err(SimError::State("inline extent root is full".into()));
                }
                let at = 12 + entries * 12;
                put_le_u32(i_block, at, next_logical as u32);
                put_le_u16(i_block, at + 4, 1);
                put_le_u16(i_block, at + 6, (b >> 32) as u16);
                put_le_u32(i_block, at + 8, b as u32);
                entries += 1;
                put_le_u16(i_block, 2, entries as u16);
            }
            next_logical += 1;
        }
        Ok(())
    }

    /// Shrinks the stored size of an inode without touching its blocks.
    pub fn truncate_inode(
        &self,
        img: &BlockImage,
        ino: u64,
        new_size: u64,
        clock: SimClock,
    ) -> Result<(), SimError> {
        let bs = self.sb.block_size();
        let inode_off = ext4::inode_location(img, &self.sb, ino)?;
        let table_block = (inode_off / bs) * bs;
        let mut raw = img.read_range(table_block, bs)?;
        let rec = (inode_off - table_block) as usize;
        put_le_u32(&mut raw, rec + ext4::INODE_SIZE_LO, new_size as u32);
        put_le_u32(&mut raw, rec + ext4::INODE_SIZE_HI, (new_size >> 32) as u32);
        img.apply_write(table_block, &raw, clock())?;
        Ok(())
    }

    /// Overwrites bytes inside the already-written span of a file.
    pub fn overwrite(
        &self,
        img: &BlockImage,
        ino: u64,
        file_offset: u64,
        bytes: &[u8],
        clock: SimClock,
    ) -> Result<(), SimError> {
        let bs = self.sb.block_size();
        let inode = ext4::read_inode(img, &self.sb, ino)?;
        if file_offset + bytes.len() as u64 > inode.size {
            return Err(SimError::State("overwrite extends past end of file".into()));
        }
        let extents = ext4::resolve_extents(img, &self.sb, &inode)?;
        let mut patch = PatchSet::new(bs);
        for (i, &byte) in bytes.iter().enumerate() {
            let pos = file_offset + i as u64;
            let logical = pos / bs;
            let phys = extents
                .iter()
                .find(|e| {
                    u64::from(e.logical_block) <= logical
                        && logical < u64::from(e.logical_block) + u64::from(e.block_count)
                })
                .map(|e| e.physical_block + (logical - u64::from(e.logical_block)))
                .ok_or_else(|| SimError::State("offset unmapped".into()))?;
            patch.patch(img, phys * bs + pos % bs, &[byte])?;
        }
        patch.flush(img, clock)?;
        Ok(())
    }
}
