//! Small fixed-endian field readers shared by the on-disk parsers.

#[inline]
pub fn le_u16(buf: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([buf[off], buf[off + 1]])
}

#[inline]
pub fn le_u32(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

#[inline]
pub fn le_u64(buf: &[u8], off: usize) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&buf[off..off + 8]);
    u64::from_le_bytes(b)
}

#[inline]
pub fn be_u16(buf: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([buf[off], buf[off + 1]])
}

#[inline]
pub fn be_u32(buf: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

#[inline]
pub fn be_u64(buf: &[u8], off: usize) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&buf[off..off + 8]);
    u64::from_be_bytes(b)
}

#[inline]
pub fn put_le_u16(buf: &mut [u8], off: usize, v: u16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

#[inline]
pub fn put_le_u32(buf: &mut [u8], off: usize, v: u32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

#[inline]
pub fn put_le_u64(buf: &mut [u8], off: usize, v: u64) {
    buf[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

#[inline]
pub fn put_be_u32(buf: &mut [u8], off: usize, v: u32) {
    buf[off..off + 4].copy_from_slice(&v.to_be_bytes());
}

/// True when every byte of `buf` is zero.
#[inline]
pub fn all_zero(buf: &[u8]) -> bool {
    buf.iter().all(|&b| b == 0)
}

/// Intersection of two half-open byte ranges, if non-empty.
pub fn range_overlap(a: (u64, u64), b: (u64, u64)) -> Option<(u64, u64)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo < hi {
        Some((lo, hi))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endian_readers_round_trip() {
        let mut buf = [0u8; 16];
        put_le_u32(&mut buf, 2, 0xDEAD_BEEF);
        assert_eq!(le_u32(&buf, 2), 0xDEAD_BEEF);
        put_le_u64(&mut buf, 8, u64::MAX - 7);
        assert_eq!(le_u64(&buf, 8), u64::MAX - 7);
        put_be_u32(&mut buf, 0, 0xC03B_3998);
        assert_eq!(be_u32(&buf, 0), 0xC03B_3998);
        assert_eq!(be_u16(&buf, 0), 0xC03B);
    }

    #[test]
    fn overlap_cases() {
        assert_eq!(range_overlap((0, 10), (5, 20)), Some((5, 10)));
        assert_eq!(range_overlap((0, 10), (10, 20)), None);
        assert_eq!(range_overlap((3, 4), (0, 100)), Some((3, 4)));
        assert_eq!(range_overlap((7, 7), (0, 100)), None);
    }
}
