//! Sealed append-only log store with a forward-secure HMAC key ratchet.
//!
//! Every mirrored append becomes one fixed-size seal record bound to the key
//! epoch it was written under. The signing key advances by one ratchet step
//! per record and the previous key is destroyed by overwriting its only
//! persistent copy in place, so a later compromise yields no key capable of
//! recomputing an earlier record's MAC.
//!
//! Store layout under the store directory:
//!
//! ```text
//! seal.log          68-byte records, one per sealed append
//! state.bin         current key epoch (the only place a live key rests)
//! auditor.key       K_0, written once at init for the off-host verifier
//! logs/<id>.log     mirrored payload bytes per watched log
//! incidents.log     payload bytes of sealed incident records
//! divergence.jsonl  unsealed post-freeze observations
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;
use zeroize::Zeroize;

use crate::util::{le_u32, le_u64, put_le_u32, put_le_u64};

type HmacSha256 = Hmac<Sha256>;

pub const SEAL_RECORD_LEN: usize = 68;
pub const SEAL_HEADER_LEN: usize = 36;
pub const KEY_LEN: usize = 32;

/// Reserved log id marking the final record of a frozen store.
pub const FREEZE_LOG_ID: u32 = u32::MAX;
/// Reserved log id for sealed incident reports.
pub const INCIDENT_LOG_ID: u32 = u32::MAX - 1;

const STATE_MAGIC: &[u8; 8] = b"WBSEAL1\0";
const STATE_LEN: usize = 57;
const RATCHET_LABEL: &[u8] = b"ratchet";

#[derive(Debug, Error)]
pub enum SealError {
    #[error("store already initialized at {0}")]
    AlreadyInitialized(PathBuf),
    #[error("store state: {0}")]
    BadState(String),
    #[error("store is frozen")]
    Frozen,
    #[error("log {log_id} file length {actual} disagrees with sealed length {expected}")]
    LogOutOfStep { log_id: u32, expected: u64, actual: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Signing key with zeroize-on-drop semantics.
pub struct SealKey([u8; KEY_LEN]);

impl SealKey {
    #[must_use]
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    #[must_use]
    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// One ratchet step: K_{i+1} = HMAC(K_i, "ratchet"). The old key bytes
    /// are overwritten before return.
    pub fn advance(&mut self) {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(RATCHET_LABEL);
        let digest = mac.finalize().into_bytes();
        self.0.zeroize();
        self.0.copy_from_slice(&digest);
    }
}

impl Drop for SealKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl Clone for SealKey {
    fn clone(&self) -> Self {
        Self(self.0)
    }
}

/// One decoded seal record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SealRecord {
    pub record_index: u64,
    pub log_id: u32,
    pub key_index: u64,
    pub offset: u64,
    pub length: u64,
    pub mac: [u8; 32],
}

impl SealRecord {
    #[must_use]
    pub fn decode(raw: &[u8; SEAL_RECORD_LEN]) -> Self {
        let mut mac = [0u8; 32];
        mac.copy_from_slice(&raw[36..68]);
        Self {
            record_index: le_u64(raw, 0),
            log_id: le_u32(raw, 8),
            key_index: le_u64(raw, 12),
            offset: le_u64(raw, 20),
            length: le_u64(raw, 28),
            mac,
        }
    }

    #[must_use]
    pub fn encode(&self) -> [u8; SEAL_RECORD_LEN] {
        let mut raw = [0u8; SEAL_RECORD_LEN];
        put_le_u64(&mut raw, 0, self.record_index);
        put_le_u32(&mut raw, 8, self.log_id);
        put_le_u64(&mut raw, 12, self.key_index);
        put_le_u64(&mut raw, 20, self.offset);
        put_le_u64(&mut raw, 28, self.length);
        raw[36..68].copy_from_slice(&self.mac);
        raw
    }

    #[must_use]
    pub fn is_freeze_marker(&self) -> bool {
        self.log_id == FREEZE_LOG_ID
    }
}

/// MAC over the record header (first 36 bytes) followed by the payload.
#[must_use]
pub fn seal_mac(key: &SealKey, header: &[u8; SEAL_HEADER_LEN], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key.bytes()).expect("hmac accepts any key length");
    mac.update(header);
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub struct SealStore {
    dir: PathBuf,
    key: SealKey,
    key_index: u64,
    record_index: u64,
    frozen: bool,
    seal_file: File,
    /// Authenticated byte count per log id, rebuilt from seal.log at open.
    log_lengths: BTreeMap<u32, u64>,
}

impl SealStore {
    /// Creates a fresh store seeded with K_0. K_0 is also written to
    /// `auditor.key` for the off-host verifier; the host is expected to hand
    /// that file away and delete it before exposure.
    pub fn init(dir: &Path, k0: [u8; KEY_LEN]) -> Result<Self, SealError> {
        let state_path = dir.join("state.bin");
        if state_path.exists() {
            return Err(SealError::AlreadyInitialized(dir.to_path_buf()));
        }
        fs::create_dir_all(dir.join("logs"))?;
        let mut keyfile = File::create(dir.join("auditor.key"))?;
        keyfile.write_all(&k0)?;
        keyfile.sync_all()?;
        let seal_file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(dir.join("seal.log"))?;
        let mut store = Self {
            dir: dir.to_path_buf(),
            key: SealKey::new(k0),
            key_index: 0,
            record_index: 0,
            frozen: false,
            seal_file,
            log_lengths: BTreeMap::new(),
        };
        store.persist_state()?;
        Ok(store)
    }

    /// Opens an existing store from its state file.
    ///
    /// If a crash landed between appending a seal record and persisting the
    /// advanced state, the state lags the file; the ratchet is fast-forwarded
    /// to match. A trailing partial record is discarded only when the state
    /// confirms it never completed.
    pub fn open(dir: &Path) -> Result<Self, SealError> {
        let mut raw = Vec::new();
        File::open(dir.join("state.bin"))
            .map_err(|e| SealError::BadState(format!("state.bin: {e}")))?
            .read_to_end(&mut raw)?;
        if raw.len() != STATE_LEN || &raw[..8] != STATE_MAGIC {
            raw.zeroize();
            return Err(SealError::BadState("malformed state.bin".into()));
        }
        let key_index = le_u64(&raw, 8);
        let record_index = le_u64(&raw, 16);
        let frozen = raw[24] != 0;
        let mut key_bytes = [0u8; KEY_LEN];
        key_bytes.copy_from_slice(&raw[25..57]);
        raw.zeroize();
        if key_index != record_index {
            key_bytes.zeroize();
            return Err(SealError::BadState(format!(
                "key index {key_index} != record index {record_index}"
            )));
        }

        let seal_file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(dir.join("seal.log"))
            .map_err(|e| SealError::BadState(format!("seal.log: {e}")))?;
        let seal_len = seal_file.metadata()?.len();
        let whole = seal_len / SEAL_RECORD_LEN as u64;
        let partial = seal_len % SEAL_RECORD_LEN as u64;
        if partial != 0 {
            if whole == record_index {
                seal_file.set_len(whole * SEAL_RECORD_LEN as u64)?;
            } else {
                return Err(SealError::BadState(format!(
                    "seal.log has a torn record but state expects {record_index} records"
                )));
            }
        }

        let mut store = Self {
            dir: dir.to_path_buf(),
            key: SealKey::new(key_bytes),
            key_index,
            record_index,
            frozen,
            seal_file,
            log_lengths: BTreeMap::new(),
        };
        store.rebuild_log_lengths(whole)?;

        if whole > store.record_index {
            for _ in store.record_index..whole {
                store.key.advance();
            }
            store.key_index = whole;
            store.record_index = whole;
            store.persist_state()?;
        }
        Ok(store)
    }

    fn rebuild_log_lengths(&mut self, records: u64) -> Result<(), SealError> {
        self.seal_file.seek(SeekFrom::Start(0))?;
        let mut raw = [0u8; SEAL_RECORD_LEN];
        for _ in 0..records {
            self.seal_file.read_exact(&mut raw)?;
            let rec = SealRecord::decode(&raw);
            if rec.is_freeze_marker() {
                self.frozen = true;
                continue;
            }
            *self.log_lengths.entry(rec.log_id).or_insert(0) += rec.length;
        }
        self.seal_file.seek(SeekFrom::End(0))?;
        Ok(())
    }

    fn persist_state(&mut self) -> Result<(), SealError> {
        let mut buf = [0u8; STATE_LEN];
        buf[..8].copy_from_slice(STATE_MAGIC);
        put_le_u64(&mut buf, 8, self.key_index);
        put_le_u64(&mut buf, 16, self.record_index);
        buf[24] = u8::from(self.frozen);
        buf[25..57].copy_from_slice(self.key.bytes());
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .open(self.dir.join("state.bin"))?;
        f.seek(SeekFrom::Start(0))?;
        f.write_all(&buf)?;
        f.set_len(STATE_LEN as u64)?;
        f.sync_all()?;
        buf.zeroize();
        Ok(())
    }

    #[must_use]
    pub fn record_index(&self) -> u64 {
        self.record_index
    }

    #[must_use]
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    #[must_use]
    pub fn authenticated_len(&self, log_id: u32) -> u64 {
        self.log_lengths.get(&log_id).copied().unwrap_or(0)
    }

    #[must_use]
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn payload_path(&self, log_id: u32) -> PathBuf {
        if log_id == INCIDENT_LOG_ID {
            self.dir.join("incidents.log")
        } else {
            self.dir.join("logs").join(format!("{log_id}.log"))
        }
    }

    /// Seals one append: payload lands at the authenticated end of its log
    /// file, then the record is written and the ratchet advances.
    pub fn append(&mut self, log_id: u32, data: &[u8]) -> Result<u64, SealError> {
        if self.frozen {
            return Err(SealError::Frozen);
        }
        if log_id == FREEZE_LOG_ID {
            return Err(SealError::BadState("reserved log id".into()));
        }
        let offset = self.authenticated_len(log_id);
        let path = self.payload_path(log_id);
        let mut payload = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let file_len = payload.metadata()?.len();
        if file_len != offset {
            return Err(SealError::LogOutOfStep { log_id, expected: offset, actual: file_len });
        }
        payload.write_all(data)?;
        payload.sync_data()?;
        self.write_record(log_id, offset, data)?;
        *self.log_lengths.entry(log_id).or_insert(0) += data.len() as u64;
        Ok(self.record_index - 1)
    }

    /// Seals an incident report. Callable right up to the freeze marker.
    pub fn append_incident(&mut self, report: &[u8]) -> Result<u64, SealError> {
        self.append(INCIDENT_LOG_ID, report)
    }

    /// Appends the freeze marker and locks the store. Idempotent.
    pub fn freeze(&mut self) -> Result<(), SealError> {
        if self.frozen {
            return Ok(());
        }
        self.write_record(FREEZE_LOG_ID, 0, &[])?;
        self.frozen = true;
        self.persist_state()?;
        Ok(())
    }

    fn write_record(&mut self, log_id: u32, offset: u64, data: &[u8]) -> Result<(), SealError> {
        let mut rec = SealRecord {
            record_index: self.record_index,
            log_id,
            key_index: self.key_index,
            offset,
            length: data.len() as u64,
            mac: [0u8; 32],
        };
        let encoded = rec.encode();
        let header: [u8; SEAL_HEADER_LEN] = encoded[..SEAL_HEADER_LEN].try_into().unwrap();
        rec.mac = seal_mac(&self.key, &header, data);
        self.seal_file.write_all(&rec.encode())?;
        self.seal_file.sync_data()?;
        self.key.advance();
        self.key_index += 1;
        self.record_index += 1;
        self.persist_state()?;
        Ok(())
    }

    /// Reads back sealed payload bytes. The range must lie inside the
    /// authenticated length.
    pub fn read_log_range(&self, log_id: u32, offset: u64, len: u64) -> Result<Vec<u8>, SealError> {
        let authenticated = self.authenticated_len(log_id);
        if offset + len > authenticated {
            return Err(SealError::BadState(format!(
                "range {offset}+{len} beyond authenticated length {authenticated} of log {log_id}"
            )));
        }
        let mut f = File::open(self.payload_path(log_id))?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Appends one line to the unsealed divergence journal. This is the only
    /// output channel that stays writable after freeze.
    pub fn append_divergence(&mut self, line: &str) -> Result<(), SealError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("divergence.jsonl"))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_data()?;
        Ok(())
    }
}

/// A single audit finding. The index is the seal record position where the
/// problem was observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditFailure {
    Structural { reason: String },
    IndexMismatch { index: u64, stored: u64 },
    KeyIndexMismatch { index: u64, stored: u64 },
    NonContiguous { index: u64, log_id: u32, expected_offset: u64, stored_offset: u64 },
    MacMismatch { index: u64, log_id: u32 },
    PayloadUnreadable { index: u64, log_id: u32 },
    RecordAfterFreeze { index: u64 },
    FreezeMarkerNotEmpty { index: u64 },
    LengthMismatch { log_id: u32, authenticated: u64, actual: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogAudit {
    pub records: u64,
    pub authenticated_len: u64,
    pub file_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditReport {
    pub records_verified: u64,
    pub frozen: bool,
    pub logs: BTreeMap<u32, LogAudit>,
    pub failures: Vec<AuditFailure>,
}

impl AuditReport {
    #[must_use]
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Verifies a store against K_0 alone, using only the files an auditor can
/// see. Every record's MAC is recomputed over the payload bytes the log
/// files hold today, so any post-hoc edit, reorder, truncation, or extension
/// of sealed history surfaces as a failure.
pub fn audit(dir: &Path, k0: [u8; KEY_LEN]) -> AuditReport {
    let mut report = AuditReport::default();
    let mut key = SealKey::new(k0);

    let seal_raw = match fs::read(dir.join("seal.log")) {
        Ok(b) => b,
        Err(e) => {
            report.failures.push(AuditFailure::Structural { reason: format!("seal.log: {e}") });
            return report;
        }
    };
    if seal_raw.len() % SEAL_RECORD_LEN != 0 {
        report.failures.push(AuditFailure::Structural {
            reason: format!("seal.log length {} is not a record multiple", seal_raw.len()),
        });
        return report;
    }

    let mut expected_offsets: BTreeMap<u32, u64> = BTreeMap::new();
    let mut payload_cache: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    let total = (seal_raw.len() / SEAL_RECORD_LEN) as u64;

    for index in 0..total {
        let raw: [u8; SEAL_RECORD_LEN] = seal_raw
            [(index as usize) * SEAL_RECORD_LEN..][..SEAL_RECORD_LEN]
            .try_into()
            .unwrap();
        let rec = SealRecord::decode(&raw);

        if report.frozen {
            report.failures.push(AuditFailure::RecordAfterFreeze { index });
            break;
        }
        if rec.record_index != index {
            report.failures.push(AuditFailure::IndexMismatch { index, stored: rec.record_index });
            break;
        }
        if rec.key_index != index {
            report
                .failures
                .push(AuditFailure::KeyIndexMismatch { index, stored: rec.key_index });
            break;
        }

        let payload: &[u8] = if rec.is_freeze_marker() {
            if rec.length != 0 || rec.offset != 0 {
                report.failures.push(AuditFailure::FreezeMarkerNotEmpty { index });
                break;
            }
            &[]
        } else {
            let expected = expected_offsets.entry(rec.log_id).or_insert(0);
            if rec.offset != *expected {
                report.failures.push(AuditFailure::NonContiguous {
                    index,
                    log_id: rec.log_id,
                    expected_offset: *expected,
                    stored_offset: rec.offset,
                });
                break;
            }
            if !payload_cache.contains_key(&rec.log_id) {
                let path = if rec.log_id == INCIDENT_LOG_ID {
                    dir.join("incidents.log")
                } else {
                    dir.join("logs").join(format!("{}.log", rec.log_id))
                };
                payload_cache.insert(rec.log_id, fs::read(&path).unwrap_or_default());
            }
            let bytes = &payload_cache[&rec.log_id];
            let start = rec.offset as usize;
            let end = start + rec.length as usize;
            if end > bytes.len() {
                report.failures.push(AuditFailure::PayloadUnreadable { index, log_id: rec.log_id });
                break;
            }
            &bytes[start..end]
        };

        let header: [u8; SEAL_HEADER_LEN] = raw[..SEAL_HEADER_LEN].try_into().unwrap();
        let expect = seal_mac(&key, &header, payload);
        if expect != rec.mac {
            report.failures.push(AuditFailure::MacMismatch { index, log_id: rec.log_id });
            break;
        }

        if rec.is_freeze_marker() {
            report.frozen = true;
        } else {
            *expected_offsets.entry(rec.log_id).or_insert(0) += rec.length;
            let entry = report.logs.entry(rec.log_id).or_insert(LogAudit {
                records: 0,
                authenticated_len: 0,
                file_len: 0,
            });
            entry.records += 1;
            entry.authenticated_len += rec.length;
        }
        report.records_verified += 1;
        key.advance();
    }

    // Every payload file must end exactly at its authenticated length: a
    // longer file means bytes were appended outside the seal. Files the
    // records never mentioned are folded in at authenticated length zero,
    // so a seal.log cut back to a record boundary cannot orphan them.
    if report.failures.is_empty() {
        if let Ok(entries) = fs::read_dir(dir.join("logs")) {
            for entry in entries.flatten() {
                let name = entry.file_name();
                let name = name.to_string_lossy();
                match name.strip_suffix(".log").and_then(|stem| stem.parse::<u32>().ok()) {
                    Some(id) => {
                        report.logs.entry(id).or_insert(LogAudit {
                            records: 0,
                            authenticated_len: 0,
                            file_len: 0,
                        });
                    }
                    None => report.failures.push(AuditFailure::Structural {
                        reason: format!("unrecognized file {name} in logs/"),
                    }),
                }
            }
        }
        if dir.join("incidents.log").exists() {
            report.logs.entry(INCIDENT_LOG_ID).or_insert(LogAudit {
                records: 0,
                authenticated_len: 0,
                file_len: 0,
            });
        }
        for (log_id, entry) in &mut report.logs {
            let path = if *log_id == INCIDENT_LOG_ID {
                dir.join("incidents.log")
            } else {
                dir.join("logs").join(format!("{log_id}.log"))
            };
            entry.file_len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if entry.file_len != entry.authenticated_len {
                report.failures.push(AuditFailure::LengthMismatch {
                    log_id: *log_id,
                    authenticated: entry.authenticated_len,
                    actual: entry.file_len,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn k0() -> [u8; 32] {
        let mut k = [0u8; 32];
        for (i, b) in k.iter_mut().enumerate() {
            *b = i as u8;
        }
        k
    }

    /// RFC 4231 test case 2 anchors the HMAC-SHA-256 underneath the seal.
    #[test]
    fn hmac_reference_vector() {
        let mut mac = HmacSha256::new_from_slice(b"Jefe").unwrap();
        mac.update(b"what do ya want for nothing?");
        let out: [u8; 32] = mac.finalize().into_bytes().into();
        assert_eq!(
            hex::encode(out),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn ratchet_is_deterministic_and_one_way() {
        let mut a = SealKey::new(k0());
        let mut b = SealKey::new(k0());
        a.advance();
        b.advance();
        assert_eq!(a.bytes(), b.bytes());
        assert_ne!(a.bytes(), &k0());
        a.advance();
        assert_ne!(a.bytes(), b.bytes());
    }

    #[test]
    fn record_codec_round_trip() {
        let rec = SealRecord {
            record_index: 7,
            log_id: 3,
            key_index: 7,
            offset: 4096,
            length: 513,
            mac: [0xAB; 32],
        };
        assert_eq!(SealRecord::decode(&rec.encode()), rec);
    }

    #[test]
    fn append_audit_round_trip() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"first entry\n").unwrap();
        store.append(2, b"other log\n").unwrap();
        store.append(1, b"second entry\n").unwrap();
        let report = audit(tmp.path(), k0());
        assert!(report.ok(), "{:?}", report.failures);
        assert_eq!(report.records_verified, 3);
        assert_eq!(report.logs[&1].authenticated_len, 25);
        assert_eq!(report.logs[&2].records, 1);
        assert_eq!(
            fs::read(tmp.path().join("logs/1.log")).unwrap(),
            b"first entry\nsecond entry\n"
        );
    }

    #[test]
    fn reopen_continues_the_chain() {
        let tmp = TempDir::new().unwrap();
        {
            let mut store = SealStore::init(tmp.path(), k0()).unwrap();
            store.append(1, b"aaa").unwrap();
        }
        {
            let mut store = SealStore::open(tmp.path()).unwrap();
            assert_eq!(store.record_index(), 1);
            assert_eq!(store.authenticated_len(1), 3);
            store.append(1, b"bbb").unwrap();
        }
        let report = audit(tmp.path(), k0());
        assert!(report.ok(), "{:?}", report.failures);
        assert_eq!(report.records_verified, 2);
    }

    #[test]
    fn every_seal_byte_is_load_bearing() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"payload under test").unwrap();
        store.append(1, b"second").unwrap();
        let clean = fs::read(tmp.path().join("seal.log")).unwrap();
        for i in 0..clean.len() {
            let mut tampered = clean.clone();
            tampered[i] ^= 0x01;
            fs::write(tmp.path().join("seal.log"), &tampered).unwrap();
            let report = audit(tmp.path(), k0());
            assert!(!report.ok(), "flip at byte {i} went undetected");
        }
        fs::write(tmp.path().join("seal.log"), &clean).unwrap();
        assert!(audit(tmp.path(), k0()).ok());
    }

    #[test]
    fn payload_tamper_detected() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(4, b"hello sealed world").unwrap();
        let path = tmp.path().join("logs/4.log");
        let clean = fs::read(&path).unwrap();
        for i in 0..clean.len() {
            let mut tampered = clean.clone();
            tampered[i] ^= 0x80;
            fs::write(&path, &tampered).unwrap();
            let report = audit(tmp.path(), k0());
            assert!(
                matches!(report.failures[..], [AuditFailure::MacMismatch { index: 0, log_id: 4 }]),
                "flip at byte {i}: {:?}",
                report.failures
            );
        }
    }

    #[test]
    fn truncation_and_extension_detected() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(9, b"0123456789").unwrap();
        let path = tmp.path().join("logs/9.log");

        let clean = fs::read(&path).unwrap();
        fs::write(&path, &clean[..5]).unwrap();
        let report = audit(tmp.path(), k0());
        assert!(matches!(report.failures[..], [AuditFailure::PayloadUnreadable { .. }]));

        let mut extended = clean.clone();
        extended.extend_from_slice(b"rogue suffix");
        fs::write(&path, &extended).unwrap();
        let report = audit(tmp.path(), k0());
        assert!(matches!(
            report.failures[..],
            [AuditFailure::LengthMismatch { log_id: 9, authenticated: 10, actual: 22 }]
        ));
    }

    #[test]
    fn erased_seal_log_cannot_orphan_payload_files() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(3, b"history the attacker wants forgotten").unwrap();
        store.append_incident(b"report").unwrap();

        fs::write(tmp.path().join("seal.log"), []).unwrap();
        let report = audit(tmp.path(), k0());
        assert_eq!(report.records_verified, 0);
        let orphaned: Vec<u32> = report
            .failures
            .iter()
            .filter_map(|f| match f {
                AuditFailure::LengthMismatch { log_id, authenticated: 0, .. } => Some(*log_id),
                _ => None,
            })
            .collect();
        assert_eq!(orphaned, vec![3, INCIDENT_LOG_ID]);
    }

    #[test]
    fn foreign_file_in_logs_dir_is_flagged() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"payload").unwrap();
        fs::write(tmp.path().join("logs/stash.bin"), b"smuggled").unwrap();
        let report = audit(tmp.path(), k0());
        assert!(matches!(report.failures[..], [AuditFailure::Structural { .. }]));
    }

    #[test]
    fn freeze_marker_locks_the_store() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"before").unwrap();
        store.append_incident(b"tamper detected at block 7").unwrap();
        store.freeze().unwrap();
        assert!(store.is_frozen());
        assert!(matches!(store.append(1, b"after"), Err(SealError::Frozen)));
        store.freeze().unwrap();

        let report = audit(tmp.path(), k0());
        assert!(report.ok(), "{:?}", report.failures);
        assert!(report.frozen);
        assert_eq!(report.records_verified, 3);

        let reopened = SealStore::open(tmp.path()).unwrap();
        assert!(reopened.is_frozen());
    }

    #[test]
    fn record_after_freeze_marker_is_rejected() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"x").unwrap();
        store.freeze().unwrap();
        // Forge an extra record after the marker by replaying the last one.
        let seal = fs::read(tmp.path().join("seal.log")).unwrap();
        let mut forged = seal.clone();
        forged.extend_from_slice(&seal[..SEAL_RECORD_LEN]);
        fs::write(tmp.path().join("seal.log"), &forged).unwrap();
        let report = audit(tmp.path(), k0());
        assert!(matches!(report.failures[..], [AuditFailure::RecordAfterFreeze { index: 2 }]));
    }

    #[test]
    fn state_lag_recovers_by_fast_forward() {
        let tmp = TempDir::new().unwrap();
        let state_before;
        {
            let mut store = SealStore::init(tmp.path(), k0()).unwrap();
            store.append(1, b"one").unwrap();
            state_before = fs::read(tmp.path().join("state.bin")).unwrap();
            store.append(1, b"two").unwrap();
        }
        // Roll state.bin back one epoch, simulating a crash after the seal
        // write but before the state overwrite.
        fs::write(tmp.path().join("state.bin"), &state_before).unwrap();
        let mut store = SealStore::open(tmp.path()).unwrap();
        assert_eq!(store.record_index(), 2);
        store.append(1, b"three").unwrap();
        let report = audit(tmp.path(), k0());
        assert!(report.ok(), "{:?}", report.failures);
        assert_eq!(report.records_verified, 3);
    }

    #[test]
    fn torn_trailing_record_discarded_when_state_agrees() {
        let tmp = TempDir::new().unwrap();
        {
            let mut store = SealStore::init(tmp.path(), k0()).unwrap();
            store.append(1, b"whole").unwrap();
        }
        let mut seal = fs::read(tmp.path().join("seal.log")).unwrap();
        seal.extend_from_slice(&[0xEE; 20]);
        fs::write(tmp.path().join("seal.log"), &seal).unwrap();
        let store = SealStore::open(tmp.path()).unwrap();
        assert_eq!(store.record_index(), 1);
        assert!(audit(tmp.path(), k0()).ok());
    }

    #[test]
    fn divergence_journal_is_appendable_after_freeze() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.freeze().unwrap();
        store.append_divergence("{\"kind\":\"post_freeze_write\"}").unwrap();
        store.append_divergence("{\"kind\":\"another\"}").unwrap();
        let text = fs::read_to_string(tmp.path().join("divergence.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn reordering_sealed_records_detected() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"aa").unwrap();
        store.append(1, b"bb").unwrap();
        let seal = fs::read(tmp.path().join("seal.log")).unwrap();
        let mut swapped = Vec::new();
        swapped.extend_from_slice(&seal[SEAL_RECORD_LEN..]);
        swapped.extend_from_slice(&seal[..SEAL_RECORD_LEN]);
        fs::write(tmp.path().join("seal.log"), &swapped).unwrap();
        assert!(!audit(tmp.path(), k0()).ok());
    }

    #[test]
    fn log_file_out_of_step_refuses_append() {
        let tmp = TempDir::new().unwrap();
        let mut store = SealStore::init(tmp.path(), k0()).unwrap();
        store.append(1, b"sealed").unwrap();
        let path = tmp.path().join("logs/1.log");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"rogue").unwrap();
        drop(f);
        assert!(matches!(
            store.append(1, b"next"),
            Err(SealError::LogOutOfStep { log_id: 1, expected: 6, actual: 11 })
        ));
    }
}
