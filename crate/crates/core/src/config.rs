//! Flat key=value configuration files.
//!
//! One setting per line, `#` comments, no sections. Unknown keys are errors
//! so a typo cannot silently disable protection.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::engine::{
    EngineConfig, FsKind, JournalMode, Policy, WatchSpec, DEFAULT_FREE_FLOOR_PERCENT,
    DEFAULT_LAMBDA_NS, DEFAULT_MAX_ZERO_RETRIES, DEFAULT_OMEGA_NS,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
}

/// Where the NBD server listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Listen {
    Unix(PathBuf),
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub image: PathBuf,
    pub capacity_bytes: Option<u64>,
    pub fs: FsKind,
    pub journal_mode: JournalMode,
    pub store: PathBuf,
    pub logs: BTreeMap<u32, String>,
    pub lambda_ms: u64,
    pub omega_ms: u64,
    pub max_zero_retries: u32,
    pub policy: Policy,
    pub listen: Option<Listen>,
    pub export_name: String,
    pub zero_injection: bool,
    pub free_floor_percent: u32,
    pub seed: Option<[u8; 32]>,
    pub block_size_bytes: u64,
}

impl Config {
    /// Engine view of this configuration.
    #[must_use]
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            fs: self.fs,
            journal_mode: self.journal_mode,
            lambda_ns: self.lambda_ms * 1_000_000,
            omega_ns: self.omega_ms * 1_000_000,
            max_zero_retries: self.max_zero_retries,
            free_floor_percent: self.free_floor_percent,
            policy: self.policy,
            watches: self
                .logs
                .iter()
                .map(|(&log_id, path)| WatchSpec { log_id, path: path.clone() })
                .collect(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), reason: format!("{v:?} is not true/false") }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| ConfigError::BadValue { key: key.into(), reason: format!("{e}") })
}

pub fn parse(text: &str) -> Result<Config, ConfigError> {
    let mut image = None;
    let mut capacity_bytes = None;
    let mut fs = None;
    let mut journal_mode = None;
    let mut store = None;
    let mut logs: BTreeMap<u32, String> = BTreeMap::new();
    let mut lambda_ms = None;
    let mut omega_ms = None;
    let mut max_zero_retries = None;
    let mut policy = None;
    let mut listen = None;
    let mut export_name = None;
    let mut zero_injection = None;
    let mut free_floor_percent = None;
    let mut seed = None;
    let mut block_size_bytes = None;

    macro_rules! set_once {
        ($slot:ident, $key:expr, $value:expr) => {{
            if $slot.replace($value).is_some() {
                return Err(ConfigError::Duplicate($key.to_string()));
            }
        }};
    }

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
        }
        match key {
            "image" => set_once!(image, key, PathBuf::from(value)),
            "capacity_bytes" => set_once!(capacity_bytes, key, parse_num::<u64>(key, value)?),
            "fs" => set_once!(
                fs,
                key,
                match value {
                    "ext4" => FsKind::Ext4,
                    "exfat" => FsKind::Exfat,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("{value:?} is not ext4/exfat"),
                        })
                    }
                }
            ),
            "journal_mode" => set_once!(
                journal_mode,
                key,
                match value {
                    "none" => JournalMode::None,
                    "ordered" => JournalMode::Ordered,
                    "data" => JournalMode::DataJournal,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("{value:?} is not none/ordered/data"),
                        })
                    }
                }
            ),
            "store" => set_once!(store, key, PathBuf::from(value)),
            "lambda_ms" => set_once!(lambda_ms, key, parse_num::<u64>(key, value)?),
            "omega_ms" => set_once!(omega_ms, key, parse_num::<u64>(key, value)?),
            "max_zero_retries" => {
                set_once!(max_zero_retries, key, parse_num::<u32>(key, value)?)
            }
            "policy" => set_once!(
                policy,
                key,
                match value {
                    "read_only" => Policy::ReadOnlyRemount,
                    "honeypot" => Policy::Honeypot,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("{value:?} is not read_only/honeypot"),
                        })
                    }
                }
            ),
            "listen" => {
                let l = if let Some(p) = value.strip_prefix("unix:") {
                    Listen::Unix(PathBuf::from(p))
                } else if let Some(a) = value.strip_prefix("tcp:") {
                    Listen::Tcp(a.to_string())
                } else {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("{value:?} must start with unix: or tcp:"),
                    });
                };
                set_once!(listen, key, l)
            }
            "export" => set_once!(export_name, key, value.to_string()),
            "zero_injection" => set_once!(zero_injection, key, parse_bool(key, value)?),
            "free_floor_percent" => {
                let pct: u32 = parse_num(key, value)?;
                if pct > 50 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("{pct}% floor is not sane"),
                    });
                }
                set_once!(free_floor_percent, key, pct)
            }
            "seed_hex" => {
                let bytes = hex::decode(value).map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?;
                let arr: [u8; 32] = bytes.try_into().map_err(|v: Vec<u8>| {
                    ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("need 32 bytes, got {}", v.len()),
                    }
                })?;
                set_once!(seed, key, arr)
            }
            "block_size_bytes" => {
                let n: u64 = parse_num(key, value)?;
                if !n.is_power_of_two() || !(512..=65536).contains(&n) {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("{n} is not a power of two in [512, 65536]"),
                    });
                }
                set_once!(block_size_bytes, key, n)
            }
            _ => {
                if let Some(id) = key.strip_prefix("log.") {
                    let log_id: u32 = id.parse().map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("{id:?} is not a u32 log id"),
                    })?;
                    if log_id >= u32::MAX - 1 {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: "ids above 4294967293 are reserved".into(),
                        });
                    }
                    if value.trim_start_matches('/').contains('/') {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("{value:?} is not root-level"),
                        });
                    }
                    if logs.insert(log_id, value.to_string()).is_some() {
                        return Err(ConfigError::Duplicate(key.to_string()));
                    }
                } else {
                    return Err(ConfigError::UnknownKey { line, key: key.to_string() });
                }
            }
        }
    }

    let cfg = Config {
        image: image.ok_or(ConfigError::Missing("image"))?,
        capacity_bytes,
        fs: fs.ok_or(ConfigError::Missing("fs"))?,
        journal_mode: journal_mode.unwrap_or(JournalMode::None),
        store: store.ok_or(ConfigError::Missing("store"))?,
        logs,
        lambda_ms: lambda_ms.unwrap_or(DEFAULT_LAMBDA_NS / 1_000_000),
        omega_ms: omega_ms.unwrap_or(DEFAULT_OMEGA_NS / 1_000_000),
        max_zero_retries: max_zero_retries.unwrap_or(DEFAULT_MAX_ZERO_RETRIES),
        policy: policy.unwrap_or(Policy::ReadOnlyRemount),
        listen,
        export_name: export_name.unwrap_or_default(),
        zero_injection: zero_injection.unwrap_or(false),
        free_floor_percent: free_floor_percent.unwrap_or(DEFAULT_FREE_FLOOR_PERCENT),
        seed,
        block_size_bytes: block_size_bytes.unwrap_or(4096),
    };
    if cfg.logs.is_empty() {
        return Err(ConfigError::Missing("log.<id>"));
    }
    if cfg.fs == FsKind::Exfat && cfg.journal_mode != JournalMode::None {
        return Err(ConfigError::BadValue {
            key: "journal_mode".into(),
            reason: "exfat has no journal".into(),
        });
    }
    if cfg.lambda_ms == 0 || cfg.omega_ms == 0 {
        return Err(ConfigError::BadValue {
            key: "lambda_ms".into(),
            reason: "timing windows must be nonzero".into(),
        });
    }
    Ok(cfg)
}
