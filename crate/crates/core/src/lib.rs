//! Userspace write-once storage enforcement.
//!
//! A block image is exported over NBD while every committed write is tapped,
//! decoded against the filesystem it belongs to, and checked for being a
//! pure append to one of the watched log files. Valid appends are mirrored
//! into a sealed store whose records chain through a ratcheting HMAC key, so
//! history can be audited from the initial key alone. Anything that is not
//! an append raises a tamper indicator and freezes the store.

pub mod block;
pub mod config;
pub mod device;
pub mod engine;
pub mod exfat;
pub mod ext4;
pub mod hostsim;
pub mod jbd2;
pub mod mkfs;
pub mod nbd;
pub mod seal;
pub mod trace;
pub mod util;

pub use block::{BlockError, BlockImage, ImageOptions, ReadAt, WriteOp, SECTOR_SIZE};
pub use config::{Config, ConfigError, Listen};
pub use device::{monotonic_clock, replay, spawn_engine, Clock, EngineRunner, ReplayError};
pub use engine::{
    DeferReason, Engine, EngineConfig, EngineError, EngineEvent, ExtractionBasis, FsKind,
    GateState, Indicator, IndicatorKind, JournalMode, Policy, WatchSpec,
};
pub use nbd::{NbdError, Server, SessionStats, WriteGate};
pub use seal::{audit, AuditReport, SealError, SealStore};
pub use trace::{TraceError, TraceHeader, TraceReader, TraceRecord, TraceWriter};
