//! Run configuration, on-disk formats and the pipeline stages the command
//! line drives.

mod checkpoint;
pub mod commands;
mod config;
mod io;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{AttackSettings, DataSettings, OutputSettings, RunConfig};
pub use io::{read_report, report_csv, sha256_hex, write_atomic, ReportRow, RunDir, MANIFEST, REPORT_COLUMNS, RUN_DIR_ENV};
