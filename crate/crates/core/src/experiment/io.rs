use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming the directory reports and the manifest go to.
pub const RUN_DIR_ENV: &str = "RESALIGN_RUN_DIR";
pub const MANIFEST: &str = "manifest.tsv";

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// One row of the CSV report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub phase: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub seed: u64,
}

impl ReportRow {
    pub fn new(run_id: &str, phase: &str, step: usize, metric: &str, value: f64, seed: u64) -> Self {
        ReportRow {
            run_id: run_id.to_string(),
            phase: phase.to_string(),
            step,
            metric: metric.to_string(),
            value,
            std_error: None,
            seed,
        }
    }

    pub fn with_error(mut self, std_error: f64) -> Self {
        self.std_error = Some(std_error);
        self
    }
}

pub const REPORT_COLUMNS: [&str; 7] = ["run_id", "phase", "step", "metric", "value", "std_error", "seed"];

/// CSV with a fixed header; a missing standard error is an empty field.
pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let wrap = |e: csv::Error| Error::Numeric(format!("writing report: {e}"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(wrap)?;
    for row in rows {
        w.serialize(row).map_err(wrap)?;
    }
    w.into_inner()
        .map_err(|e| Error::Numeric(format!("writing report: {e}")))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let parse = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse(e.to_string()))?;
    let headers = r.headers().map_err(|e| parse(e.to_string()))?.clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(parse(format!("unexpected header {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| parse(e.to_string())))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-only output directory. New artifacts never replace existing ones
/// and each is logged in `manifest.tsv` with its SHA-256.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    /// The directory named by the environment, or the working directory.
    pub fn from_env() -> Result<Self> {
        Self::new(std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `<root>/<stem>.<ext>`, or `<root>/<stem>.<n>.<ext>` with the smallest
    /// `n` not yet taken.
    pub fn fresh_path(&self, stem: &str, ext: &str) -> PathBuf {
        let first = self.root.join(format!("{stem}.{ext}"));
        if !first.exists() {
            return first;
        }
        (1..)
            .map(|n| self.root.join(format!("{stem}.{n}.{ext}")))
            .find(|p| !p.exists())
            .expect("unbounded search")
    }

    /// Writes a new artifact and records it in the manifest.
    pub fn publish(&self, command: &str, stem: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.fresh_path(stem, ext);
        write_atomic(&path, bytes)?;
        self.record(command, &path, bytes)?;
        Ok(path)
    }

    /// Appends `command  artifact  sha256  bytes` to the manifest. Artifacts
    /// inside the run directory are listed relative to it.
    pub fn record(&self, command: &str, artifact: &Path, bytes: &[u8]) -> Result<()> {
        let manifest = self.root.join(MANIFEST);
        let fresh = !manifest.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Error::io(&manifest, e))?;
        let mut line = String::new();
        if fresh {
            line.push_str("command\tartifact\tsha256\tbytes\n");
        }
        let shown = artifact.strip_prefix(&self.root).unwrap_or(artifact);
        line.push_str(&format!(
            "{command}\t{}\t{}\t{}\n",
            shown.display(),
            sha256_hex(bytes),
            bytes.len()
        ));
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&manifest, e))
    }
}
