use std::path::Path;

use super::io::write_atomic;
use crate::autodiff::ParamVector;
use crate::diffusion::{Architecture, NoisePredictor, ScheduleDescriptor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "RSALN1";

/// Parameters plus the descriptors needed to interpret them.
///
/// On disk: four newline-terminated header lines
///
/// ```text
/// RSALN1
/// arch mlp concepts=10 concept_dim=4 time_dim=8 hidden=64
/// d 5290
/// schedule vp steps=50 beta_min=0.0001 beta_max=0.2 loss_weight=0.00390625
/// ```
///
/// followed by `d` little-endian f64 values in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub schedule: ScheduleDescriptor,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(arch: Architecture, schedule: ScheduleDescriptor, params: ParamVector) -> Result<Self> {
        if params.dim() != arch.param_count() {
            return Err(Error::Config(format!(
                "{} parameters do not fit architecture with {}",
                params.dim(),
                arch.param_count()
            )));
        }
        Ok(Checkpoint { arch, schedule, params })
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = format!(
            "{MAGIC}\narch {}\nd {}\nschedule {}\n",
            self.arch.descriptor(),
            self.params.dim(),
            self.schedule.describe()
        );
        let mut out = header.into_bytes();
        out.reserve(8 * self.params.dim());
        for v in self.params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], source: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: source.to_path_buf(),
            reason,
        };
        let mut rest = bytes;
        let mut line = |what: &str| -> Result<String> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fail(format!("truncated header, missing {what} line")))?;
            let text = std::str::from_utf8(&rest[..end])
                .map_err(|_| fail(format!("{what} line is not text")))?
                .to_string();
            rest = &rest[end + 1..];
            Ok(text)
        };
        let magic = line("magic").map_err(|_| fail(format!("bad header: expected magic {MAGIC}")))?;
        if magic != MAGIC {
            return Err(fail(format!("bad header: expected magic {MAGIC}, found {:?}", truncate(&magic))));
        }
        let field = |text: String, key: &str| -> Result<String> {
            text.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| fail(format!("bad header: expected '{key}' line, found {:?}", truncate(&text))))
        };
        let arch_text = field(line("arch")?, "arch")?;
        let d_text = field(line("d")?, "d")?;
        let schedule_text = field(line("schedule")?, "schedule")?;
        let arch = Architecture::parse_descriptor(&arch_text).map_err(|e| fail(format!("bad header: {e}")))?;
        let d: usize = d_text
            .parse()
            .map_err(|_| fail(format!("bad header: parameter count {d_text:?}")))?;
        let schedule = ScheduleDescriptor::parse(&schedule_text).map_err(|e| fail(format!("bad header: {e}")))?;
        if d != arch.param_count() {
            return Err(fail(format!(
                "header declares {d} parameters but the architecture has {}",
                arch.param_count()
            )));
        }
        if rest.len() != 8 * d {
            return Err(fail(format!("payload is {} bytes, expected {}", rest.len(), 8 * d)));
        }
        let params = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Checkpoint {
            arch,
            schedule,
            params: ParamVector::new(params),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Rejects checkpoints whose descriptors differ from the run's.
    pub fn ensure_compatible(&self, arch: &Architecture, schedule: &ScheduleDescriptor, source: &Path) -> Result<()> {
        if self.arch != *arch {
            return Err(Error::Checkpoint {
                path: source.to_path_buf(),
                reason: format!(
                    "architecture '{}' does not match the configured '{}'",
                    self.arch.descriptor(),
                    arch.descriptor()
                ),
            });
        }
        if self.schedule != *schedule {
            return Err(Error::Checkpoint {
                path: source.to_path_buf(),
                reason: format!(
                    "schedule '{}' does not match the configured '{}'",
                    self.schedule.describe(),
                    schedule.describe()
                ),
            });
        }
        Ok(())
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(32).collect()
}
