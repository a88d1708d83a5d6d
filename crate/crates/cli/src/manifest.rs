use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};

/// Build identifier in `git describe` style, fixed at compile time.
pub const BUILD_ID: &str = env!("DEPTHART_BUILD_ID");

/// Record of one invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved configuration, in the order it was given.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub build: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time: Duration,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Vec<(String, String)>, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config,
            seed,
            build: BUILD_ID.to_string(),
            outputs: Vec::new(),
            wall_time: Duration::ZERO,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand={}", self.subcommand);
        let _ = writeln!(s, "build={}", self.build);
        let _ = writeln!(s, "seed={}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        let _ = writeln!(s, "wall_time_s={:.3}", self.wall_time.as_secs_f64());
        s
    }

    /// Write to `path` via a temporary file and rename, after checking that
    /// every listed output exists.
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        for p in &self.outputs {
            if !p.exists() {
                bail!("manifest lists missing output {}", p.display());
            }
        }
        write_atomic(path, self.to_text().as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))
}
