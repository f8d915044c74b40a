use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use epi_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest";

/// `git describe` at build time, else the package version.
pub const VERSION: &str = env!("EPI_VERSION");

/// Run record written to `<out>/manifest` before any work starts and
/// rewritten with the finish time once the command succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn begin(command: &str, cfg: &TrainConfig, seed: u64, out: &Path, checkpoint: Option<&Path>) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let m = Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            seed,
            out_dir: out.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            checkpoint: checkpoint.map(Path::to_path_buf),
            config: cfg.clone(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        std::fs::write(self.out_dir.join(MANIFEST), text).context("writing manifest")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
