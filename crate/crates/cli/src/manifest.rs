use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsg_core::config::KvConfig;
use tsg_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, kept next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Config entries after flag overrides. Replays use these instead of
    /// re-reading the config file.
    pub config: KvConfig,
    /// Every setting the command ran with, defaults included.
    pub resolved: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    /// Output file names, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_clock_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replayed_from: Option<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{} is not a run manifest: {e}", path.display())))
    }
}
