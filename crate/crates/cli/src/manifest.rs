//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub master_seed: u64,
    pub config: Config,
    /// File name to hex sha256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

/// Writes files into one directory and records their checksums.
pub struct OutDir {
    dir: PathBuf,
    started: Instant,
    outputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Writes the resolved config and the manifest; neither is checksummed.
    pub fn finish(self, command: &str, cfg: &Config) -> io::Result<RunManifest> {
        fs::write(self.dir.join(CONFIG_FILE), cfg.to_toml())?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seed: cfg.run.master_seed,
            config: cfg.clone(),
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        fs::write(self.dir.join(MANIFEST_FILE), json)?;
        Ok(manifest)
    }
}
