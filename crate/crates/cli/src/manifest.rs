use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one invocation, written as `manifest.json` in the output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration (file plus flag overrides).
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    /// Elapsed time; the only field that differs between identical runs.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub epismc: &'static str,
    pub manifest_format: u32,
}

pub fn config_hash<T: Serialize>(effective: &T) -> Result<String> {
    let bytes = serde_json::to_vec(effective)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Recorder {
    command: String,
    hash: String,
    seed: u64,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new<T: Serialize>(command: &str, effective: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            hash: config_hash(effective)?,
            seed,
            started: Instant::now(),
            outputs: vec![],
        })
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        let mut outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
            .collect();
        outputs.sort();
        outputs.dedup();
        let m = RunManifest {
            command: self.command,
            config_hash: self.hash,
            seed: self.seed,
            versions: Versions {
                epismc: env!("CARGO_PKG_VERSION"),
                manifest_format: 1,
            },
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}
