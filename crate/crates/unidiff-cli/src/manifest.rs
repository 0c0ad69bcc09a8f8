//! Run manifest written next to every command's outputs.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use unidiff_core::error::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub dtype: String,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub version: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: Option<&Path>,
        seed: Option<u64>,
        threads: usize,
        outputs: Vec<String>,
    ) -> Self {
        let config_sha256 = config.and_then(|p| file_sha256(p).ok());
        RunManifest {
            command: command.to_string(),
            config_path: config.map(|p| p.display().to_string()),
            config_sha256,
            seed,
            dtype: "f32".to_string(),
            threads,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("run_manifest.json"),
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(())
    }
}
