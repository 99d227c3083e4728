//! Run manifest: what was run, from which configuration, and what it wrote.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the input config file bytes (of the embedded defaults when
    /// no file was given).
    pub config_sha256: String,
    pub toolkit_version: String,
    /// Wall-clock at completion (seconds since the Unix epoch) and the run's
    /// elapsed time. These vary run to run by nature; every other artifact is
    /// a pure function of (config, seed).
    pub unix_time_s: u64,
    pub elapsed_ms: u64,
    /// Artifact file names, relative to the output directory.
    pub files: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn new(subcommand: &str, config_bytes: &[u8], started: SystemTime) -> Self {
        Self {
            subcommand: subcommand.to_owned(),
            config_sha256: sha256_hex(config_bytes),
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            unix_time_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_ms: started.elapsed().map(|d| d.as_millis() as u64).unwrap_or(0),
            files: Vec::new(),
        }
    }

    /// Serialize and write `manifest.json` atomically: the full contents land
    /// in a temporary file first and are renamed into place.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("manifest serialization failed: {e}")))?;
        let tmp = out_dir.join("manifest.json.tmp");
        let path = out_dir.join("manifest.json");
        std::fs::write(&tmp, body.as_bytes())
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| CliError::runtime(format!("cannot finalize {}: {e}", path.display())))?;
        Ok(())
    }
}
