//! Atomic output writing and the run manifest.
//!
//! Every output file is written through a temporary file in the target
//! directory and renamed into place, so readers never observe partial
//! content. The manifest records the command, the resolved configuration,
//! the base seed, wall-clock bounds, and a SHA-256 digest of every output,
//! making reruns checkable byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use meg_enum_core::{Error, Result};
use sha2::{Digest, Sha256};

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Collects output files for one command run and finishes with a manifest.
pub struct OutputWriter {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
    started_unix_s: u64,
}

impl OutputWriter {
    /// Create the output directory (if needed) and start the run clock.
    pub fn new(dir: &Path) -> Result<OutputWriter> {
        std::fs::create_dir_all(dir)?;
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            digests: BTreeMap::new(),
            started_unix_s: unix_seconds(),
        })
    }

    /// Write one output file atomically and record its digest.
    pub fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(self.dir.join(name)).map_err(|e| Error::Io(e.error))?;
        self.digests.insert(name.to_string(), hex::encode(Sha256::digest(text.as_bytes())));
        log::info!("wrote {}", self.dir.join(name).display());
        Ok(())
    }

    /// Write `manifest.json` describing the whole run.
    pub fn finish(
        self,
        command: &str,
        config: serde_json::Value,
        base_seed: u64,
    ) -> Result<()> {
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "base_seed": base_seed,
            "started_unix_s": self.started_unix_s,
            "finished_unix_s": unix_seconds(),
            "outputs": self.digests,
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidInput(format!("manifest serialization failed: {e}")))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(self.dir.join("manifest.json")).map_err(|e| Error::Io(e.error))?;
        log::info!("wrote {}", self.dir.join("manifest.json").display());
        Ok(())
    }
}
