use std::path::{Path, PathBuf};

use diffact_core::rng::sha256_hex;
use diffact_core::Result;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config_fingerprint: String,
    config: RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn entry(path: &Path) -> Result<FileEntry> {
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: sha256_hex(&std::fs::read(path)?),
    })
}

impl RunManifest {
    pub fn new(command: &'static str, config: &RunConfig, fingerprint: String) -> Self {
        Self {
            tool: "diffact",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed,
            config_fingerprint: fingerprint,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(entry(path)?);
        Ok(())
    }

    /// Checksums `paths` and writes `<out>/<command>.manifest.json`.
    pub fn write(mut self, out: &Path, paths: &[PathBuf]) -> Result<PathBuf> {
        for p in paths {
            self.outputs.push(entry(p)?);
        }
        let path = out.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}
