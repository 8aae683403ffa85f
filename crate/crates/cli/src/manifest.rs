//! Run manifests and atomic output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// One manifest per run. Holds no timestamps, so reruns are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi: Option<bool>,
}

impl RunManifest {
    pub fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            multi: None,
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn output(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Writes `<primary>.manifest.json` next to the primary output.
    pub fn write(&self, primary: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(primary);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Validation(e.to_string()))?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a temporary file in the target directory, then renames,
/// so an interrupted run never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
