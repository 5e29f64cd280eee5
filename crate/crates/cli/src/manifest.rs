use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srd_core::ModelConfig;

use crate::commands::Invocation;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory for outputs, as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: impl Into<String>, contents: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        Ok(Self::of(abs.display().to_string(), &bytes))
    }
}

/// Record of one command run, enough to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub invocation: Invocation,
    pub config: ModelConfig,
    pub seed: u64,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    pub worker_threads: usize,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::config("manifest", format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects the files a command writes into its output directory.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root.display(), e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(path.display(), e))?;
        self.written.push(Artifact::of(name, contents));
        Ok(path)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn finish(self) -> Vec<Artifact> {
        self.written
    }
}
