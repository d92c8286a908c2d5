use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub created: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// A fresh output directory that records every file written into it.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    created: String,
    seed: u64,
    files: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>[-k]`.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self, CliError> {
        let now = chrono::Local::now();
        let stamp = now.format("%Y%m%d-%H%M%S%.3f").to_string();
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        let base = root.join(format!("{command}-{stamp}"));
        let mut path = base.clone();
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                Err(e) => return Err(io(&path, e)),
            }
        }
        Ok(Self {
            path,
            command: command.to_string(),
            created: now.to_rfc3339(),
            seed,
            files: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Registers a file that was written by other code.
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes the manifest with a content hash of every recorded file.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut files = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let p = self.file(name);
            let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
            files.push(ManifestEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            command: self.command,
            created: self.created,
            seed: self.seed,
            files,
        };
        let p = self.path.join(MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(|e| io(&p, e))?;
        Ok(self.path)
    }
}
