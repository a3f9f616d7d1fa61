//! Run directories: every artifact a subcommand writes is recorded, and a
//! `run_manifest.json` listing them (with SHA-256 digests) closes the run.
//! The manifest's `metadata.created_unix` is the only time-dependent byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Metadata {
    created_unix: u64,
    version: &'static str,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    files: Vec<FileEntry>,
    metadata: Metadata,
}

pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, content: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?;
        self.record(name);
        Ok(())
    }

    /// Registers a file some other writer already produced.
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn finish(self, command: &str) -> Result<PathBuf> {
        let mut files = Vec::with_capacity(self.files.len());
        let mut names = self.files;
        names.sort();
        for name in names {
            let bytes = fs::read(self.root.join(&name)).with_context(|| format!("reading back {name}"))?;
            files.push(FileEntry {
                path: name,
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        let manifest = RunManifest {
            command,
            files,
            metadata: Metadata {
                created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                version: env!("CARGO_PKG_VERSION"),
            },
        };
        let p = self.root.join(MANIFEST_NAME);
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}
