//! Deterministic output files and the content-hash manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Collects every file written by a command so a manifest can list them.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records a file that was written by library code.
    pub fn track(&mut self, name: &str) -> PathBuf {
        self.written.push(PathBuf::from(name));
        self.path(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.track(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write_text(name, &to_pretty_json(value))
    }

    pub fn write_json_lines<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut text = String::new();
        for row in rows {
            text.push_str(&serde_json::to_string(row).expect("row serializes"));
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    /// Writes `manifest.json` with the SHA-256 of every tracked file.
    pub fn write_manifest(&mut self) -> Result<PathBuf> {
        let mut names: Vec<PathBuf> = self.written.clone();
        names.sort();
        names.dedup();
        let mut files = Vec::with_capacity(names.len());
        for name in names {
            let path = self.root.join(&name);
            let bytes =
                std::fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
            files.push(ManifestEntry {
                path: name.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest { files };
        let path = self.root.join("manifest.json");
        std::fs::write(&path, to_pretty_json(&manifest))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct Manifest {
    files: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

pub fn to_pretty_json(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}
