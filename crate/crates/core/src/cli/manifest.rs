use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory for outputs; as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    fn of(path: String, data: &[u8]) -> Self {
        Self {
            path,
            sha256: sha256_hex(data),
            bytes: data.len() as u64,
        }
    }
}

/// Record of one CLI run: what went in, what came out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

/// Collects output files as they are written, then writes the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, subcommand: &str, config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let mut inputs = Vec::new();
        if let Some(p) = config {
            inputs.push(Artifact::of(p.display().to_string(), &std::fs::read(p)?));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                config: config.map(|p| p.display().to_string()),
                seed,
                output_dir: root.display().to_string(),
                inputs,
                outputs: Vec::new(),
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, data: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, data)?;
        self.manifest.outputs.push(Artifact::of(name.to_string(), data));
        Ok(path)
    }

    pub fn finish(self) -> Result<RunManifest> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises") + "\n";
        std::fs::write(self.root.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}
