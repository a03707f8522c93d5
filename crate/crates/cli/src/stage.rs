//! Output staging and run manifests.
//!
//! Every command writes into a hidden staging directory under `--out` and
//! moves the files into place only once all of them exist; the manifest is
//! moved last. Dropping an uncommitted [`Stage`] deletes whatever was staged.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub file: String,
    /// `None` for files holding wall-clock measurements.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<OutputEntry>,
}

/// Reads an input file and records its hash.
#[derive(Debug, Default)]
pub struct Inputs {
    pub hashes: Vec<InputHash>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.hashes.push(InputHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?)
            .map_err(|_| CliError::format(format!("{}: not valid UTF-8", path.display())))
    }

    /// Records a file that a library loader reads itself.
    pub fn record(&mut self, path: &Path) -> Result<(), CliError> {
        self.read(path).map(|_| ())
    }
}

pub struct Stage {
    out: PathBuf,
    dir: PathBuf,
    created_out: bool,
    outputs: Vec<OutputEntry>,
    committed: bool,
}

impl Stage {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        let created_out = !out.exists();
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let dir = out.join(format!(".staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { out: out.to_path_buf(), dir, created_out, outputs: Vec::new(), committed: false })
    }

    fn put(&mut self, name: &str, bytes: &[u8], hashed: bool) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(OutputEntry { file: name.to_string(), sha256: hashed.then(|| sha256_hex(bytes)) });
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.put(name, bytes, true)
    }

    /// Stages a file whose content is not reproducible (timings).
    pub fn write_unhashed(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.put(name, bytes, false)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Moves every staged file into the output directory, manifest last.
    pub fn commit(
        mut self,
        command: &str,
        seed: u64,
        config: serde_json::Value,
        inputs: Inputs,
    ) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: inputs.hashes,
            outputs: self.outputs.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let staged_manifest = self.dir.join(MANIFEST_NAME);
        fs::write(&staged_manifest, text).map_err(|e| CliError::io(&staged_manifest, e))?;
        for entry in &self.outputs {
            let from = self.dir.join(&entry.file);
            let to = self.out.join(&entry.file);
            fs::rename(&from, &to).map_err(|e| CliError::io(&to, e))?;
        }
        let manifest_path = self.out.join(MANIFEST_NAME);
        fs::rename(&staged_manifest, &manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
        fs::remove_dir(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        self.committed = true;
        Ok(manifest_path)
    }

    /// Moves only `names` into place without a manifest and discards the rest.
    pub fn salvage(mut self, names: &[&str]) -> Result<(), CliError> {
        for name in names {
            let to = self.out.join(name);
            fs::rename(self.dir.join(name), &to).map_err(|e| CliError::io(&to, e))?;
        }
        self.created_out = false;
        Ok(())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        let _ = fs::remove_dir_all(&self.dir);
        if self.created_out {
            // only succeeds when nothing else ended up there
            let _ = fs::remove_dir(&self.out);
        }
    }
}
