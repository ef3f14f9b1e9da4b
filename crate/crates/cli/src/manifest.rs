use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command line, the resolved
/// configuration, the seed and hashes of every input and output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    /// Configuration after defaults and flag overrides were applied.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub toolkit_version: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Collects inputs, outputs and stage timings while a command runs.
#[derive(Debug)]
pub struct Recorder {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path, seed: u64, threads: usize) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config_paths: Vec::new(),
                config: serde_json::Value::Null,
                seed,
                threads,
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: BTreeMap::new(),
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        }
    }

    pub fn config_path(&mut self, path: &Path) {
        self.manifest.config_paths.push(path.to_path_buf());
    }

    pub fn config(&mut self, value: &impl Serialize) -> CliResult<()> {
        self.manifest.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Records a file already written into the output directory.
    pub fn output(&mut self, name: &str) -> CliResult<PathBuf> {
        let path = self.out_dir.join(name);
        let sha256 = sha256_file(&path)?;
        self.manifest.outputs.push(FileRecord {
            path: PathBuf::from(name),
            sha256,
        });
        Ok(path)
    }

    /// Times `f` under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.manifest.timings.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest
            .timings
            .insert("total".into(), self.started.elapsed().as_secs_f64());
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        rop::io::atomic_write(&self.out_dir.join(MANIFEST_NAME), &bytes)?;
        Ok(self.manifest)
    }
}
