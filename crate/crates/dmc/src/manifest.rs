//! `manifest.json`: one record per executed stage with its resolved config,
//! input and output hashes, seed and wall-clock time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_json, write_json};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    /// Every config key with its resolved value.
    pub config: BTreeMap<String, String>,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → sha256.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: Vec<StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest { version: MANIFEST_VERSION, stages: Vec::new() }
    }
}

impl Manifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, 0, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// The manifest in `out`, or an empty one if none exists yet.
    pub fn load_or_default(out: &Path) -> Result<Self> {
        let p = Self::path(out);
        if p.exists() {
            Self::load(&p)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(self, &Self::path(out))
    }

    /// Adds `record`, replacing an earlier record of the same command.
    pub fn record(&mut self, record: StageRecord) {
        self.stages.retain(|s| s.command != record.command);
        self.stages.push(record);
    }

    pub fn stage(&self, command: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.command == command)
    }

    /// The latest stage that wrote `file`.
    pub fn producer(&self, file: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.outputs.contains_key(file))
    }

    /// Checks that `out/file` still has the hash its producing stage
    /// recorded and returns that stage.
    pub fn verify_output(&self, out: &Path, file: &str) -> Result<&StageRecord> {
        let path = out.join(file);
        let stage =
            self.producer(file).ok_or_else(|| Error::stale(&path, format!("no stage in {} produced it", Self::path(out).display())))?;
        let got = sha256_file(&path)?;
        let want = &stage.outputs[file];
        if &got != want {
            return Err(Error::stale(&path, format!("`{}` recorded sha256 {want}, file has {got}", stage.command)));
        }
        Ok(stage)
    }
}

/// Manifest key for an input file: its canonical path when it exists.
pub fn input_key(path: &Path) -> String {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()).display().to_string()
}

/// Fails unless `path` hashes to what `stage` recorded for it.
pub fn verify_input(stage: &StageRecord, path: &Path) -> Result<()> {
    let key = input_key(path);
    let want = stage.inputs.get(&key).ok_or_else(|| Error::stale(path, format!("`{}` was not run on this file", stage.command)))?;
    let got = sha256_file(path)?;
    if &got != want {
        return Err(Error::stale(path, format!("changed since `{}` ran (recorded {want}, now {got})", stage.command)));
    }
    Ok(())
}
