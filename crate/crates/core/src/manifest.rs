//! Run manifests: one JSON file per output directory recording, for every
//! stage run, its configuration and the SHA-256 of its inputs and outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// Input path as given, to hex digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to the manifest's directory, to hex digest.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = BufReader::new(f);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::file(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

impl Manifest {
    /// Loads the manifest of `dir`, or an empty one if there is none.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = manifest_path(dir);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(Error::file(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = manifest_path(dir);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))
    }

    /// Most recent digest recorded for output `name`.
    pub fn output_digest(&self, name: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.outputs.get(name).map(String::as_str))
    }
}

/// Digest of an input file, checked against the manifest next to it when
/// that manifest lists the file as an output.
pub fn verify_input(path: &Path) -> Result<String> {
    let actual = file_digest(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = Manifest::load(parent_dir(path))?;
    if let Some(expected) = manifest.output_digest(&name) {
        if expected != actual {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                actual,
            });
        }
    }
    Ok(actual)
}

/// What a stage run contributes to the manifests.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

/// Appends one entry per distinct output directory, listing the outputs
/// that live there.
pub fn record_stage(record: &StageRecord, outputs: &[&Path]) -> Result<()> {
    let mut by_dir: BTreeMap<PathBuf, BTreeMap<String, String>> = BTreeMap::new();
    for out in outputs {
        let name = out.file_name().ok_or_else(|| {
            Error::InvalidConfig(format!("output path {} has no file name", out.display()))
        })?;
        by_dir
            .entry(parent_dir(out).to_path_buf())
            .or_default()
            .insert(name.to_string_lossy().into_owned(), file_digest(out)?);
    }
    for (dir, outputs) in by_dir {
        let mut m = Manifest::load(&dir)?;
        m.entries.push(ManifestEntry {
            stage: record.stage.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: record.config.clone(),
            seed: record.seed,
            inputs: record.inputs.clone(),
            outputs,
            wall_time_secs: record.wall_time_secs,
        });
        m.save(&dir)?;
    }
    Ok(())
}
