//! Versioned pipeline artifacts.
//!
//! Every artifact is a JSON envelope carrying its kind, the config digest,
//! the seed it belongs to, and the digests of the files it was computed
//! from. Loading a prerequisite that is absent produces a missing-artifact
//! error naming the stage to run; digest verification catches stale chains.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    /// Logical file name -> SHA-256 of its bytes at write time.
    pub inputs: BTreeMap<String, String>,
    pub payload: T,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    Ok(out)
}

pub fn write_artifact<T: Serialize>(
    dir: &Path,
    name: &str,
    kind: &str,
    config_digest: &str,
    seed: u64,
    inputs: BTreeMap<String, String>,
    payload: &T,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let artifact = Artifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        kind: kind.to_string(),
        config_digest: config_digest.to_string(),
        seed,
        inputs,
        payload,
    };
    let path = dir.join(name);
    let json = serde_json::to_string(&artifact)
        .map_err(|e| Error::Format(format!("artifact '{name}' serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads an artifact, checking kind and schema version. `produced_by` names
/// the stage to run when the file is missing.
pub fn load_artifact<T: DeserializeOwned>(
    dir: &Path,
    name: &str,
    kind: &str,
    produced_by: &str,
) -> Result<Artifact<T>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found in {}; run the '{produced_by}' stage first",
            name,
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let artifact: Artifact<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("artifact '{name}' parse: {e}")))?;
    if artifact.schema_version != ARTIFACT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "artifact '{name}' has schema version {}, expected {ARTIFACT_SCHEMA_VERSION}",
            artifact.schema_version
        )));
    }
    if artifact.kind != kind {
        return Err(Error::Format(format!(
            "artifact '{name}' has kind '{}', expected '{kind}'",
            artifact.kind
        )));
    }
    Ok(artifact)
}

/// Verifies that every input recorded by the artifact still matches the
/// bytes on disk.
pub fn verify_inputs(dir: &Path, name: &str, inputs: &BTreeMap<String, String>) -> Result<()> {
    for (input, recorded) in inputs {
        let current = file_digest(&dir.join(input))?;
        if &current != recorded {
            return Err(Error::StaleArtifact(format!(
                "'{name}' was computed from '{input}' with digest {recorded}, \
                 but the file now hashes to {current}; re-run the producing stage"
            )));
        }
    }
    Ok(())
}

/// CSV artifact helpers: digests ride along as leading `#` comment lines.
pub fn write_csv(
    path: &Path,
    config_digest: &str,
    inputs: &BTreeMap<String, String>,
    header: &str,
    rows: &[String],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = format!("# config_digest={config_digest}\n");
    for (name, digest) in inputs {
        out.push_str(&format!("# input:{name}={digest}\n"));
    }
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a CSV artifact, returning its recorded input digests and data
/// rows (header excluded).
pub fn read_csv(
    path: &Path,
    produced_by: &str,
) -> Result<(BTreeMap<String, String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found; run the '{produced_by}' stage first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut inputs = BTreeMap::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(comment) = line.strip_prefix("# ") {
            if let Some(rest) = comment.strip_prefix("input:") {
                if let Some((name, digest)) = rest.split_once('=') {
                    inputs.insert(name.to_string(), digest.to_string());
                }
            }
            continue;
        }
        if !saw_header {
            saw_header = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok((inputs, rows))
}
