//! Run manifests: what a command read, how it was configured, and digests of
//! everything it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Full effective configuration.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input paths as given, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage. Not part of the reproducibility contract.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.inputs.insert(role.into(), path.display().to_string());
        self.input_digests.insert(role.into(), file_digest(path)?);
        Ok(())
    }

    /// Records the digest of `dir/name`.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> CliResult<()> {
        self.outputs.insert(name.into(), file_digest(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
    }

    /// Names of outputs whose digests differ from `other`'s.
    pub fn output_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut bad: Vec<String> = self
            .outputs
            .iter()
            .filter(|(k, v)| other.outputs.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        bad.extend(other.outputs.keys().filter(|k| !self.outputs.contains_key(*k)).cloned());
        bad
    }
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(file_digest(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"1").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({"k": 1})).unwrap();
        m.add_output(dir.path(), "a").unwrap();
        m.seeds.insert("seed".into(), 9);
        m.write(dir.path()).unwrap();
        let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert!(back.output_mismatches(&m).is_empty());
        std::fs::write(dir.path().join("a"), b"2").unwrap();
        let mut other = m.clone();
        other.add_output(dir.path(), "a").unwrap();
        assert_eq!(m.output_mismatches(&other), vec!["a".to_string()]);
    }
}
