//! Experiment run directories: a root with `manifest.json` mapping artifact
//! names to relative paths plus checksums. Re-running a stage with the same
//! seed and inputs must reproduce every checksum.

use super::{io_err, load_tensor, save_tensor, sha256_hex, DataError, Image, TensorRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub master_seed: u64,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl RunManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, DataError> {
        serde_json::from_slice(bytes).map_err(|e| DataError::InvalidManifest(e.to_string()))
    }
}

#[derive(Debug)]
pub struct RunStore {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunStore {
    pub fn create(root: &Path, master_seed: u64) -> Result<Self, DataError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let store = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                version: 1,
                master_seed,
                artifacts: BTreeMap::new(),
            },
        };
        store.save_manifest()?;
        Ok(store)
    }

    pub fn open(root: &Path) -> Result<Self, DataError> {
        let p = root.join("manifest.json");
        let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest::from_json(&bytes)?,
        })
    }

    pub fn save_manifest(&self) -> Result<(), DataError> {
        let p = self.root.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.manifest).unwrap())
            .map_err(|e| io_err(&p, e))
    }

    fn register(&mut self, name: &str, rel: &str) -> Result<(), DataError> {
        let full = self.root.join(rel);
        let bytes = std::fs::read(&full).map_err(|e| io_err(&full, e))?;
        self.manifest.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                path: rel.to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Writes a tensor under `tensors/<rel>` and registers it.
    pub fn put_tensor(&mut self, name: &str, t: &TensorRecord) -> Result<(), DataError> {
        let rel = format!("tensors/{name}.bin");
        save_tensor(t, &self.root.join(&rel))?;
        self.register(name, &rel)?;
        // Sidecar participates in the manifest too.
        let sc_rel = format!("tensors/{name}.json");
        self.register(&format!("{name}.sidecar"), &sc_rel)
    }

    pub fn get_tensor(&self, name: &str) -> Result<TensorRecord, DataError> {
        let entry = self
            .manifest
            .artifacts
            .get(name)
            .ok_or_else(|| DataError::MissingArtifact(name.into()))?;
        load_tensor(&self.root.join(&entry.path))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.artifacts.contains_key(name)
    }

    pub fn put_image(&mut self, name: &str, img: &Image) -> Result<(), DataError> {
        let rel = format!("images/{name}.png");
        super::save_image(img, &self.root.join(&rel))?;
        self.register(name, &rel)
    }

    pub fn get_image(&self, name: &str) -> Result<Image, DataError> {
        let entry = self
            .manifest
            .artifacts
            .get(name)
            .ok_or_else(|| DataError::MissingArtifact(name.into()))?;
        super::load_image(&self.root.join(&entry.path))
    }

    /// Writes arbitrary bytes (reports, configs) under the given relative path.
    pub fn put_bytes(&mut self, name: &str, rel: &str, bytes: &[u8]) -> Result<(), DataError> {
        let full = self.root.join(rel);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        std::fs::write(&full, bytes).map_err(|e| io_err(&full, e))?;
        self.register(name, rel)
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>, DataError> {
        let entry = self
            .manifest
            .artifacts
            .get(name)
            .ok_or_else(|| DataError::MissingArtifact(name.into()))?;
        let full = self.root.join(&entry.path);
        std::fs::read(&full).map_err(|e| io_err(&full, e))
    }

    /// Verifies that every artifact exists and matches its checksum.
    pub fn verify(&self) -> Result<(), DataError> {
        for (name, entry) in &self.manifest.artifacts {
            let full = self.root.join(&entry.path);
            let bytes = std::fs::read(&full).map_err(|e| io_err(&full, e))?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(DataError::ChecksumFailure {
                    name: name.clone(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Checksum over the sorted (name, sha256) pairs; the identity of a run.
    pub fn manifest_digest(&self) -> String {
        let mut buf = String::new();
        for (name, entry) in &self.manifest.artifacts {
            buf.push_str(name);
            buf.push('=');
            buf.push_str(&entry.sha256);
            buf.push('\n');
        }
        sha256_hex(buf.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::create(dir.path(), 1).unwrap();
        let t = TensorRecord::new(vec![2], vec![1.0, 2.0], "t").unwrap();
        store.put_tensor("t", &t).unwrap();
        store.save_manifest().unwrap();
        store.verify().unwrap();
        std::fs::write(dir.path().join("tensors/t.bin"), [0u8; 8]).unwrap();
        assert!(matches!(
            store.verify().unwrap_err(),
            DataError::ChecksumFailure { .. }
        ));
    }

    #[test]
    fn replay_produces_identical_digest() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let t = TensorRecord::new(vec![3], vec![0.5, -1.0, 2.0], "t").unwrap();
        let mut s1 = RunStore::create(d1.path(), 9).unwrap();
        let mut s2 = RunStore::create(d2.path(), 9).unwrap();
        s1.put_tensor("t", &t).unwrap();
        s2.put_tensor("t", &t).unwrap();
        assert_eq!(s1.manifest_digest(), s2.manifest_digest());
    }
}
