//! Dataset manifests: which stimuli exist, their categories and trial counts.

use super::DataError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stimulus_id: String,
    pub category_id: String,
    pub image_path: String,
    pub trial_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub category_count: usize,
    pub per_category_count: usize,
}

impl DatasetManifest {
    pub fn categories(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.category_id.clone()).collect()
    }

    /// Structural validation of the split invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut per_cat: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            *per_cat.entry(&e.category_id).or_default() += 1;
        }
        if per_cat.len() != self.category_count {
            return Err(DataError::InvalidManifest(format!(
                "category_count {} but {} distinct categories present",
                self.category_count,
                per_cat.len()
            )));
        }
        match self.split {
            Split::Train => {
                for (cat, n) in &per_cat {
                    if *n != self.per_category_count {
                        return Err(DataError::InvalidManifest(format!(
                            "train category {cat} has {n} stimuli, expected {}",
                            self.per_category_count
                        )));
                    }
                }
            }
            Split::Test => {
                for (cat, n) in &per_cat {
                    if *n != 1 {
                        return Err(DataError::InvalidManifest(format!(
                            "test category {cat} has {n} stimuli, expected exactly 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Train/test categories must be disjoint.
    pub fn validate_disjoint(train: &Self, test: &Self) -> Result<(), DataError> {
        let overlap: Vec<String> = train
            .categories()
            .intersection(&test.categories())
            .cloned()
            .collect();
        if !overlap.is_empty() {
            return Err(DataError::InvalidManifest(format!(
                "train/test categories overlap: {overlap:?}"
            )));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, DataError> {
        serde_json::from_slice(bytes)
            .map_err(|e| DataError::InvalidManifest(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str, c: &str) -> ManifestEntry {
        ManifestEntry {
            stimulus_id: s.into(),
            category_id: c.into(),
            image_path: format!("images/{s}.png"),
            trial_count: 1,
        }
    }

    #[test]
    fn train_requires_uniform_per_category_count() {
        let m = DatasetManifest {
            split: Split::Train,
            entries: vec![entry("s0", "a"), entry("s1", "a"), entry("s2", "b")],
            category_count: 2,
            per_category_count: 2,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn disjointness_check() {
        let train = DatasetManifest {
            split: Split::Train,
            entries: vec![entry("s0", "a")],
            category_count: 1,
            per_category_count: 1,
        };
        let test = DatasetManifest {
            split: Split::Test,
            entries: vec![entry("t0", "a")],
            category_count: 1,
            per_category_count: 1,
        };
        assert!(DatasetManifest::validate_disjoint(&train, &test).is_err());
    }
}
