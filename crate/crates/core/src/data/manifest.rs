use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<ManifestEntry>,
    #[serde(default)]
    pub val: Vec<ManifestEntry>,
    #[serde(default)]
    pub test: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub channels: usize,
    /// Per-channel dataset statistics of intensities scaled to [0, 1].
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Mask gray value → class label.
    pub value_to_label: BTreeMap<u8, u8>,
    pub splits: Splits,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes < 2 {
            return Err(Error::config("manifest needs channels ≥ 1 and classes ≥ 2"));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::config(format!(
                "manifest mean/std must have {} entries",
                self.channels
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("manifest std must be positive and finite"));
        }
        if let Some((v, l)) = self.value_to_label.iter().find(|(_, &l)| l as usize >= self.classes) {
            return Err(Error::config(format!("mask value {v} maps to label {l} ≥ classes {}", self.classes)));
        }
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut local = HashSet::new();
            for e in self.entries(split) {
                if !local.insert(e.id.as_str()) {
                    return Err(Error::config(format!("duplicate id {} in {} split", e.id, split.name())));
                }
                if !seen.insert(e.id.as_str()) {
                    return Err(Error::config(format!(
                        "id {} appears in more than one split; splits must be disjoint",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}
