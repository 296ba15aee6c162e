//! On-disk dataset index: one JSON object per line in `manifest.jsonl`,
//! paths relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::TransformRecord;
use crate::error::{Error, Result};
use crate::phantom::Calcification;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Calcified,
    NonCalcified,
}

impl Label {
    /// Class index for the calcification classifier; `None` for normals.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Normal => None,
            Label::NonCalcified => Some(0),
            Label::Calcified => Some(1),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Calcified => "calcified",
            Label::NonCalcified => "non_calcified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoduleGeometry {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub contrast: f64,
    pub calcification: Calcification,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodule: Option<NoduleGeometry>,
    pub seed: u64,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformRecord>,
    /// Id of the row this one was derived from (augmented pairs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, rows: Vec<ManifestRow>) -> Self {
        Manifest {
            root: root.into(),
            rows,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Same rows with every file path rewritten relative to `new_root`
    /// (absolute when no relative form exists), so the manifest can be
    /// saved elsewhere without moving files.
    pub fn rebase(&self, new_root: impl Into<PathBuf>) -> Manifest {
        let new_root = new_root.into();
        let abs_root = std::path::absolute(&new_root).unwrap_or_else(|_| new_root.clone());
        let fix = |p: &str| -> String {
            let full = self.resolve(p);
            let full = std::path::absolute(&full).unwrap_or(full);
            pathdiff::diff_paths(&full, &abs_root)
                .unwrap_or(full)
                .to_string_lossy()
                .into_owned()
        };
        let rows = self
            .rows
            .iter()
            .map(|r| ManifestRow {
                image: fix(&r.image),
                mask: r.mask.as_deref().map(fix),
                clean: r.clean.as_deref().map(fix),
                refined: r.refined.as_deref().map(fix),
                ..r.clone()
            })
            .collect();
        Manifest { root: new_root, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter_where<'a>(
        &'a self,
        split: Split,
        labels: &'a [Label],
    ) -> impl Iterator<Item = &'a ManifestRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.split == split && labels.contains(&r.label))
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the serialized rows (hex).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(line).map_err(|e| Error::Format {
                what: "manifest",
                message: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(Manifest::new(root, rows))
    }

    /// Write `manifest.jsonl` into the manifest root.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load `<dir>/manifest.jsonl`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::parse(dir, &text)
    }
}

/// SHA-256 of a file's bytes (hex).
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, label: Label) -> ManifestRow {
        ManifestRow {
            id: id.into(),
            split: Split::Train,
            label,
            nodule: None,
            seed: 7,
            image: format!("images/{id}.png"),
            mask: None,
            clean: None,
            refined: None,
            transform: None,
            source: None,
        }
    }

    #[test]
    fn jsonl_round_trip_and_digest() {
        let m = Manifest::new("/tmp/x", vec![row("a", Label::Normal), row("b", Label::Calcified)]);
        let text = m.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"label\":\"calcified\""));
        let back = Manifest::parse("/tmp/x", &text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn parse_error_names_line() {
        let e = Manifest::parse("/", "{}\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }
}
