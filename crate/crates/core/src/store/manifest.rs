//! Dataset manifest: a JSON document naming the feature grid, the class
//! table and one record per image. Paths are relative to the manifest's
//! directory.
//!
//! Mask files are FMTC label maps at native resolution: `0` is background
//! and `k + 1` marks pixels of class `k`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{FeatureStack, TextEmbedding, LAYER_COUNT};
use crate::store::container::read_tensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    #[serde(rename = "L")]
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    pub class_ids: Vec<u32>,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vl_feature_path: Option<String>,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    #[serde(default = "default_backbone")]
    pub backbone_id: String,
    pub grid: FeatureGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vl_channels: Option<usize>,
    pub classes: BTreeMap<u32, String>,
    pub records: Vec<Record>,
    #[serde(default)]
    pub text_embeddings: BTreeMap<u32, String>,
}

fn default_backbone() -> String {
    "unknown".to_string()
}

/// A manifest bound to the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    root: PathBuf,
}

impl Dataset {
    /// Parses the manifest and validates every referenced file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let ds = Self::open_unchecked(path)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn open_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn from_parts(manifest: Manifest, root: impl Into<PathBuf>) -> Self {
        Self {
            manifest,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn record(&self, index: usize) -> &Record {
        &self.manifest.records[index]
    }

    /// Record indices whose image contains `class_id`, in manifest order.
    pub fn images_of(&self, class_id: u32) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_ids.contains(&class_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.manifest.classes.keys().copied().collect()
    }

    pub fn load_features(&self, index: usize) -> Result<FeatureStack> {
        let rec = self.record(index);
        let path = self.resolve(&rec.feature_path);
        let t = read_tensor(&path)?;
        let g = self.manifest.grid;
        if t.dims() != [g.layers, g.h, g.w, g.c] {
            return Err(Error::data(format!(
                "{}: feature dims {:?} disagree with grid {:?}",
                path.display(),
                t.dims(),
                [g.layers, g.h, g.w, g.c]
            )));
        }
        FeatureStack::from_tensor(&t, self.manifest.backbone_id.clone())
    }

    pub fn load_vl_features(&self, index: usize) -> Result<Option<Tensor>> {
        let rec = self.record(index);
        let Some(rel) = &rec.vl_feature_path else {
            return Ok(None);
        };
        let path = self.resolve(rel);
        let t = read_tensor(&path)?;
        let g = self.manifest.grid;
        let c = self.manifest.vl_channels.ok_or_else(|| {
            Error::data("record has VL features but manifest declares no vl_channels")
        })?;
        if t.dims() != [g.h, g.w, c] {
            return Err(Error::data(format!(
                "{}: VL dims {:?} disagree with [{}, {}, {c}]",
                path.display(),
                t.dims(),
                g.h,
                g.w
            )));
        }
        Ok(Some(t))
    }

    /// Raw label map at native resolution.
    pub fn load_labels(&self, index: usize) -> Result<Tensor> {
        let path = self.resolve(&self.record(index).mask_path);
        let t = read_tensor(&path)?;
        if t.ndim() != 2 {
            return Err(Error::data(format!(
                "{}: mask must be 2-d, got {:?}",
                path.display(),
                t.dims()
            )));
        }
        Ok(t)
    }

    /// Binary mask of `class_id` in image `index`.
    pub fn load_mask(&self, index: usize, class_id: u32) -> Result<Tensor> {
        let labels = self.load_labels(index)?;
        let target = (class_id + 1) as f32;
        Ok(labels.map(|v| if v == target { 1.0 } else { 0.0 }))
    }

    pub fn load_text(&self, class_id: u32) -> Result<TextEmbedding> {
        let rel = self
            .manifest
            .text_embeddings
            .get(&class_id)
            .ok_or_else(|| Error::data(format!("no text embedding for class {class_id}")))?;
        let path = self.resolve(rel);
        let t = read_tensor(&path)?;
        if let Some(c) = self.manifest.vl_channels {
            if t.dims() != [c] {
                return Err(Error::data(format!(
                    "{}: text dims {:?}, expected [{c}]",
                    path.display(),
                    t.dims()
                )));
            }
        }
        let name = self
            .manifest
            .classes
            .get(&class_id)
            .cloned()
            .unwrap_or_default();
        TextEmbedding::new(t, class_id, name)
    }

    pub fn has_vl(&self) -> bool {
        self.manifest.vl_channels.is_some()
            && !self.manifest.text_embeddings.is_empty()
            && self
                .manifest
                .records
                .iter()
                .all(|r| r.vl_feature_path.is_some())
    }

    /// Checks the manifest and every file it references.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.grid.layers != LAYER_COUNT {
            return Err(Error::data(format!(
                "grid declares {} layers, expected {LAYER_COUNT}",
                m.grid.layers
            )));
        }
        if m.grid.h == 0 || m.grid.w == 0 || m.grid.c == 0 {
            return Err(Error::data("grid extents must be positive"));
        }
        for (i, rec) in m.records.iter().enumerate() {
            if rec.class_ids.is_empty() {
                return Err(Error::data(format!(
                    "record {} lists no classes",
                    rec.image_id
                )));
            }
            if let Some(c) = rec.class_ids.iter().find(|c| !m.classes.contains_key(c)) {
                return Err(Error::data(format!(
                    "record {} references unknown class {c}",
                    rec.image_id
                )));
            }
            self.load_features(i)?;
            self.load_vl_features(i)?;
            let labels = self.load_labels(i)?;
            for &c in &rec.class_ids {
                let target = (c + 1) as f32;
                if !labels.values().contains(&target) {
                    return Err(Error::data(format!(
                        "record {}: mask has no pixels of class {c}",
                        rec.image_id
                    )));
                }
            }
            if let Some(v) = labels
                .values()
                .iter()
                .find(|&&v| v != 0.0 && !rec.class_ids.iter().any(|&c| (c + 1) as f32 == v))
            {
                return Err(Error::data(format!(
                    "record {}: unexpected mask label {v}",
                    rec.image_id
                )));
            }
        }
        for &c in m.text_embeddings.keys() {
            if !m.classes.contains_key(&c) {
                return Err(Error::data(format!("text embedding for unknown class {c}")));
            }
            self.load_text(c)?;
        }
        Ok(())
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
