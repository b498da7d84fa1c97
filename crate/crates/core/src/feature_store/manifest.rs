//! Dataset manifests: one JSON document per split listing feature files and labels.
//!
//! Sample paths are resolved relative to the directory holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{densify, load_feature_map, save_feature_map, upsample_bilinear, FeatureMap, Mask, Modality};
use crate::error::{arg_err, shape_err, MafrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub path_2d: PathBuf,
    pub path_3d: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(arg_err!("duplicate sample id {:?}", s.id));
            }
            if self.split == Split::Train && s.label != Label::Normal {
                return Err(arg_err!("train split holds anomalous sample {:?}", s.id));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MafrError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| MafrError::io(path, e))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }
}

/// A sample ready for the network: both maps dense and spatially aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub e2d: FeatureMap,
    pub e3d: FeatureMap,
    /// 3D validity before densification.
    pub source_validity: Mask,
    pub gt_mask: Option<Mask>,
}

impl Sample {
    /// Aligns a raw pair: upsamples a coarser 2D map to the 3D grid and densifies sparse 3D data.
    pub fn from_maps(
        id: impl Into<String>,
        label: Label,
        e2d: FeatureMap,
        e3d: FeatureMap,
        gt_mask: Option<Mask>,
    ) -> Result<Self> {
        if e2d.modality() != Modality::TwoD || e3d.modality() != Modality::ThreeD {
            return Err(arg_err!("expected a (2D, 3D) feature pair"));
        }
        let (h, w) = (e3d.height(), e3d.width());
        let e2d = if (e2d.height(), e2d.width()) == (h, w) {
            e2d
        } else {
            upsample_bilinear(&e2d, h, w)?
        };
        let dense = densify(&e3d)?;
        if let Some(m) = &gt_mask {
            if m.dim() != (h, w) {
                return Err(shape_err!("ground-truth mask {:?} vs features {h}x{w}", m.dim()));
            }
        }
        Ok(Self {
            id: id.into(),
            label,
            e2d,
            e3d: dense.map,
            source_validity: dense.source_validity,
            gt_mask,
        })
    }
}

impl SampleEntry {
    pub fn load(&self, base: &Path) -> Result<Sample> {
        let e2d = load_feature_map(base.join(&self.path_2d))?;
        let e3d = load_feature_map(base.join(&self.path_3d))?;
        let gt = match &self.mask_path {
            Some(p) => Some(load_mask(base.join(p))?),
            None => None,
        };
        Sample::from_maps(self.id.clone(), self.label, e2d, e3d, gt)
    }
}

/// Loads every sample of a manifest stored at `manifest_path`.
pub fn load_samples(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest.samples.iter().map(|s| s.load(base)).collect()
}

/// Ground-truth masks are stored as single-channel feature maps holding 0/1.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.dim();
    let data = Array3::from_shape_fn((h, w, 1), |(y, x, _)| if mask[[y, x]] { 1.0 } else { 0.0 });
    save_feature_map(&FeatureMap::dense(Modality::TwoD, data)?, path)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let map = load_feature_map(path)?;
    if map.channels() != 1 {
        return Err(MafrError::Format(format!(
            "mask file must have one channel, found {}",
            map.channels()
        )));
    }
    Ok(map.data().index_axis(ndarray::Axis(2), 0).mapv(|v| v > 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: Label) -> SampleEntry {
        SampleEntry {
            id: id.into(),
            path_2d: format!("{id}_2d.mafr").into(),
            path_3d: format!("{id}_3d.mafr").into(),
            label,
            mask_path: None,
        }
    }

    #[test]
    fn json_field_names() {
        let m = DatasetManifest {
            samples: vec![entry("a", Label::Normal)],
            split: Split::Train,
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["split"], "Train");
        assert_eq!(v["samples"][0]["id"], "a");
        assert_eq!(v["samples"][0]["path_2d"], "a_2d.mafr");
        assert_eq!(v["samples"][0]["label"], "Normal");
        let back = DatasetManifest::from_json(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_duplicates_and_anomalous_train() {
        let dup = DatasetManifest {
            samples: vec![entry("a", Label::Normal), entry("a", Label::Normal)],
            split: Split::Test,
        };
        assert!(dup.validate().is_err());
        let bad = DatasetManifest {
            samples: vec![entry("a", Label::Anomalous)],
            split: Split::Train,
        };
        assert!(bad.validate().is_err());
        assert!(DatasetManifest::from_json(r#"{"samples": [], "split": "Test", "extra": 1}"#).is_err());
    }

    #[test]
    fn sample_alignment_upsamples_and_densifies() {
        let e2d = FeatureMap::dense(Modality::TwoD, Array3::from_elem((2, 2, 3), 1.0)).unwrap();
        let mut valid = Mask::from_elem((4, 4), true);
        valid[[0, 0]] = false;
        let e3d = FeatureMap::new(Modality::ThreeD, Array3::from_elem((4, 4, 2), 2.0), valid.clone()).unwrap();
        let s = Sample::from_maps("x", Label::Normal, e2d, e3d, None).unwrap();
        assert_eq!(s.e2d.data().dim(), (4, 4, 3));
        assert!(s.e3d.is_fully_valid());
        assert_eq!(s.source_validity, valid);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask::from_shape_fn((3, 5), |(y, x)| (y * x) % 2 == 1);
        let p = dir.path().join("m.mafr");
        save_mask(&mask, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), mask);
    }
}
