//! Feature-map ingestion, validation, alignment and synthesis.
//!
//! A [`FeatureMap`] is an `H×W×D` channels-last grid of `f32` features for one
//! modality, with an `H×W` validity mask marking pixels that carry real data.
//! Image features are always fully valid; projected point-cloud features may be
//! sparse until [`densify`] fills them.

mod format;
mod manifest;
mod resample;
mod synth;

pub use format::{load_feature_map, read_feature_map, save_feature_map, write_feature_map, MAGIC, VERSION};
pub use manifest::{load_mask, load_samples, save_mask, DatasetManifest, Label, Sample, SampleEntry, Split};
pub use resample::{densify, scatter_project, upsample_bilinear, Densified, Projection};
pub use synth::{
    synth_anomalous_sample, synth_normal_sample, AnomalyShape, AnomalySpec, ArtifactSpec, SyntheticSpec,
};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// `H×W` boolean mask, `true` where a pixel carries real data.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    TwoD,
    ThreeD,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::TwoD => 0,
            Modality::ThreeD => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::TwoD),
            1 => Some(Modality::ThreeD),
            _ => None,
        }
    }
}

/// Dense feature grid of one modality plus its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    modality: Modality,
    data: Array3<f32>,
    validity: Mask,
}

impl FeatureMap {
    /// Builds a map after checking finiteness, mask shape and the all-valid rule for 2D maps.
    pub fn new(modality: Modality, data: Array3<f32>, validity: Mask) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(shape_err!("feature map dims must be positive, got {h}x{w}x{d}"));
        }
        if validity.dim() != (h, w) {
            return Err(shape_err!(
                "validity mask is {:?}, data is {h}x{w}",
                validity.dim()
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(arg_err!("non-finite feature value at flat index {bad}"));
        }
        if modality == Modality::TwoD && validity.iter().any(|v| !v) {
            return Err(arg_err!("2D feature maps must be fully valid"));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            modality,
            data,
            validity,
        })
    }

    /// Fully valid map.
    pub fn dense(modality: Modality, data: Array3<f32>) -> Result<Self> {
        let (h, w, _) = data.dim();
        Self::new(modality, data, Mask::from_elem((h, w), true))
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn validity(&self) -> &Mask {
        &self.validity
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }

    pub fn is_fully_valid(&self) -> bool {
        self.validity.iter().all(|v| *v)
    }

    pub fn into_parts(self) -> (Modality, Array3<f32>, Mask) {
        (self.modality, self.data, self.validity)
    }
}

/// Per-point features and their image-plane coordinates `(u, v)`, `u` along width.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureSet {
    features: Array2<f32>,
    pixel_coords: Vec<(f64, f64)>,
}

impl PointFeatureSet {
    pub fn new(features: Array2<f32>, pixel_coords: Vec<(f64, f64)>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(shape_err!("point set must be non-empty, got {n}x{d}"));
        }
        if pixel_coords.len() != n {
            return Err(shape_err!(
                "{} coordinates for {n} feature rows",
                pixel_coords.len()
            ));
        }
        if features.iter().any(|v| !v.is_finite())
            || pixel_coords
                .iter()
                .any(|(u, v)| !u.is_finite() || !v.is_finite())
        {
            return Err(arg_err!("point set contains non-finite values"));
        }
        Ok(Self {
            features,
            pixel_coords,
        })
    }

    pub fn len(&self) -> usize {
        self.pixel_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn pixel_coords(&self) -> &[(f64, f64)] {
        &self.pixel_coords
    }
}
