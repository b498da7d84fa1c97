//! Pixel-level anomaly maps from reconstruction error, their fusion and the sample score.

use ndarray::{Array1, Array2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::feature_store::{FeatureMap, Mask, Modality, Sample};
use crate::network::{self, Mode, ModelParams};
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapKind {
    Psi2D,
    Psi3D,
    Combined,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Multiply,
    Add,
    Max,
    #[serde(rename = "2d")]
    Only2D,
    #[serde(rename = "3d")]
    Only3D,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Multiply,
        FusionStrategy::Add,
        FusionStrategy::Max,
        FusionStrategy::Only2D,
        FusionStrategy::Only3D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Multiply => "multiply",
            FusionStrategy::Add => "add",
            FusionStrategy::Max => "max",
            FusionStrategy::Only2D => "2d",
            FusionStrategy::Only3D => "3d",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = crate::MafrError;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| arg_err!("unknown fusion strategy {s:?}; expected add, max, multiply, 2d or 3d"))
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-negative `H×W` score map. Only smoothed maps carry a sample score.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    values: Array2<f64>,
    kind: MapKind,
    sample_score: Option<f64>,
}

impl AnomalyMap {
    pub fn new(values: Array2<f64>, kind: MapKind) -> Result<Self> {
        if values.is_empty() {
            return Err(shape_err!("anomaly map must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(arg_err!("anomaly map values must be finite and non-negative, found {v}"));
        }
        let sample_score = (kind == MapKind::Smoothed).then(|| max_value(&values));
        Ok(Self { values, kind, sample_score })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn sample_score(&self) -> Option<f64> {
        self.sample_score
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Single-channel feature map for export in the binary format.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let (h, w) = self.dim();
        let data = self.values.mapv(|v| v as f32).into_shape_with_order((h, w, 1)).expect("same length");
        FeatureMap::dense(Modality::TwoD, data)
    }

    fn with(&self, values: Array2<f64>, kind: MapKind) -> AnomalyMap {
        let sample_score = (kind == MapKind::Smoothed).then(|| max_value(&values));
        AnomalyMap { values, kind, sample_score }
    }
}

fn max_value(values: &Array2<f64>) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// Per-pixel Euclidean distance between features and their reconstruction.
pub fn modality_map<T: Scalar>(e: ArrayView3<T>, ehat: ArrayView3<T>, kind: MapKind) -> Result<AnomalyMap> {
    if e.dim() != ehat.dim() {
        return Err(shape_err!("features {:?} vs reconstruction {:?}", e.dim(), ehat.dim()));
    }
    if !matches!(kind, MapKind::Psi2D | MapKind::Psi3D) {
        return Err(arg_err!("modality maps are Psi2D or Psi3D, not {kind:?}"));
    }
    let values = Zip::from(e.lanes(Axis(2))).and(ehat.lanes(Axis(2))).map_collect(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let d = (x - y).to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    });
    AnomalyMap::new(values, kind)
}

pub fn fuse(psi_2d: &AnomalyMap, psi_3d: &AnomalyMap, strategy: FusionStrategy) -> Result<AnomalyMap> {
    if psi_2d.dim() != psi_3d.dim() {
        return Err(shape_err!("cannot fuse {:?} with {:?}", psi_2d.dim(), psi_3d.dim()));
    }
    let (a, b) = (&psi_2d.values, &psi_3d.values);
    let values = match strategy {
        FusionStrategy::Multiply => a * b,
        FusionStrategy::Add => a + b,
        FusionStrategy::Max => Zip::from(a).and(b).map_collect(|x, y| x.max(*y)),
        FusionStrategy::Only2D => a.clone(),
        FusionStrategy::Only3D => b.clone(),
    };
    Ok(psi_2d.with(values, MapKind::Combined))
}

/// Zeroes scores where the original 3D data was missing. Keeps the map's kind.
pub fn mask_invalid(map: &AnomalyMap, source_validity: &Mask) -> Result<AnomalyMap> {
    if map.dim() != source_validity.dim() {
        return Err(shape_err!("map {:?} vs validity {:?}", map.dim(), source_validity.dim()));
    }
    let values = Zip::from(&map.values)
        .and(source_validity)
        .map_collect(|&v, &ok| if ok { v } else { 0.0 });
    Ok(map.with(values, map.kind))
}

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Array1<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(arg_err!("sigma must be positive, got {sigma}"));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k = Array1::from_iter((-r..=r).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()));
    let total = k.sum();
    Ok(k / total)
}

/// Separable Gaussian blur with replicate padding; the result is a `Smoothed` map.
pub fn gaussian_smooth(map: &AnomalyMap, sigma: f64) -> Result<AnomalyMap> {
    let kernel = gaussian_kernel(sigma)?;
    let rows = convolve_axis(&map.values, &kernel, Axis(0));
    let values = convolve_axis(&rows, &kernel, Axis(1));
    Ok(map.with(values.mapv(|v| v.max(0.0)), MapKind::Smoothed))
}

fn convolve_axis(input: &Array2<f64>, kernel: &Array1<f64>, axis: Axis) -> Array2<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros(input.raw_dim());
    for (src, mut dst) in input.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let last = src.len() as isize - 1;
        for (i, o) in dst.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * src[(i as isize + t as isize - r).clamp(0, last) as usize])
                .sum();
        }
    }
    out
}

pub fn score_sample(map: &AnomalyMap) -> Result<f64> {
    match (map.kind, map.sample_score) {
        (MapKind::Smoothed, Some(s)) => Ok(s),
        (kind, _) => Err(arg_err!("sample scores come from Smoothed maps, got {kind:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub strategy: FusionStrategy,
    pub sigma: f64,
    /// Zero invalid pixels before smoothing (default) rather than after.
    pub mask_before_smooth: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Multiply,
            sigma: DEFAULT_SIGMA,
            mask_before_smooth: true,
        }
    }
}

/// All maps produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub psi_2d: AnomalyMap,
    pub psi_3d: AnomalyMap,
    pub combined: AnomalyMap,
    pub smoothed: AnomalyMap,
    pub score: f64,
}

pub fn infer<T: Scalar>(
    params: &ModelParams<T>,
    e2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    source_validity: &Mask,
    cfg: &InferConfig,
) -> Result<Inference> {
    let pass = network::forward(params, e2d, e3d, Mode::Eval)?;
    let psi_2d = modality_map(e2d, pass.recon_2d.view(), MapKind::Psi2D)?;
    let psi_3d = modality_map(e3d, pass.recon_3d.view(), MapKind::Psi3D)?;
    let combined = fuse(&psi_2d, &psi_3d, cfg.strategy)?;
    let smoothed = if cfg.mask_before_smooth {
        gaussian_smooth(&mask_invalid(&combined, source_validity)?, cfg.sigma)?
    } else {
        mask_invalid(&gaussian_smooth(&combined, cfg.sigma)?, source_validity)?
    };
    let score = score_sample(&smoothed)?;
    Ok(Inference { psi_2d, psi_3d, combined, smoothed, score })
}

pub fn infer_sample(params: &ModelParams<f32>, sample: &Sample, cfg: &InferConfig) -> Result<Inference> {
    infer(params, sample.e2d.data().view(), sample.e3d.data().view(), &sample.source_validity, cfg)
}
