//! Synthetic stand-in for backbone features.
//!
//! Each sample carries `structure_rank` smooth spatial fields shared by both modalities.
//! The fields are rendered into each modality through a fixed random channel mix (fixed per
//! `spec.seed`), then i.i.d. Gaussian noise is added. Normal features therefore live near a
//! low-dimensional subspace that correlates the two modalities.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Mask, Modality};
use crate::error::{arg_err, Result};
use crate::seed::{self, ROLE_SYNTH_ANOMALY, ROLE_SYNTH_ARTIFACT, ROLE_SYNTH_MIX, ROLE_SYNTH_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyShape {
    Blob,
    Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySpec {
    pub shape: AnomalyShape,
    pub area_fraction: f64,
    /// Root-mean-square shift per channel; comparable to `noise_sigma` in either modality.
    pub magnitude: f64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            shape: AnomalyShape::Blob,
            area_fraction: 0.05,
            magnitude: 0.3,
        }
    }
}

/// Modality-specific nuisance: blobs perturbing one modality only, in every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactSpec {
    /// Blobs per modality per sample.
    pub count: usize,
    pub area_fraction: f64,
    /// Root-mean-square shift per channel.
    pub magnitude: f64,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            count: 1,
            area_fraction: 0.05,
            magnitude: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub d_2d: usize,
    pub d_3d: usize,
    pub structure_rank: usize,
    pub noise_sigma: f64,
    pub anomaly: AnomalySpec,
    pub artifacts: ArtifactSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            d_2d: 24,
            d_3d: 36,
            structure_rank: 4,
            noise_sigma: 0.1,
            anomaly: AnomalySpec::default(),
            artifacts: ArtifactSpec::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.d_2d == 0 || self.d_3d == 0 {
            return Err(arg_err!("synthetic dims must be positive"));
        }
        if self.structure_rank == 0 {
            return Err(arg_err!("structure_rank must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(arg_err!("noise_sigma must be a finite non-negative number"));
        }
        let a = &self.anomaly;
        if !(a.area_fraction > 0.0 && a.area_fraction < 0.5) {
            return Err(arg_err!("anomaly.area_fraction must lie in (0, 0.5)"));
        }
        if !(a.magnitude.is_finite() && a.magnitude >= 0.0) {
            return Err(arg_err!("anomaly.magnitude must be finite and non-negative"));
        }
        let n = &self.artifacts;
        if n.count > 0 && !(n.area_fraction > 0.0 && n.area_fraction < 0.5) {
            return Err(arg_err!("artifacts.area_fraction must lie in (0, 0.5)"));
        }
        if !(n.magnitude.is_finite() && n.magnitude >= 0.0) {
            return Err(arg_err!("artifacts.magnitude must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of pixels an anomaly region covers.
    pub fn anomaly_area(&self) -> usize {
        self.area(self.anomaly.area_fraction)
    }

    fn area(&self, fraction: f64) -> usize {
        let pixels = self.height * self.width;
        ((fraction * pixels as f64).round() as usize).clamp(1, pixels)
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Smooth field: sum of three low-frequency plane waves.
fn spatial_field(rng: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = rng.gen_range(0.5..1.0);
            let fy = rng.gen_range(0.0..1.5);
            let fx = rng.gen_range(0.0..1.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (amp, fy, fx, phase)
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        waves
            .iter()
            .map(|&(amp, fy, fx, phase)| {
                amp * (2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase).cos()
            })
            .sum::<f64>()
            / 3f64.sqrt()
    })
}

fn render(
    fields: &[Array2<f64>],
    mix: &Array2<f64>,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Array3<f64> {
    let (h, w) = fields[0].dim();
    let d = mix.nrows();
    let mut out = Array3::<f64>::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let mut v = 0.0;
                for (k, field) in fields.iter().enumerate() {
                    v += mix[[c, k]] * field[[y, x]];
                }
                if noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += noise_sigma * z;
                }
                out[[y, x, c]] = v;
            }
        }
    }
    out
}

fn normal_pair_f64(spec: &SyntheticSpec, sample_seed: u64) -> (Array3<f64>, Array3<f64>) {
    let r = spec.structure_rank;
    let mut mix_rng = seed::rng(seed::derive(spec.seed, ROLE_SYNTH_MIX));
    let scale = 1.0 / (r as f64).sqrt();
    let mix_2d = gaussian_matrix(&mut mix_rng, spec.d_2d, r, scale);
    let mix_3d = gaussian_matrix(&mut mix_rng, spec.d_3d, r, scale);

    let mut rng = seed::rng(seed::derive_indexed(spec.seed, ROLE_SYNTH_SAMPLE, sample_seed));
    let fields: Vec<Array2<f64>> = (0..r)
        .map(|_| spatial_field(&mut rng, spec.height, spec.width))
        .collect();
    let mut e2d = render(&fields, &mix_2d, spec.noise_sigma, &mut rng);
    let mut e3d = render(&fields, &mix_3d, spec.noise_sigma, &mut rng);

    let art = &spec.artifacts;
    let mut rng = seed::rng(seed::derive_indexed(spec.seed, ROLE_SYNTH_ARTIFACT, sample_seed));
    for data in [&mut e2d, &mut e3d] {
        for _ in 0..art.count {
            let mask = grow_blob(&mut rng, spec.height, spec.width, spec.area(art.area_fraction));
            displace(&mut rng, data, &mask, art.magnitude);
        }
    }
    (e2d, e3d)
}

fn to_map(modality: Modality, data: Array3<f64>) -> Result<FeatureMap> {
    FeatureMap::dense(modality, data.mapv(|v| v as f32))
}

/// Anomaly-free feature pair, deterministic in `(spec.seed, sample_seed)`.
pub fn synth_normal_sample(spec: &SyntheticSpec, sample_seed: u64) -> Result<(FeatureMap, FeatureMap)> {
    spec.validate()?;
    let (e2d, e3d) = normal_pair_f64(spec, sample_seed);
    Ok((to_map(Modality::TwoD, e2d)?, to_map(Modality::ThreeD, e3d)?))
}

/// Normal pair with one connected region perturbed in both modalities; returns the region mask.
pub fn synth_anomalous_sample(
    spec: &SyntheticSpec,
    sample_seed: u64,
) -> Result<(FeatureMap, FeatureMap, Mask)> {
    spec.validate()?;
    let (mut e2d, mut e3d) = normal_pair_f64(spec, sample_seed);
    let mut rng = seed::rng(seed::derive_indexed(spec.seed, ROLE_SYNTH_ANOMALY, sample_seed));
    let mask = match spec.anomaly.shape {
        AnomalyShape::Blob => grow_blob(&mut rng, spec.height, spec.width, spec.anomaly_area()),
        AnomalyShape::Rect => place_rect(&mut rng, spec.height, spec.width, spec.anomaly_area()),
    };
    for data in [&mut e2d, &mut e3d] {
        displace(&mut rng, data, &mask, spec.anomaly.magnitude);
    }
    Ok((to_map(Modality::TwoD, e2d)?, to_map(Modality::ThreeD, e3d)?, mask))
}

/// Adds one random direction, scaled to an RMS of `magnitude` per channel, inside `mask`.
fn displace(rng: &mut impl Rng, data: &mut Array3<f64>, mask: &Mask, magnitude: f64) {
    let d = data.dim().2;
    let scale = magnitude * (d as f64).sqrt();
    let dir = unit_vector(rng, d);
    for ((y, x), inside) in mask.indexed_iter() {
        if *inside {
            for (c, u) in dir.iter().enumerate() {
                data[[y, x, c]] += scale * u;
            }
        }
    }
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random 4-connected growth from a seed pixel until `area` pixels are covered.
fn grow_blob(rng: &mut impl Rng, h: usize, w: usize, area: usize) -> Mask {
    let mut mask = Mask::from_elem((h, w), false);
    let mut in_frontier = Mask::from_elem((h, w), false);
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    let start = (rng.gen_range(0..h), rng.gen_range(0..w));
    frontier.push(start);
    in_frontier[start] = true;
    let mut filled = 0;
    while filled < area && !frontier.is_empty() {
        let pick = rng.gen_range(0..frontier.len());
        let (y, x) = frontier.swap_remove(pick);
        mask[[y, x]] = true;
        filled += 1;
        let neighbours = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && !mask[[ny, nx]] && !in_frontier[[ny, nx]] {
                in_frontier[[ny, nx]] = true;
                frontier.push((ny, nx));
            }
        }
    }
    mask
}

fn place_rect(rng: &mut impl Rng, h: usize, w: usize, area: usize) -> Mask {
    let rh = ((area as f64).sqrt().round() as usize).clamp(1, h);
    let rw = ((area as f64 / rh as f64).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - rh);
    let left = rng.gen_range(0..=w - rw);
    Mask::from_shape_fn((h, w), |(y, x)| {
        y >= top && y < top + rh && x >= left && x < left + rw
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components(mask: &Mask) -> usize {
        let (h, w) = mask.dim();
        let mut seen = Mask::from_elem((h, w), false);
        let mut count = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !mask[[sy, sx]] || seen[[sy, sx]] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(sy, sx)];
                seen[[sy, sx]] = true;
                while let Some((y, x)) = stack.pop() {
                    for (ny, nx) in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
                        if ny < h && nx < w && mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn deterministic_in_seeds() {
        let spec = SyntheticSpec::default();
        let a = synth_normal_sample(&spec, 3).unwrap();
        let b = synth_normal_sample(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_normal_sample(&spec, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn default_shapes() {
        let spec = SyntheticSpec::default();
        let (e2, e3) = synth_normal_sample(&spec, 0).unwrap();
        assert_eq!(e2.data().dim(), (16, 16, 24));
        assert_eq!(e3.data().dim(), (16, 16, 36));
        assert_eq!(e2.modality(), Modality::TwoD);
        assert_eq!(e3.modality(), Modality::ThreeD);
        assert!(e3.is_fully_valid());
    }

    #[test]
    fn rank_one_noise_free_channels_are_proportional() {
        let spec = SyntheticSpec {
            structure_rank: 1,
            noise_sigma: 0.0,
            artifacts: ArtifactSpec { count: 0, ..ArtifactSpec::default() },
            ..SyntheticSpec::default()
        };
        let (e2, e3) = synth_normal_sample(&spec, 11).unwrap();
        let pattern = e2.data().slice(ndarray::s![.., .., 0]).mapv(|v| v as f64);
        let norm2: f64 = pattern.iter().map(|v| v * v).sum();
        for map in [&e2, &e3] {
            for c in 0..map.channels() {
                let chan = map.data().slice(ndarray::s![.., .., c]).mapv(|v| v as f64);
                let k = chan.iter().zip(pattern.iter()).map(|(a, b)| a * b).sum::<f64>() / norm2;
                for (a, b) in chan.iter().zip(pattern.iter()) {
                    assert!((a - k * b).abs() < 1e-5 * (1.0 + a.abs()));
                }
            }
        }
    }

    #[test]
    fn zero_magnitude_matches_normal() {
        let mut spec = SyntheticSpec::default();
        spec.anomaly.magnitude = 0.0;
        let (n2, n3) = synth_normal_sample(&spec, 5).unwrap();
        let (a2, a3, mask) = synth_anomalous_sample(&spec, 5).unwrap();
        assert_eq!(n2, a2);
        assert_eq!(n3, a3);
        assert!(mask.iter().any(|v| *v));
    }

    #[test]
    fn area_and_connectivity() {
        for shape in [AnomalyShape::Blob, AnomalyShape::Rect] {
            let mut spec = SyntheticSpec::default();
            spec.anomaly.shape = shape;
            for s in 0..20 {
                let (_, _, mask) = synth_anomalous_sample(&spec, s).unwrap();
                let area = mask.iter().filter(|v| **v).count();
                assert!((12..=13).contains(&area), "{shape:?} area {area}");
                assert_eq!(components(&mask), 1);
            }
        }
    }

    #[test]
    fn perturbation_touches_exactly_the_mask() {
        let spec = SyntheticSpec::default();
        let (n2, n3) = synth_normal_sample(&spec, 9).unwrap();
        let (a2, a3, mask) = synth_anomalous_sample(&spec, 9).unwrap();
        for (n, a) in [(&n2, &a2), (&n3, &a3)] {
            for ((y, x), inside) in mask.indexed_iter() {
                let diff: f64 = (0..n.channels())
                    .map(|c| (a.data()[[y, x, c]] - n.data()[[y, x, c]]) as f64)
                    .map(|d| d * d)
                    .sum::<f64>()
                    .sqrt();
                if *inside {
                    let rms = diff / (n.channels() as f64).sqrt();
                    assert!((rms - spec.anomaly.magnitude).abs() < 1e-4);
                } else {
                    assert_eq!(diff, 0.0);
                }
            }
        }
    }

    #[test]
    fn artifacts_are_modality_specific_blobs() {
        let clean = SyntheticSpec { artifacts: ArtifactSpec { count: 0, ..ArtifactSpec::default() }, ..SyntheticSpec::default() };
        let noisy = SyntheticSpec::default();
        let (c2, c3) = synth_normal_sample(&clean, 5).unwrap();
        let (n2, n3) = synth_normal_sample(&noisy, 5).unwrap();
        let touched = |a: &FeatureMap, b: &FeatureMap| {
            Mask::from_shape_fn((a.height(), a.width()), |(y, x)| {
                (0..a.channels()).any(|c| a.data()[[y, x, c]] != b.data()[[y, x, c]])
            })
        };
        let (t2, t3) = (touched(&c2, &n2), touched(&c3, &n3));
        let area = noisy.area(noisy.artifacts.area_fraction);
        assert_eq!(t2.iter().filter(|v| **v).count(), area);
        assert_eq!(t3.iter().filter(|v| **v).count(), area);
        assert_eq!(components(&t2), 1);
        assert_ne!(t2, t3);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.anomaly.area_fraction = 0.5;
        assert!(spec.validate().is_err());
        let spec = SyntheticSpec { structure_rank: 0, ..SyntheticSpec::default() };
        assert!(synth_normal_sample(&spec, 0).is_err());
    }
}
