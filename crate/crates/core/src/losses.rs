//! Reconstruction losses: zero-normalized SSD, edge-aware smoothness and pooled census
//! distance, each with its exact gradient with respect to the reconstruction.
//!
//! Every term honours a validity mask: pixels marked invalid neither contribute to the value
//! nor receive gradient.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::feature_store::Mask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_smooth: f64,
    pub lambda_census: f64,
    pub epsilon: f64,
    pub census_kernel: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sim: 1.0,
            lambda_smooth: 1.0,
            lambda_census: 1.0,
            epsilon: 1e-8,
            census_kernel: 3,
        }
    }
}

impl LossWeights {
    pub fn with_lambdas(sim: f64, smooth: f64, census: f64) -> Self {
        Self {
            lambda_sim: sim,
            lambda_smooth: smooth,
            lambda_census: census,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_sim, self.lambda_smooth, self.lambda_census];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(arg_err!("loss weights must be finite and non-negative"));
        }
        if !lambdas.iter().any(|l| *l > 0.0) {
            return Err(arg_err!("at least one loss weight must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(arg_err!("epsilon must be positive"));
        }
        if self.census_kernel.is_multiple_of(2) {
            return Err(arg_err!("census_kernel must be odd"));
        }
        Ok(())
    }
}

/// Per-term values; each term is the sum of its 2D and 3D parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub smooth: f64,
    pub census: f64,
    pub total: f64,
    pub sim_2d: f64,
    pub sim_3d: f64,
    pub smooth_2d: f64,
    pub smooth_3d: f64,
    pub census_2d: f64,
    pub census_3d: f64,
}

impl LossBreakdown {
    fn combine(parts_2d: [f64; 3], parts_3d: [f64; 3], w: &LossWeights) -> Self {
        let sim = parts_2d[0] + parts_3d[0];
        let smooth = parts_2d[1] + parts_3d[1];
        let census = parts_2d[2] + parts_3d[2];
        Self {
            sim,
            smooth,
            census,
            total: w.lambda_sim * sim + w.lambda_smooth * smooth + w.lambda_census * census,
            sim_2d: parts_2d[0],
            sim_3d: parts_3d[0],
            smooth_2d: parts_2d[1],
            smooth_3d: parts_3d[1],
            census_2d: parts_2d[2],
            census_3d: parts_3d[2],
        }
    }

    /// Component-wise running sum, for epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.sim += other.sim;
        self.smooth += other.smooth;
        self.census += other.census;
        self.total += other.total;
        self.sim_2d += other.sim_2d;
        self.sim_3d += other.sim_3d;
        self.smooth_2d += other.smooth_2d;
        self.smooth_3d += other.smooth_3d;
        self.census_2d += other.census_2d;
        self.census_3d += other.census_3d;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            sim: self.sim * k,
            smooth: self.smooth * k,
            census: self.census * k,
            total: self.total * k,
            sim_2d: self.sim_2d * k,
            sim_3d: self.sim_3d * k,
            smooth_2d: self.smooth_2d * k,
            smooth_3d: self.smooth_3d * k,
            census_2d: self.census_2d * k,
            census_3d: self.census_3d * k,
        }
    }
}

fn check_pair<T>(e: &ArrayView3<T>, ehat: &ArrayView3<T>, valid: &Mask) -> Result<()> {
    if e.dim() != ehat.dim() {
        return Err(shape_err!("feature {:?} vs reconstruction {:?}", e.dim(), ehat.dim()));
    }
    let (h, w, _) = e.dim();
    if valid.dim() != (h, w) {
        return Err(shape_err!("mask {:?} vs features {h}x{w}", valid.dim()));
    }
    Ok(())
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Zero-normalized SSD with per-channel mean and population std over valid pixels.
fn znssd_impl<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    eps: f64,
    valid: &Mask,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    check_pair(&e, &ehat, valid)?;
    let (h, w, d) = e.dim();
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| valid[[y, x]])
        .collect();
    let n = pixels.len();
    if n < 2 {
        return Err(arg_err!("zero-normalized SSD needs at least two valid pixels, found {n}"));
    }
    let nf = T::lit(n as f64);
    let norm = T::lit((n * d) as f64);
    let eps = T::lit(eps);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Array3::zeros((h, w, d)));

    let mut a = vec![T::zero(); n];
    let mut xs = vec![T::zero(); n];
    for c in 0..d {
        let stats = |vals: &mut Vec<T>, src: &ArrayView3<T>| {
            for (k, &(y, x)) in pixels.iter().enumerate() {
                vals[k] = src[[y, x, c]];
            }
            let mu = vals.iter().copied().sum::<T>() / nf;
            let var = vals.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            (mu, var.sqrt())
        };
        let (mu_e, sd_e) = stats(&mut a, &e);
        let (mu_x, sd_x) = stats(&mut xs, &ehat);
        let (se, sx) = (sd_e + eps, sd_x + eps);
        let mut r = vec![T::zero(); n];
        for k in 0..n {
            r[k] = (xs[k] - mu_x) / sx - (a[k] - mu_e) / se;
            total += r[k] * r[k];
        }
        if let Some(g) = grad.as_mut() {
            // dL/db_k = 2 r_k / N, b_k = (x_k - mu)/(sigma + eps)
            let gb: Vec<T> = r.iter().map(|&v| T::lit(2.0) * v / norm).collect();
            let mean_gb = gb.iter().copied().sum::<T>() / nf;
            let cov = gb.iter().zip(&xs).map(|(&g, &x)| g * (x - mu_x)).sum::<T>();
            let sigma_term = if sd_x > T::zero() {
                cov / (sx * sx * nf * sd_x)
            } else {
                T::zero()
            };
            for (k, &(y, x)) in pixels.iter().enumerate() {
                g[[y, x, c]] = (gb[k] - mean_gb) / sx - sigma_term * (xs[k] - mu_x);
            }
        }
    }
    Ok((total / norm, grad))
}

pub fn znssd<T: Scalar>(e: ArrayView3<T>, ehat: ArrayView3<T>, eps: f64, valid: &Mask) -> Result<T> {
    Ok(znssd_impl(e, ehat, eps, valid, false)?.0)
}

pub fn znssd_with_grad<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    eps: f64,
    valid: &Mask,
) -> Result<(T, Array3<T>)> {
    let (v, g) = znssd_impl(e, ehat, eps, valid, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Edge-aware smoothness of the error map `ê - e`, forward differences, normalized by `H·W·D`.
fn smoothness_impl<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    valid: &Mask,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    check_pair(&e, &ehat, valid)?;
    let (h, w, d) = e.dim();
    if h == 1 && w == 1 {
        return Err(arg_err!("smoothness is undefined on a 1x1 map"));
    }
    let norm = T::lit((h * w * d) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Array3::zeros((h, w, d)));
    let mut visit = |(y0, x0): (usize, usize), (y1, x1): (usize, usize)| {
        if !valid[[y0, x0]] || !valid[[y1, x1]] {
            return;
        }
        for c in 0..d {
            let de = (ehat[[y1, x1, c]] - e[[y1, x1, c]]) - (ehat[[y0, x0, c]] - e[[y0, x0, c]]);
            let weight = (-(e[[y1, x1, c]] - e[[y0, x0, c]]).abs()).exp();
            total += de.abs() * weight;
            if let Some(g) = grad.as_mut() {
                let s = sign(de) * weight / norm;
                g[[y1, x1, c]] += s;
                g[[y0, x0, c]] -= s;
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                visit((y, x), (y, x + 1));
            }
            if y + 1 < h {
                visit((y, x), (y + 1, x));
            }
        }
    }
    Ok((total / norm, grad))
}

pub fn smoothness<T: Scalar>(e: ArrayView3<T>, ehat: ArrayView3<T>, valid: &Mask) -> Result<T> {
    Ok(smoothness_impl(e, ehat, valid, false)?.0)
}

pub fn smoothness_with_grad<T: Scalar>(e: ArrayView3<T>, ehat: ArrayView3<T>, valid: &Mask) -> Result<(T, Array3<T>)> {
    let (v, g) = smoothness_impl(e, ehat, valid, true)?;
    Ok((v, g.expect("gradient requested")))
}

type Tap = ((usize, usize), usize);

/// Replicate-padded window of pixel `(y, x)` as `(source pixel, multiplicity)` over valid
/// pixels only, together with the number of valid window taps.
fn pool_taps(valid: &Mask, y: usize, x: usize, kernel: usize) -> (Vec<Tap>, usize) {
    let (h, w) = valid.dim();
    let r = (kernel / 2) as isize;
    let mut taps: Vec<Tap> = Vec::with_capacity(kernel * kernel);
    let mut count = 0;
    for dy in -r..=r {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        for dx in -r..=r {
            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            if !valid[[sy, sx]] {
                continue;
            }
            count += 1;
            match taps.iter_mut().find(|(p, _)| *p == (sy, sx)) {
                Some((_, m)) => *m += 1,
                None => taps.push(((sy, sx), 1)),
            }
        }
    }
    (taps, count)
}

/// Mean absolute difference of `k×k` average-pooled maps (stride 1, replicate padding).
///
/// Only valid pixels enter a pooling window, so with a fully valid mask this is plain
/// average pooling.
fn census_impl<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    kernel: usize,
    valid: &Mask,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    check_pair(&e, &ehat, valid)?;
    if kernel.is_multiple_of(2) {
        return Err(arg_err!("census kernel must be odd, got {kernel}"));
    }
    let (h, w, d) = e.dim();
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Err(arg_err!("census loss needs at least one valid pixel"));
    }
    let norm = T::lit((n_valid * d) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Array3::zeros((h, w, d)));
    for y in 0..h {
        for x in 0..w {
            if !valid[[y, x]] {
                continue;
            }
            let (taps, count) = pool_taps(valid, y, x, kernel);
            let inv = T::one() / T::lit(count as f64);
            for c in 0..d {
                let mut pe = T::zero();
                let mut px = T::zero();
                for &((sy, sx), m) in &taps {
                    let m = T::lit(m as f64);
                    pe += m * e[[sy, sx, c]];
                    px += m * ehat[[sy, sx, c]];
                }
                let diff = (px - pe) * inv;
                total += diff.abs();
                if let Some(g) = grad.as_mut() {
                    let s = sign(diff) * inv / norm;
                    for &((sy, sx), m) in &taps {
                        g[[sy, sx, c]] += s * T::lit(m as f64);
                    }
                }
            }
        }
    }
    Ok((total / norm, grad))
}

pub fn census<T: Scalar>(e: ArrayView3<T>, ehat: ArrayView3<T>, kernel: usize, valid: &Mask) -> Result<T> {
    Ok(census_impl(e, ehat, kernel, valid, false)?.0)
}

pub fn census_with_grad<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    kernel: usize,
    valid: &Mask,
) -> Result<(T, Array3<T>)> {
    let (v, g) = census_impl(e, ehat, kernel, valid, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `[sim, smooth, census]` for one modality plus the weighted gradient if requested.
fn modality_terms<T: Scalar>(
    e: ArrayView3<T>,
    ehat: ArrayView3<T>,
    weights: &LossWeights,
    valid: &Mask,
    want_grad: bool,
) -> Result<([f64; 3], Option<Array3<T>>)> {
    let (sim, g_sim) = znssd_impl(e, ehat, weights.epsilon, valid, want_grad && weights.lambda_sim > 0.0)?;
    let (smooth, g_smooth) = smoothness_impl(e, ehat, valid, want_grad && weights.lambda_smooth > 0.0)?;
    let (cen, g_cen) = census_impl(e, ehat, weights.census_kernel, valid, want_grad && weights.lambda_census > 0.0)?;
    let grad = want_grad.then(|| {
        let mut g = Array3::<T>::zeros(e.dim());
        for (part, lambda) in [
            (g_sim, weights.lambda_sim),
            (g_smooth, weights.lambda_smooth),
            (g_cen, weights.lambda_census),
        ] {
            if let Some(p) = part {
                let l = T::lit(lambda);
                Zip::from(&mut g).and(&p).for_each(|a, &b| *a += l * b);
            }
        }
        g
    });
    Ok((
        [sim.to_f64_lossy(), smooth.to_f64_lossy(), cen.to_f64_lossy()],
        grad,
    ))
}

fn full_mask<T>(e: &ArrayView3<T>) -> Mask {
    let (h, w, _) = e.dim();
    Mask::from_elem((h, w), true)
}

/// Weighted training objective over both modalities; the 3D terms use `valid_3d`.
pub fn total_loss<T: Scalar>(
    e2d: ArrayView3<T>,
    ehat2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    ehat3d: ArrayView3<T>,
    weights: &LossWeights,
    valid_3d: &Mask,
) -> Result<LossBreakdown> {
    let (p2, _) = modality_terms(e2d, ehat2d, weights, &full_mask(&e2d), false)?;
    let (p3, _) = modality_terms(e3d, ehat3d, weights, valid_3d, false)?;
    Ok(LossBreakdown::combine(p2, p3, weights))
}

/// `(dL/dÊ_2D, dL/dÊ_3D)` of [`total_loss`].
pub fn loss_gradients<T: Scalar>(
    e2d: ArrayView3<T>,
    ehat2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    ehat3d: ArrayView3<T>,
    weights: &LossWeights,
    valid_3d: &Mask,
) -> Result<(Array3<T>, Array3<T>)> {
    let (_, g2, g3) = loss_and_gradients(e2d, ehat2d, e3d, ehat3d, weights, valid_3d)?;
    Ok((g2, g3))
}

/// [`total_loss`] and [`loss_gradients`] in one pass.
pub fn loss_and_gradients<T: Scalar>(
    e2d: ArrayView3<T>,
    ehat2d: ArrayView3<T>,
    e3d: ArrayView3<T>,
    ehat3d: ArrayView3<T>,
    weights: &LossWeights,
    valid_3d: &Mask,
) -> Result<(LossBreakdown, Array3<T>, Array3<T>)> {
    let (p2, g2) = modality_terms(e2d, ehat2d, weights, &full_mask(&e2d), true)?;
    let (p3, g3) = modality_terms(e3d, ehat3d, weights, valid_3d, true)?;
    Ok((
        LossBreakdown::combine(p2, p3, weights),
        g2.expect("gradient requested"),
        g3.expect("gradient requested"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_map(rng: &mut impl Rng, dims: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(dims, || rng.gen_range(-2.0..2.0))
    }

    fn all_valid(h: usize, w: usize) -> Mask {
        Mask::from_elem((h, w), true)
    }

    #[test]
    fn znssd_hand_example() {
        let e = array![[[1.0f64], [3.0]]];
        let x = array![[[3.0f64], [1.0]]];
        let v = znssd(e.view(), x.view(), 1e-12, &all_valid(1, 2)).unwrap();
        assert!((v - 4.0).abs() < 1e-6);
        assert_eq!(znssd(e.view(), e.view(), 1e-8, &all_valid(1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn znssd_needs_two_valid_pixels() {
        let e = array![[[1.0f64], [3.0]]];
        let mut m = all_valid(1, 2);
        m[[0, 1]] = false;
        assert!(znssd(e.view(), e.view(), 1e-8, &m).is_err());
    }

    #[test]
    fn znssd_affine_invariance() {
        let mut rng = crate::seed::rng(1);
        let e = rand_map(&mut rng, (4, 5, 3)).mapv(|v| v * 3.0);
        let mut x = e.clone();
        for c in 0..3 {
            let (a, b) = (0.5 + c as f64, -2.0 + c as f64);
            x.slice_mut(ndarray::s![.., .., c]).mapv_inplace(|v| a * v + b);
        }
        assert!(znssd(e.view(), x.view(), 1e-8, &all_valid(4, 5)).unwrap() <= 1e-6);
    }

    #[test]
    fn smoothness_hand_example_and_constant_offset() {
        let e = Array3::<f64>::zeros((2, 2, 1));
        let x = array![[[0.0], [1.0]], [[0.0], [1.0]]];
        assert!((smoothness(e.view(), x.view(), &all_valid(2, 2)).unwrap() - 0.5).abs() < 1e-12);

        let mut rng = crate::seed::rng(2);
        let e = rand_map(&mut rng, (3, 4, 2));
        let shifted = e.mapv(|v| v + 0.75);
        assert_eq!(smoothness(e.view(), shifted.view(), &all_valid(3, 4)).unwrap(), 0.0);
        assert!(smoothness(Array3::<f64>::zeros((1, 1, 1)).view(), Array3::zeros((1, 1, 1)).view(), &all_valid(1, 1)).is_err());
    }

    #[test]
    fn smoothness_edge_damping() {
        let flat = Array3::<f64>::zeros((1, 2, 1));
        let edge = array![[[0.0f64], [2.0]]];
        let err = array![[[0.0f64], [1.0]]];
        let undamped = smoothness(flat.view(), (&flat + &err).view(), &all_valid(1, 2)).unwrap();
        let damped = smoothness(edge.view(), (&edge + &err).view(), &all_valid(1, 2)).unwrap();
        assert!(damped < undamped);
        assert!((damped / undamped - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn smoothness_skips_pairs_with_invalid_partner() {
        let e = Array3::<f64>::zeros((1, 3, 1));
        let x = array![[[0.0f64], [5.0], [0.0]]];
        let mut m = all_valid(1, 3);
        m[[0, 1]] = false;
        assert_eq!(smoothness(e.view(), x.view(), &m).unwrap(), 0.0);
    }

    /// Brute-force replicate-padded average pooling of one channel.
    fn pool_oracle(x: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
        let (h, w) = (x.len() as isize, x[0].len() as isize);
        let r = (k / 2) as isize;
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|xx| {
                        let mut s = 0.0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                s += x[(y + dy).clamp(0, h - 1) as usize][(xx + dx).clamp(0, w - 1) as usize];
                            }
                        }
                        s / (k * k) as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn census_hand_example_matches_pool_oracle() {
        assert_eq!(pool_oracle(&[vec![0.0, 3.0]], 3), vec![vec![1.0, 2.0]]);
        assert_eq!(pool_oracle(&[vec![3.0, 0.0]], 3), vec![vec![2.0, 1.0]]);
        let e = array![[[0.0f64], [3.0]]];
        let x = array![[[3.0f64], [0.0]]];
        let v = census(e.view(), x.view(), 3, &all_valid(1, 2)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn census_constants_identity_and_even_kernel() {
        let e = Array3::from_elem((3, 3, 2), 2.0f64);
        let x = Array3::from_elem((3, 3, 2), 5.0f64);
        assert!((census(e.view(), x.view(), 3, &all_valid(3, 3)).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(census(e.view(), e.view(), 5, &all_valid(3, 3)).unwrap(), 0.0);
        assert!(census(e.view(), x.view(), 2, &all_valid(3, 3)).is_err());
    }

    #[test]
    fn census_matches_oracle_on_random_maps() {
        let mut rng = crate::seed::rng(5);
        for _ in 0..20 {
            let e = rand_map(&mut rng, (4, 5, 1));
            let x = rand_map(&mut rng, (4, 5, 1));
            let rows = |m: &Array3<f64>| (0..4).map(|y| (0..5).map(|xx| m[[y, xx, 0]]).collect()).collect::<Vec<Vec<f64>>>();
            let (pe, px) = (pool_oracle(&rows(&e), 3), pool_oracle(&rows(&x), 3));
            let oracle: f64 = pe.iter().flatten().zip(px.iter().flatten()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 20.0;
            let v = census(e.view(), x.view(), 3, &all_valid(4, 5)).unwrap();
            assert!((v - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn census_flip_invariance() {
        let mut rng = crate::seed::rng(6);
        let e = rand_map(&mut rng, (4, 5, 2));
        let x = rand_map(&mut rng, (4, 5, 2));
        let flip = |m: &Array3<f64>| m.slice(ndarray::s![..;-1, .., ..]).to_owned();
        let a = census(e.view(), x.view(), 3, &all_valid(4, 5)).unwrap();
        let b = census(flip(&e).view(), flip(&x).view(), 3, &all_valid(4, 5)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn breakdown_weights_and_identity() {
        let mut rng = crate::seed::rng(7);
        let e2 = rand_map(&mut rng, (4, 4, 3));
        let e3 = rand_map(&mut rng, (4, 4, 2));
        let x2 = rand_map(&mut rng, (4, 4, 3));
        let x3 = rand_map(&mut rng, (4, 4, 2));
        let valid = all_valid(4, 4);
        let w = LossWeights::default();
        let zero = total_loss(e2.view(), e2.view(), e3.view(), e3.view(), &w, &valid).unwrap();
        assert_eq!(zero.total, 0.0);
        assert_eq!((zero.sim, zero.smooth, zero.census), (0.0, 0.0, 0.0));

        let w = LossWeights::with_lambdas(0.7, 1.3, 2.1);
        let b = total_loss(e2.view(), x2.view(), e3.view(), x3.view(), &w, &valid).unwrap();
        let recombined = 0.7 * b.sim + 1.3 * b.smooth + 2.1 * b.census;
        assert!((recombined - b.total).abs() <= 1e-6 * b.total.abs());
        assert!((b.sim - (b.sim_2d + b.sim_3d)).abs() < 1e-12);

        let only_sim = total_loss(e2.view(), x2.view(), e3.view(), x3.view(), &LossWeights::with_lambdas(1.0, 0.0, 0.0), &valid).unwrap();
        assert_eq!(only_sim.total, only_sim.sim);
    }

    #[test]
    fn invalid_pixels_get_zero_gradient() {
        let mut rng = crate::seed::rng(8);
        let e2 = rand_map(&mut rng, (4, 4, 3));
        let e3 = rand_map(&mut rng, (4, 4, 3));
        let x2 = rand_map(&mut rng, (4, 4, 3));
        let x3 = rand_map(&mut rng, (4, 4, 3));
        let valid = Mask::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) % 3 != 1);
        let (_, g3) = loss_gradients(e2.view(), x2.view(), e3.view(), x3.view(), &LossWeights::default(), &valid).unwrap();
        for ((y, x), ok) in valid.indexed_iter() {
            if !ok {
                assert!(g3.slice(ndarray::s![y, x, ..]).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn sim_gradient_vanishes_at_identity() {
        let mut rng = crate::seed::rng(9);
        let e = rand_map(&mut rng, (4, 4, 3));
        let (_, g) = znssd_with_grad(e.view(), e.view(), 1e-8, &all_valid(4, 4)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::with_lambdas(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights { census_kernel: 4, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { epsilon: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
