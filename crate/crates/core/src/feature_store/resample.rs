//! Spatial alignment: bilinear upsampling, point-to-pixel projection and densification.

use log::debug;
use ndarray::{Array2, Array3};

use super::{FeatureMap, Mask, Modality, PointFeatureSet};
use crate::error::{arg_err, shape_err, Result};

/// Align-corners source coordinate for output index `i` of `dst` samples drawn from `src`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear upsampling with align-corners semantics: output corners coincide with input corners.
pub fn upsample_bilinear(map: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    let (h, w, d) = map.data().dim();
    if target_h < h || target_w < w {
        return Err(shape_err!(
            "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
        ));
    }
    if !map.is_fully_valid() {
        return Err(arg_err!("upsampling requires a fully valid source map"));
    }
    let src = map.data();
    let mut out = Array3::<f32>::zeros((target_h, target_w, d));
    for oy in 0..target_h {
        let sy = source_coord(oy, h, target_h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target_w {
            let sx = source_coord(ox, w, target_w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..d {
                let top = src[[y0, x0, c]] as f64 * (1.0 - fx) + src[[y0, x1, c]] as f64 * fx;
                let bottom = src[[y1, x0, c]] as f64 * (1.0 - fx) + src[[y1, x1, c]] as f64 * fx;
                out[[oy, ox, c]] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    FeatureMap::dense(map.modality(), out)
}

/// Result of scattering points onto the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub map: FeatureMap,
    /// Points whose rounded pixel fell outside the grid.
    pub dropped: usize,
}

/// Accumulates each point into pixel `(round(v), round(u))`, averaging collisions.
///
/// Pixels that receive no point are marked invalid and hold zeros.
pub fn scatter_project(points: &PointFeatureSet, height: usize, width: usize) -> Result<Projection> {
    if height == 0 || width == 0 {
        return Err(shape_err!("projection grid must be positive, got {height}x{width}"));
    }
    let d = points.channels();
    let mut sums = Array3::<f64>::zeros((height, width, d));
    let mut counts = Array2::<u32>::zeros((height, width));
    let mut dropped = 0usize;
    for (row, &(u, v)) in points.features().rows().into_iter().zip(points.pixel_coords()) {
        let (py, px) = (v.round(), u.round());
        if py < 0.0 || px < 0.0 || py >= height as f64 || px >= width as f64 {
            dropped += 1;
            continue;
        }
        let (py, px) = (py as usize, px as usize);
        counts[[py, px]] += 1;
        for (c, f) in row.iter().enumerate() {
            sums[[py, px, c]] += *f as f64;
        }
    }
    if dropped > 0 {
        debug!("scatter_project dropped {dropped} out-of-bounds points");
    }
    let data = Array3::from_shape_fn((height, width, d), |(y, x, c)| {
        let n = counts[[y, x]];
        if n == 0 {
            0.0
        } else {
            (sums[[y, x, c]] / n as f64) as f32
        }
    });
    let validity: Mask = counts.mapv(|n| n > 0);
    Ok(Projection {
        map: FeatureMap::new(Modality::ThreeD, data, validity)?,
        dropped,
    })
}

/// Densified map plus the validity it had before filling.
#[derive(Debug, Clone, PartialEq)]
pub struct Densified {
    pub map: FeatureMap,
    pub source_validity: Mask,
}

/// Fills every invalid pixel with the features of its nearest valid pixel.
///
/// Distance is Euclidean in pixel units; among equidistant candidates the first one in
/// row-major order wins. Valid pixels are copied unchanged.
pub fn densify(map: &FeatureMap) -> Result<Densified> {
    let (h, w, _) = map.data().dim();
    let valid = map.validity();
    if !valid.iter().any(|v| *v) {
        return Err(arg_err!("cannot densify a map with no valid pixels"));
    }
    let mut data = map.data().clone();
    for y in 0..h {
        for x in 0..w {
            if valid[[y, x]] {
                continue;
            }
            let (sy, sx) = nearest_valid(valid, y, x);
            let src = map.data().slice(ndarray::s![sy, sx, ..]).to_owned();
            data.slice_mut(ndarray::s![y, x, ..]).assign(&src);
        }
    }
    Ok(Densified {
        map: FeatureMap::dense(map.modality(), data)?,
        source_validity: valid.clone(),
    })
}

/// Expanding Chebyshev-ring search; exact because every pixel on ring `r` is at least `r` away.
fn nearest_valid(valid: &Mask, y: usize, x: usize) -> (usize, usize) {
    let (h, w) = valid.dim();
    let max_r = h.max(w);
    // (squared distance, row-major index)
    let mut best: Option<(usize, usize)> = None;
    for r in 1..=max_r {
        if let Some((d2, _)) = best {
            if r * r > d2 {
                break;
            }
        }
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let dy = yy.abs_diff(y);
                let dx = xx.abs_diff(x);
                if dy.max(dx) != r || !valid[[yy, xx]] {
                    continue;
                }
                let cand = (dy * dy + dx * dx, yy * w + xx);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
    }
    let (_, idx) = best.expect("at least one valid pixel");
    (idx / w, idx % w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn lerp(a: f64, b: f64, t: f64) -> f64 {
        a + (b - a) * t
    }

    #[test]
    fn upsample_identity_and_constant() {
        let data = Array3::from_shape_fn((3, 4, 2), |(y, x, c)| (y * 7 + x * 3 + c) as f32);
        let map = FeatureMap::dense(Modality::TwoD, data).unwrap();
        assert_eq!(upsample_bilinear(&map, 3, 4).unwrap(), map);

        let constant = FeatureMap::dense(Modality::TwoD, Array3::from_elem((2, 3, 2), 1.25f32)).unwrap();
        let up = upsample_bilinear(&constant, 7, 9).unwrap();
        assert!(up.data().iter().all(|v| *v == 1.25));
    }

    #[test]
    fn upsample_two_to_four_matches_scalar_lerp() {
        let map = FeatureMap::dense(Modality::TwoD, array![[[0.0f32]], [[2.0]]]).unwrap();
        let up = upsample_bilinear(&map, 4, 1).unwrap();
        // oracle: position i maps to t = i/3 along [0, 2]
        let oracle: Vec<f64> = (0..4).map(|i| lerp(0.0, 2.0, i as f64 / 3.0)).collect();
        let expected = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
        for i in 0..4 {
            assert!((oracle[i] - expected[i]).abs() < 1e-12);
            assert!((up.data()[[i, 0, 0]] as f64 - expected[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_rejects_shrink_and_sparse() {
        let map = FeatureMap::dense(Modality::TwoD, Array3::zeros((4, 4, 1))).unwrap();
        assert!(upsample_bilinear(&map, 3, 4).is_err());
        let mut mask = Mask::from_elem((4, 4), true);
        mask[[0, 0]] = false;
        let sparse = FeatureMap::new(Modality::ThreeD, Array3::zeros((4, 4, 1)), mask).unwrap();
        assert!(upsample_bilinear(&sparse, 8, 8).is_err());
    }

    fn points(feats: Vec<Vec<f32>>, coords: Vec<(f64, f64)>) -> PointFeatureSet {
        let d = feats[0].len();
        let flat: Vec<f32> = feats.into_iter().flatten().collect();
        PointFeatureSet::new(Array2::from_shape_vec((coords.len(), d), flat).unwrap(), coords).unwrap()
    }

    #[test]
    fn scatter_single_point() {
        let p = scatter_project(&points(vec![vec![1.0, -2.0]], vec![(0.0, 0.0)]), 3, 3).unwrap();
        assert_eq!(p.dropped, 0);
        assert_eq!(p.map.modality(), Modality::ThreeD);
        assert_eq!(p.map.valid_count(), 1);
        assert!(p.map.validity()[[0, 0]]);
        assert_eq!(p.map.data()[[0, 0, 0]], 1.0);
        assert_eq!(p.map.data()[[0, 0, 1]], -2.0);
    }

    #[test]
    fn scatter_averages_collisions() {
        let p = scatter_project(
            &points(vec![vec![1.0], vec![4.0]], vec![(2.2, 1.1), (1.9, 0.8)]),
            3,
            3,
        )
        .unwrap();
        assert_eq!(p.map.data()[[1, 2, 0]], 2.5);
        assert_eq!(p.map.valid_count(), 1);
    }

    #[test]
    fn scatter_drops_out_of_bounds() {
        let p = scatter_project(&points(vec![vec![1.0]], vec![(-1.0, -1.0)]), 2, 2).unwrap();
        assert_eq!(p.dropped, 1);
        assert_eq!(p.map.valid_count(), 0);
        let p = scatter_project(&points(vec![vec![1.0]], vec![(1.6, 0.0)]), 2, 2).unwrap();
        assert_eq!(p.dropped, 1);
    }

    #[test]
    fn densify_fully_valid_is_identity() {
        let map = FeatureMap::dense(Modality::ThreeD, Array3::from_shape_fn((3, 3, 2), |(y, x, c)| (y + x + c) as f32)).unwrap();
        let d = densify(&map).unwrap();
        assert_eq!(d.map, map);
        assert!(d.source_validity.iter().all(|v| *v));
    }

    #[test]
    fn densify_single_valid_fills_everything() {
        let mut data = Array3::<f32>::zeros((4, 5, 2));
        data[[2, 3, 0]] = 7.0;
        data[[2, 3, 1]] = -1.0;
        let mut mask = Mask::from_elem((4, 5), false);
        mask[[2, 3]] = true;
        let d = densify(&FeatureMap::new(Modality::ThreeD, data, mask.clone()).unwrap()).unwrap();
        assert!(d.map.is_fully_valid());
        assert_eq!(d.source_validity, mask);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(d.map.data()[[y, x, 0]], 7.0);
                assert_eq!(d.map.data()[[y, x, 1]], -1.0);
            }
        }
    }

    #[test]
    fn densify_tie_breaks_row_major() {
        let data = array![[[1.0f32], [0.0], [9.0]]];
        let mask = array![[true, false, true]];
        let d = densify(&FeatureMap::new(Modality::ThreeD, data, mask).unwrap()).unwrap();
        assert_eq!(d.map.data()[[0, 1, 0]], 1.0);
    }

    #[test]
    fn densify_without_valid_pixels_errors() {
        let map = FeatureMap::new(Modality::ThreeD, Array3::zeros((2, 2, 1)), Mask::from_elem((2, 2), false)).unwrap();
        assert!(densify(&map).is_err());
    }

    /// Brute-force nearest valid neighbour over all pixels.
    fn brute_nearest(mask: &Mask, y: usize, x: usize) -> (usize, usize) {
        let (h, w) = mask.dim();
        let mut best = (usize::MAX, usize::MAX);
        for yy in 0..h {
            for xx in 0..w {
                if mask[[yy, xx]] {
                    let d2 = yy.abs_diff(y).pow(2) + xx.abs_diff(x).pow(2);
                    if (d2, yy * w + xx) < best {
                        best = (d2, yy * w + xx);
                    }
                }
            }
        }
        (best.1 / w, best.1 % w)
    }

    fn arb_sparse_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..9, 1usize..9, 1usize..3).prop_flat_map(|(h, w, d)| {
            (
                proptest::collection::vec(-10.0f32..10.0, h * w * d),
                proptest::collection::vec(proptest::bool::weighted(0.3), h * w),
            )
                .prop_map(move |(vals, mut mask)| {
                    mask[0] |= !mask.iter().any(|v| *v);
                    FeatureMap::new(
                        Modality::ThreeD,
                        Array3::from_shape_vec((h, w, d), vals).unwrap(),
                        Mask::from_shape_vec((h, w), mask).unwrap(),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn densify_matches_brute_force_and_is_idempotent(map in arb_sparse_map()) {
            let once = densify(&map).unwrap();
            let (h, w, _) = map.data().dim();
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = brute_nearest(map.validity(), y, x);
                    prop_assert_eq!(
                        once.map.data().slice(ndarray::s![y, x, ..]),
                        map.data().slice(ndarray::s![sy, sx, ..])
                    );
                }
            }
            let twice = densify(&once.map).unwrap();
            prop_assert_eq!(&twice.map, &once.map);
            prop_assert!(once.map.data().iter().all(|v| v.is_finite()));
        }

        #[test]
        fn upsample_stays_within_channel_bounds(
            h in 1usize..5, w in 1usize..5, th in 0usize..6, tw in 0usize..6,
            vals in proptest::collection::vec(-5.0f32..5.0, 32),
        ) {
            let d = 2;
            let data = Array3::from_shape_fn((h, w, d), |(y, x, c)| vals[(y * w + x) * d + c]);
            let map = FeatureMap::dense(Modality::TwoD, data).unwrap();
            let up = upsample_bilinear(&map, h + th, w + tw).unwrap();
            for c in 0..d {
                let src = map.data().slice(ndarray::s![.., .., c]);
                let lo = src.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for v in up.data().slice(ndarray::s![.., .., c]).iter() {
                    prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
                }
                // corners are exact
                prop_assert_eq!(up.data()[[0, 0, c]], map.data()[[0, 0, c]]);
                prop_assert_eq!(up.data()[[h + th - 1, w + tw - 1, c]], map.data()[[h - 1, w - 1, c]]);
            }
        }

        #[test]
        fn scatter_then_densify_is_finite(
            n in 1usize..20, seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let feats = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1e3f32..1e3));
            let coords = (0..n).map(|_| (rng.gen_range(-2.0..8.0), rng.gen_range(-2.0..8.0))).collect();
            let p = scatter_project(&PointFeatureSet::new(feats, coords).unwrap(), 6, 6).unwrap();
            if p.map.valid_count() > 0 {
                let d = densify(&p.map).unwrap();
                prop_assert!(d.map.data().iter().all(|v| v.is_finite()));
            }
        }
    }
}
