//! Convolutional block attention: a channel gate from pooled descriptors followed by a
//! spatial gate from a `k×k` convolution over per-pixel channel statistics.
//!
//! The input is an `N×C` matrix with `N = H·W` pixels in row-major order.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::layers::Linear;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Cbam<T> {
    /// Shared channel MLP, `C → C/r`.
    pub fc1: Linear<T>,
    /// `C/r → C`.
    pub fc2: Linear<T>,
    /// Spatial kernel over `[avg, max]` maps, shape `(2, k, k)`.
    pub conv_weight: Array3<T>,
    pub conv_bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct CbamCache<T> {
    pub height: usize,
    pub width: usize,
    input: Array2<T>,
    /// Row 0: spatial average, row 1: spatial max.
    pooled: Array2<T>,
    pooled_argmax: Vec<usize>,
    hidden_pre: Array2<T>,
    pub channel_gate: Array1<T>,
    gated: Array2<T>,
    /// Column 0: channel mean, column 1: channel max, per pixel.
    stats: Array2<T>,
    stats_argmax: Vec<usize>,
    pub spatial_gate: Array1<T>,
}

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn clamp_offset(pos: usize, offset: isize, len: usize) -> usize {
    (pos as isize + offset).clamp(0, len as isize - 1) as usize
}

impl<T: Scalar> Cbam<T> {
    pub fn init(rng: &mut impl Rng, channels: usize, reduction: usize, kernel: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        let fc1 = Linear::init(rng, channels, hidden);
        let fc2 = Linear::init(rng, hidden, channels);
        let bound = (1.0 / (2 * kernel * kernel) as f64).sqrt();
        let conv_weight =
            Array3::from_shape_simple_fn((2, kernel, kernel), || T::lit(rng.gen_range(-bound..bound)));
        Self {
            fc1,
            fc2,
            conv_weight,
            conv_bias: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: Linear::zeros(self.fc1.fan_in(), self.fc1.fan_out()),
            fc2: Linear::zeros(self.fc2.fan_in(), self.fc2.fan_out()),
            conv_weight: Array3::zeros(self.conv_weight.dim()),
            conv_bias: Array1::zeros(1),
        }
    }

    pub fn kernel(&self) -> usize {
        self.conv_weight.dim().1
    }

    pub fn cast<U: Scalar>(&self) -> Cbam<U> {
        Cbam {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            conv_weight: self.conv_weight.mapv(|v| U::lit(v.to_f64_lossy())),
            conv_bias: self.conv_bias.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }

    /// Channel-gate logits from pooled descriptors; returns `(logits, hidden pre-activations)`.
    fn channel_logits(&self, pooled: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
        let hidden_pre = self.fc1.forward(pooled);
        let hidden = hidden_pre.mapv(|v| v.max(T::zero()));
        let out = self.fc2.forward(hidden.view());
        (out.sum_axis(Axis(0)), hidden_pre)
    }

    fn spatial_logits(&self, stats: ArrayView2<T>, h: usize, w: usize) -> Array1<T> {
        let k = self.kernel();
        let r = (k / 2) as isize;
        let bias = self.conv_bias[0];
        let mut z = Array1::from_elem(h * w, bias);
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias;
                for ch in 0..2 {
                    for i in 0..k {
                        let sy = clamp_offset(y, i as isize - r, h);
                        for j in 0..k {
                            let sx = clamp_offset(x, j as isize - r, w);
                            acc += self.conv_weight[[ch, i, j]] * stats[[sy * w + sx, ch]];
                        }
                    }
                }
                z[y * w + x] = acc;
            }
        }
        z
    }

    pub fn forward(&self, input: ArrayView2<T>, height: usize, width: usize) -> (Array2<T>, CbamCache<T>) {
        let (n, c) = input.dim();
        debug_assert_eq!(n, height * width);

        let mut pooled = Array2::zeros((2, c));
        let mut pooled_argmax = vec![0usize; c];
        let nf = T::lit(n as f64);
        for (ch, col) in input.axis_iter(Axis(1)).enumerate() {
            pooled[[0, ch]] = col.sum() / nf;
            let (mut best, mut idx) = (col[0], 0);
            for (i, &v) in col.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    idx = i;
                }
            }
            pooled[[1, ch]] = best;
            pooled_argmax[ch] = idx;
        }
        let (logits, hidden_pre) = self.channel_logits(pooled.view());
        let channel_gate = logits.mapv(sigmoid);
        let gated = &input * &channel_gate;

        let cf = T::lit(c as f64);
        let mut stats = Array2::zeros((n, 2));
        let mut stats_argmax = vec![0usize; n];
        for (p, row) in gated.outer_iter().enumerate() {
            stats[[p, 0]] = row.sum() / cf;
            let (mut best, mut idx) = (row[0], 0);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    idx = i;
                }
            }
            stats[[p, 1]] = best;
            stats_argmax[p] = idx;
        }
        let spatial_gate = self.spatial_logits(stats.view(), height, width).mapv(sigmoid);
        let out = &gated * &spatial_gate.view().insert_axis(Axis(1));
        (
            out,
            CbamCache {
                height,
                width,
                input: input.to_owned(),
                pooled,
                pooled_argmax,
                hidden_pre,
                channel_gate,
                gated,
                stats,
                stats_argmax,
                spatial_gate,
            },
        )
    }

    pub fn backward(&self, cache: &CbamCache<T>, d_out: ArrayView2<T>, grad: &mut Cbam<T>) -> Array2<T> {
        let (n, c) = d_out.dim();
        let (h, w) = (cache.height, cache.width);
        let k = self.kernel();
        let r = (k / 2) as isize;

        // spatial gate
        let mut d_gated = &d_out * &cache.spatial_gate.view().insert_axis(Axis(1));
        let mut dz = Array1::<T>::zeros(n);
        for p in 0..n {
            let dg: T = d_out.row(p).iter().zip(cache.gated.row(p)).map(|(&a, &b)| a * b).sum();
            let g = cache.spatial_gate[p];
            dz[p] = dg * g * (T::one() - g);
        }
        let mut d_stats = Array2::<T>::zeros((n, 2));
        grad.conv_bias[0] += dz.sum();
        for y in 0..h {
            for x in 0..w {
                let dzv = dz[y * w + x];
                for ch in 0..2 {
                    for i in 0..k {
                        let sy = clamp_offset(y, i as isize - r, h);
                        for j in 0..k {
                            let sx = clamp_offset(x, j as isize - r, w);
                            let q = sy * w + sx;
                            grad.conv_weight[[ch, i, j]] += dzv * cache.stats[[q, ch]];
                            d_stats[[q, ch]] += dzv * self.conv_weight[[ch, i, j]];
                        }
                    }
                }
            }
        }
        let cf = T::lit(c as f64);
        for p in 0..n {
            let d_mean = d_stats[[p, 0]] / cf;
            d_gated.row_mut(p).mapv_inplace(|v| v + d_mean);
            d_gated[[p, cache.stats_argmax[p]]] += d_stats[[p, 1]];
        }

        // channel gate
        let mut d_input = &d_gated * &cache.channel_gate;
        let d_logits: Array1<T> = (0..c)
            .map(|ch| {
                let dg: T = d_gated.column(ch).iter().zip(cache.input.column(ch)).map(|(&a, &b)| a * b).sum();
                let g = cache.channel_gate[ch];
                dg * g * (T::one() - g)
            })
            .collect();
        let d_mlp_out = ndarray::stack![Axis(0), d_logits, d_logits];
        let hidden = cache.hidden_pre.mapv(|v| v.max(T::zero()));
        let mut d_hidden = self.fc2.backward(hidden.view(), d_mlp_out.view(), &mut grad.fc2);
        ndarray::Zip::from(&mut d_hidden)
            .and(&cache.hidden_pre)
            .for_each(|d, &pre| {
                if pre <= T::zero() {
                    *d = T::zero()
                }
            });
        let d_pooled = self.fc1.backward(cache.pooled.view(), d_hidden.view(), &mut grad.fc1);
        let nf = T::lit(n as f64);
        for ch in 0..c {
            let d_avg = d_pooled[[0, ch]] / nf;
            d_input.column_mut(ch).mapv_inplace(|v| v + d_avg);
            d_input[[cache.pooled_argmax[ch], ch]] += d_pooled[[1, ch]];
        }
        d_input
    }
}
