//! Position-wise building blocks. Activations are `N×C` matrices, one row per pixel.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform fan-in init, `W ~ U(-sqrt(1/in), sqrt(1/in))`, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || T::lit(rng.gen_range(-bound..bound))),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::lit(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

fn inv_sqrt_2<T: Scalar>() -> T {
    T::lit(std::f64::consts::FRAC_1_SQRT_2)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * inv_sqrt_2::<T>()).erf())
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * inv_sqrt_2::<T>()).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn gelu_forward<T: Scalar>(z: ArrayView2<T>) -> Array2<T> {
    z.mapv(gelu)
}

pub fn gelu_backward<T: Scalar>(z: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let mut dz = dy.to_owned();
    Zip::from(&mut dz).and(&z).for_each(|d, &zv| *d *= gelu_grad(zv));
    dz
}

/// Per-row layer normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

/// Values kept from the forward pass of [`LayerNorm`].
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: Array1::zeros(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (n, c) = x.dim();
        let cf = T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut normalized = Array2::zeros((n, c));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            Zip::from(normalized.row_mut(i))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * inv);
        }
        let mut y = &normalized * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        let (n, c) = dy.dim();
        grad.gamma += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let cf = T::lit(c as f64);
        let mut dx = Array2::zeros((n, c));
        for i in 0..n {
            let g = dxhat.row(i);
            let xh = cache.normalized.row(i);
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            let scale = cache.inv_std[i] / cf;
            Zip::from(dx.row_mut(i))
                .and(g)
                .and(xh)
                .for_each(|d, &gv, &xv| *d = scale * (cf * gv - sum_g - xv * sum_gx));
        }
        dx
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.mapv(|v| U::lit(v.to_f64_lossy())),
            beta: self.beta.mapv(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

/// Inverted dropout mask: entries are `0` or `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(rng: &mut (impl Rng + ?Sized), shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { T::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_values() {
        // x·Φ(x) at x = 1: Φ(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(-1.0f64) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(3);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0], [-4.0, 0.0, 4.0]].view());
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = crate::seed::rng(1);
        let m: Array2<f64> = dropout_mask(&mut rng, (50, 40), 0.1);
        let keep = 1.0 / 0.9;
        assert!(m.iter().all(|&v| v == 0.0 || v == keep));
        let zeros = m.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 100 && zeros < 320, "{zeros}");
    }

    #[test]
    fn linear_init_bounds_and_zero_bias() {
        let mut rng = crate::seed::rng(7);
        let l = Linear::<f32>::init(&mut rng, 16, 5);
        assert!(l.weight.iter().all(|v| v.abs() <= 0.25));
        assert!(l.bias.iter().all(|v| *v == 0.0));
    }
}
