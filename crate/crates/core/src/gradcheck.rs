//! Central finite-difference verification of every analytic gradient, in `f64`.
//!
//! Each check builds a scalar objective, perturbs one entry at a time by `±step` and
//! compares `(f(x+h) - f(x-h)) / 2h` against the analytic value. The relative error of an
//! entry is `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true gradient is
//! zero from dividing round-off noise by zero.

use ndarray::{Array2, Array3, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feature_store::Mask;
use crate::losses::{self, LossWeights};
use crate::network::cbam::Cbam;
use crate::network::layers::{gelu_backward, gelu_forward, LayerNorm, Linear};
use crate::network::{self, Architecture, Mode, ModelParams};
use crate::seed;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    pub height: usize,
    pub width: usize,
    pub d_2d: usize,
    pub d_3d: usize,
    pub fused: usize,
    /// Negative control: inflate analytic weight gradients by 1% so the checks must fail.
    pub perturb_weight_gradients: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            height: 4,
            width: 4,
            d_2d: 6,
            d_3d: 9,
            fused: 8,
            perturb_weight_gradients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<20} {:>7} {:>9} {:>14} {:>10}  result\n", "check", "trials", "entries", "max_rel_err", "tolerance");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<20} {:>7} {:>9} {:>14.3e} {:>10.0e}  {}\n",
                c.name,
                c.trials,
                c.entries,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("overall: {}\n", if self.passed { "PASS" } else { "FAIL" }));
        out
    }
}

#[derive(Default)]
struct Tally {
    entries: usize,
    max_rel: f64,
}

impl Tally {
    fn compare(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.entries += 1;
        if rel > self.max_rel || rel.is_nan() {
            self.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
        }
    }

    fn finish(self, name: &str, trials: usize, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials,
            entries: self.entries,
            max_rel_error: self.max_rel,
            tolerance,
            passed: self.max_rel <= tolerance,
        }
    }
}

/// Central difference of `f` with respect to every entry of the tensor selected by `slot`.
fn numeric_grad<S, F>(state: &mut S, step: f64, slot: impl Fn(&mut S) -> ArrayViewMutD<'_, f64>, f: F) -> Vec<f64>
where
    F: Fn(&S) -> f64,
{
    let n = slot(state).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *slot(state).iter_mut().nth(i).unwrap();
        *slot(state).iter_mut().nth(i).unwrap() = orig + step;
        let plus = f(state);
        *slot(state).iter_mut().nth(i).unwrap() = orig - step;
        let minus = f(state);
        *slot(state).iter_mut().nth(i).unwrap() = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

fn compare_all<'a>(tally: &mut Tally, analytic: impl IntoIterator<Item = &'a f64>, numeric: &[f64], floor: f64, inflate: bool) {
    for (a, n) in analytic.into_iter().zip(numeric) {
        let a = if inflate { a * 1.01 } else { *a };
        tally.compare(a, *n, floor);
    }
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn rand2(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn rand3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn check_linear(cfg: &GradcheckConfig) -> CheckResult {
    let mut tally = Tally::default();
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, 0x11, t as u64));
        let (n, i, o) = (cfg.height * cfg.width, rng.gen_range(2..8), rng.gen_range(2..8));
        let mut state = (Linear::<f64>::init(&mut rng, i, o), rand2(&mut rng, (n, i)));
        state.0.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let upstream = rand2(&mut rng, (n, o));
        let f = |s: &(Linear<f64>, Array2<f64>)| dot(&s.0.forward(s.1.view()), &upstream);
        let mut grad = Linear::zeros(i, o);
        let dx = state.0.backward(state.1.view(), upstream.view(), &mut grad);
        let nw = numeric_grad(&mut state, cfg.step, |s| s.0.weight.view_mut().into_dyn(), f);
        compare_all(&mut tally, grad.weight.iter(), &nw, cfg.floor, cfg.perturb_weight_gradients);
        let nb = numeric_grad(&mut state, cfg.step, |s| s.0.bias.view_mut().into_dyn(), f);
        compare_all(&mut tally, grad.bias.iter(), &nb, cfg.floor, false);
        let nx = numeric_grad(&mut state, cfg.step, |s| s.1.view_mut().into_dyn(), f);
        compare_all(&mut tally, dx.iter(), &nx, cfg.floor, false);
    }
    tally.finish("linear", cfg.trials, LAYER_TOLERANCE)
}

fn check_gelu(cfg: &GradcheckConfig) -> CheckResult {
    let mut tally = Tally::default();
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, 0x12, t as u64));
        let mut x = rand2(&mut rng, (cfg.height * cfg.width, 5)).mapv(|v| v * 3.0);
        let upstream = rand2(&mut rng, x.dim());
        let dx = gelu_backward(x.view(), upstream.view());
        let nx = numeric_grad(&mut x, cfg.step, |s| s.view_mut().into_dyn(), |s| dot(&gelu_forward(s.view()), &upstream));
        compare_all(&mut tally, dx.iter(), &nx, cfg.floor, false);
    }
    tally.finish("gelu", cfg.trials, LAYER_TOLERANCE)
}

fn check_layer_norm(cfg: &GradcheckConfig) -> CheckResult {
    let mut tally = Tally::default();
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, 0x13, t as u64));
        let c = rng.gen_range(2..9);
        let mut ln = LayerNorm::<f64>::new(c);
        ln.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        ln.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        let mut state = (ln, rand2(&mut rng, (cfg.height * cfg.width, c)));
        let upstream = rand2(&mut rng, state.1.dim());
        let f = |s: &(LayerNorm<f64>, Array2<f64>)| dot(&s.0.forward(s.1.view()).0, &upstream);
        let (_, cache) = state.0.forward(state.1.view());
        let mut grad = LayerNorm::zeros(c);
        let dx = state.0.backward(&cache, upstream.view(), &mut grad);
        let ng = numeric_grad(&mut state, cfg.step, |s| s.0.gamma.view_mut().into_dyn(), f);
        compare_all(&mut tally, grad.gamma.iter(), &ng, cfg.floor, cfg.perturb_weight_gradients);
        let nb = numeric_grad(&mut state, cfg.step, |s| s.0.beta.view_mut().into_dyn(), f);
        compare_all(&mut tally, grad.beta.iter(), &nb, cfg.floor, false);
        let nx = numeric_grad(&mut state, cfg.step, |s| s.1.view_mut().into_dyn(), f);
        compare_all(&mut tally, dx.iter(), &nx, cfg.floor, false);
    }
    tally.finish("layer_norm", cfg.trials, LAYER_TOLERANCE)
}

/// Channel path: shared MLP weights. Spatial path: convolution kernel and bias.
/// Both also verify the gradient reaching the block input.
fn check_cbam(cfg: &GradcheckConfig) -> (CheckResult, CheckResult) {
    let mut channel = Tally::default();
    let mut spatial = Tally::default();
    let (h, w) = (cfg.height, cfg.width);
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, 0x14, t as u64));
        let c = rng.gen_range(3..10);
        let mut cbam = Cbam::<f64>::init(&mut rng, c, 2, 3);
        cbam.fc1.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        cbam.fc2.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        cbam.conv_bias[0] = rng.gen_range(-0.3..0.3);
        let mut state = (cbam, rand2(&mut rng, (h * w, c)));
        let upstream = rand2(&mut rng, state.1.dim());
        let f = |s: &(Cbam<f64>, Array2<f64>)| dot(&s.0.forward(s.1.view(), h, w).0, &upstream);
        let (_, cache) = state.0.forward(state.1.view(), h, w);
        let mut grad = state.0.zeros_like();
        let dx = state.0.backward(&cache, upstream.view(), &mut grad);
        let inflate = cfg.perturb_weight_gradients;

        let n = numeric_grad(&mut state, cfg.step, |s| s.0.fc1.weight.view_mut().into_dyn(), f);
        compare_all(&mut channel, grad.fc1.weight.iter(), &n, cfg.floor, inflate);
        let n = numeric_grad(&mut state, cfg.step, |s| s.0.fc1.bias.view_mut().into_dyn(), f);
        compare_all(&mut channel, grad.fc1.bias.iter(), &n, cfg.floor, false);
        let n = numeric_grad(&mut state, cfg.step, |s| s.0.fc2.weight.view_mut().into_dyn(), f);
        compare_all(&mut channel, grad.fc2.weight.iter(), &n, cfg.floor, inflate);
        let n = numeric_grad(&mut state, cfg.step, |s| s.0.fc2.bias.view_mut().into_dyn(), f);
        compare_all(&mut channel, grad.fc2.bias.iter(), &n, cfg.floor, false);

        let n = numeric_grad(&mut state, cfg.step, |s| s.0.conv_weight.view_mut().into_dyn(), f);
        compare_all(&mut spatial, grad.conv_weight.iter(), &n, cfg.floor, inflate);
        let n = numeric_grad(&mut state, cfg.step, |s| s.0.conv_bias.view_mut().into_dyn(), f);
        compare_all(&mut spatial, grad.conv_bias.iter(), &n, cfg.floor, false);

        let n = numeric_grad(&mut state, cfg.step, |s| s.1.view_mut().into_dyn(), f);
        compare_all(&mut channel, dx.iter(), &n, cfg.floor, false);
        compare_all(&mut spatial, dx.iter(), &n, cfg.floor, false);
    }
    (
        channel.finish("cbam_channel", cfg.trials, LAYER_TOLERANCE),
        spatial.finish("cbam_spatial", cfg.trials, LAYER_TOLERANCE),
    )
}

type LossFn = fn(&Array3<f64>, &Array3<f64>, &Mask) -> Result<(f64, Array3<f64>)>;

fn check_loss(cfg: &GradcheckConfig, name: &str, role: u64, loss: LossFn) -> CheckResult {
    let mut tally = Tally::default();
    let (h, w) = (cfg.height, cfg.width);
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, role, t as u64));
        let e = rand3(&mut rng, (h, w, 3));
        let mut x = rand3(&mut rng, (h, w, 3));
        // every other trial uses a sparse mask
        let valid = if t % 2 == 0 {
            Mask::from_elem((h, w), true)
        } else {
            let mut m = Mask::from_shape_simple_fn((h, w), || rng.gen_bool(0.75));
            m[[0, 0]] = true;
            m[[h - 1, w - 1]] = true;
            m
        };
        let (_, analytic) = loss(&e, &x, &valid).expect("valid loss inputs");
        let n = numeric_grad(&mut x, cfg.step, |s| s.view_mut().into_dyn(), |s| loss(&e, s, &valid).unwrap().0);
        compare_all(&mut tally, analytic.iter(), &n, cfg.floor, false);
    }
    tally.finish(name, cfg.trials, LAYER_TOLERANCE)
}

/// Whole model under the composite loss, dropout masks replayed from the training forward.
fn check_end_to_end(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::default();
    let arch = Architecture::new(cfg.d_2d, cfg.d_3d, cfg.fused);
    let weights = LossWeights::default();
    let (h, w) = (cfg.height, cfg.width);
    for t in 0..cfg.trials {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, 0x20, t as u64));
        let mut params = ModelParams::<f64>::init(&arch, rng.gen())?;
        // non-zero biases so their gradients are exercised away from the init point
        for (name, mut tensor) in params.tensors_mut() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                tensor.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
            }
        }
        let e2d = rand3(&mut rng, (h, w, cfg.d_2d));
        let e3d = rand3(&mut rng, (h, w, cfg.d_3d));
        let mut valid = Mask::from_shape_simple_fn((h, w), || rng.gen_bool(0.8));
        valid[[0, 0]] = true;
        valid[[h - 1, w - 1]] = true;

        let mut drop_rng = seed::rng(rng.gen());
        let pass = network::forward(&params, e2d.view(), e3d.view(), Mode::Train(&mut drop_rng))?;
        let masks = pass.cache.dropout_masks();
        let (_, g2, g3) = losses::loss_and_gradients(
            e2d.view(),
            pass.recon_2d.view(),
            e3d.view(),
            pass.recon_3d.view(),
            &weights,
            &valid,
        )?;
        let grads = network::backward(&params, &pass.cache, g2.view(), g3.view())?;

        let objective = |p: &ModelParams<f64>| {
            let out = network::forward(p, e2d.view(), e3d.view(), Mode::Replay(&masks)).unwrap();
            losses::total_loss(e2d.view(), out.recon_2d.view(), e3d.view(), out.recon_3d.view(), &weights, &valid)
                .unwrap()
                .total
        };
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().copied().collect()))
            .collect();
        for (k, (name, a)) in analytic.iter().enumerate() {
            let numeric = numeric_grad(&mut params, cfg.step, |p| p.tensors_mut().swap_remove(k).1, objective);
            let inflate = cfg.perturb_weight_gradients && name.ends_with(".weight");
            compare_all(&mut tally, a.iter(), &numeric, cfg.floor, inflate);
        }
    }
    Ok(tally.finish("end_to_end", cfg.trials, END_TO_END_TOLERANCE))
}

fn sim_loss(e: &Array3<f64>, x: &Array3<f64>, m: &Mask) -> Result<(f64, Array3<f64>)> {
    losses::znssd_with_grad(e.view(), x.view(), 1e-8, m)
}

fn smooth_loss(e: &Array3<f64>, x: &Array3<f64>, m: &Mask) -> Result<(f64, Array3<f64>)> {
    losses::smoothness_with_grad(e.view(), x.view(), m)
}

fn census_loss(e: &Array3<f64>, x: &Array3<f64>, m: &Mask) -> Result<(f64, Array3<f64>)> {
    losses::census_with_grad(e.view(), x.view(), 3, m)
}

/// Runs every layer, loss and end-to-end check.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = vec![check_linear(cfg), check_gelu(cfg), check_layer_norm(cfg)];
    let (channel, spatial) = check_cbam(cfg);
    checks.push(channel);
    checks.push(spatial);
    checks.push(check_loss(cfg, "loss_sim", 0x15, sim_loss));
    checks.push(check_loss(cfg, "loss_smooth", 0x16, smooth_loss));
    checks.push(check_loss(cfg, "loss_census", 0x17, census_loss));
    checks.push(check_end_to_end(cfg)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { checks, passed })
}

