//! Optimization on normal-only samples: Adam, few-shot subsampling and the training loop.

use std::time::Instant;

use log::info;
use ndarray::ArrayD;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, MafrError, Result};
use crate::feature_store::{DatasetManifest, Label, Sample};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::network::{self, Architecture, GradientBundle, Mode, ModelParams, DEFAULT_D_2D, DEFAULT_D_3D, DEFAULT_FUSED};
use crate::scalar::Scalar;
use crate::seed;

/// Network hyperparameters that do not depend on the data; feature dims come from the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Fused embedding width. `None` keeps the reference ratio 968/1920 of the input width.
    pub fused: Option<usize>,
    pub dropout_p: f64,
    pub skip: bool,
    pub cbam: bool,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fused: None,
            dropout_p: 0.1,
            skip: true,
            cbam: true,
            cbam_reduction: 16,
            spatial_kernel: 7,
        }
    }
}

impl ModelConfig {
    pub fn fused_dim(&self, d_2d: usize, d_3d: usize) -> usize {
        self.fused.unwrap_or_else(|| {
            if (d_2d, d_3d) == (DEFAULT_D_2D, DEFAULT_D_3D) {
                DEFAULT_FUSED
            } else {
                let ratio = DEFAULT_FUSED as f64 / (DEFAULT_D_2D + DEFAULT_D_3D) as f64;
                (((d_2d + d_3d) as f64 * ratio).round() as usize).max(1)
            }
        })
    }

    pub fn architecture(&self, d_2d: usize, d_3d: usize) -> Result<Architecture> {
        let mut arch = Architecture::new(d_2d, d_3d, self.fused_dim(d_2d, d_3d));
        arch.dropout_p = self.dropout_p;
        arch.skip = self.skip;
        arch.cbam = self.cbam;
        arch.cbam_reduction = self.cbam_reduction;
        arch.spatial_kernel = self.spatial_kernel;
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub shot_count: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            weights: LossWeights::default(),
            seed: 0,
            shot_count: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(arg_err!("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(arg_err!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(arg_err!("adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(arg_err!("batch_size must be positive"));
        }
        if self.shot_count == Some(0) {
            return Err(arg_err!("shot_count must be positive"));
        }
        self.weights.validate()
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<ArrayD<T>>,
    pub second_moment: Vec<ArrayD<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<ArrayD<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// A tensor whose gradient is exactly zero everywhere is treated as having no gradient: its
/// moments and values are left untouched. The step counter always advances.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &GradientBundle<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let grad_views = grads.tensors();
    let mut param_views = params.tensors_mut();
    if grad_views.len() != param_views.len() || state.first_moment.len() != param_views.len() {
        return Err(shape_err!("optimizer state, gradients and parameters disagree in tensor count"));
    }
    for (name, g) in &grad_views {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(MafrError::Numerical(format!("non-finite gradient {bad:?} in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let lr_t = T::lit(cfg.learning_rate / (1.0 - b1.powi(t)));
    let v_corr = T::lit(1.0 / (1.0 - b2.powi(t)));
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_m_b1, one_m_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let eps = T::lit(cfg.adam_eps);

    for (k, ((name, p), (_, g))) in param_views.iter_mut().zip(&grad_views).enumerate() {
        if p.shape() != g.shape() || state.first_moment[k].shape() != p.shape() {
            return Err(shape_err!("shape mismatch for {name}"));
        }
        if g.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let m = state.first_moment[k].as_slice_mut().expect("contiguous moments");
        let v = state.second_moment[k].as_slice_mut().expect("contiguous moments");
        for (((pv, &gv), mv), vv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1t * *mv + one_m_b1 * gv;
            *vv = b2t * *vv + one_m_b2 * gv * gv;
            *pv -= lr_t * *mv / ((*vv * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// Uniform subset of `n` samples without replacement, kept in manifest order.
pub fn few_shot_subsample(manifest: &DatasetManifest, n: usize, seed_value: u64) -> Result<DatasetManifest> {
    let total = manifest.samples.len();
    if n == 0 || n > total {
        return Err(arg_err!("cannot draw {n} shots from {total} samples"));
    }
    let mut rng = seed::rng(seed::derive(seed_value, seed::ROLE_FEW_SHOT));
    let mut picked = index::sample(&mut rng, total, n).into_vec();
    picked.sort_unstable();
    Ok(DatasetManifest {
        samples: picked.into_iter().map(|i| manifest.samples[i].clone()).collect(),
        split: manifest.split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Wall-clock time; the only non-deterministic field in the log.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub sample_ids: Vec<String>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Per-epoch mean total loss.
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }

    /// The log with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        for e in &mut log.epochs {
            e.wall_ms = 0.0;
        }
        log
    }
}

/// Called after each epoch with the 1-based epoch number and current parameters.
pub type EpochHook<'a> = dyn FnMut(usize, &ModelParams<f32>) -> Result<()> + 'a;

/// Trains from freshly initialized parameters on in-memory samples.
pub fn fit_samples(samples: &[Sample], model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainLog)> {
    fit_samples_with(samples, model, cfg, &mut |_, _| Ok(()))
}

pub fn fit_samples_with(
    samples: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| arg_err!("training set is empty"))?;
    if let Some(bad) = samples.iter().find(|s| s.label != Label::Normal) {
        return Err(arg_err!("training sample {:?} is not labelled Normal", bad.id));
    }
    let arch = model.architecture(first.e2d.channels(), first.e3d.channels())?;
    let mut params = ModelParams::<f32>::init(&arch, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, seed::ROLE_SHUFFLE));
    let mut dropout_rng = seed::rng(seed::derive(cfg.seed, seed::ROLE_DROPOUT));
    let mut log = TrainLog {
        seed: cfg.seed,
        config: cfg.clone(),
        architecture: arch,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        epochs: Vec::with_capacity(cfg.epochs),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradientBundle::zeros_like(&params);
            for &i in batch {
                let s = &samples[i];
                let pass = network::forward(&params, s.e2d.data().view(), s.e3d.data().view(), Mode::Train(&mut dropout_rng))?;
                let (loss, g2, g3) = losses::loss_and_gradients(
                    s.e2d.data().view(),
                    pass.recon_2d.view(),
                    s.e3d.data().view(),
                    pass.recon_3d.view(),
                    &cfg.weights,
                    &s.source_validity,
                )?;
                if !loss.total.is_finite() {
                    return Err(MafrError::Numerical(format!(
                        "non-finite loss at epoch {epoch}, sample {:?}",
                        s.id
                    )));
                }
                sum.accumulate(&loss);
                acc.add_assign(&network::backward(&params, &pass.cache, g2.view(), g3.view())?)?;
            }
            if batch.len() > 1 {
                acc.scale(1.0 / batch.len() as f32);
            }
            adam_step(&mut params, &acc, &mut state, cfg).map_err(|e| match e {
                MafrError::Numerical(msg) => MafrError::Numerical(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
        }
        let mean = sum.scaled(1.0 / samples.len() as f64);
        info!("epoch {epoch}/{}: loss {:.6}", cfg.epochs, mean.total);
        log.epochs.push(EpochLog {
            epoch,
            loss: mean,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        on_epoch(epoch, &params)?;
    }
    Ok((params, log))
}
