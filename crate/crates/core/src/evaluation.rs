//! Detection and localization metrics, run evaluation and the ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{infer_sample, FusionStrategy, InferConfig};
use crate::error::{arg_err, shape_err, MafrError, Result};
use crate::feature_store::{Label, Mask, Sample};
use crate::losses::LossWeights;
use crate::network::{load_checkpoint, save_checkpoint, ModelParams};
use crate::training::{fit_samples, ModelConfig, TrainConfig, TrainLog};

pub const DEFAULT_LIMITS: [f64; 2] = [0.30, 0.01];

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(arg_err!("scores contain NaN"));
    }
    let positives = labels.iter().filter(|l| **l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(arg_err!("AUROC needs both labels ({positives} positive, {negatives} negative)"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, kept integral so the ratio is exact
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    for group in order.chunk_by(|&a, &b| scores[a] == scores[b]) {
        let pos = group.iter().filter(|&&i| labels[i]).count() as u128;
        let neg = group.len() as u128 - pos;
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
    }
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// 4-connected components of a mask as region ids (`None` for background) and region sizes.
pub fn label_regions(mask: &Mask) -> (Array2<Option<usize>>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut ids = Array2::from_elem((h, w), None);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (i0, j0) = (start / w, start % w);
        if !mask[[i0, j0]] || ids[[i0, j0]].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        ids[[i0, j0]] = Some(id);
        stack.push((i0, j0));
        while let Some((i, j)) = stack.pop() {
            size += 1;
            let neighbours = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (a, b) in neighbours {
                if a < h && b < w && mask[[a, b]] && ids[[a, b]].is_none() {
                    ids[[a, b]] = Some(id);
                    stack.push((a, b));
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Points `(fpr, pro)` of the per-region-overlap curve, one per distinct score, highest first.
pub fn pro_curve(score_maps: &[Array2<f64>], gt_masks: &[Mask]) -> Result<Vec<(f64, f64)>> {
    if score_maps.len() != gt_masks.len() {
        return Err(shape_err!("{} maps vs {} masks", score_maps.len(), gt_masks.len()));
    }
    // per pixel: Some(weight) = 1/|region| for anomalous pixels, None for background
    let mut pixels: Vec<(f64, Option<f64>)> = Vec::new();
    let mut regions = 0usize;
    for (scores, mask) in score_maps.iter().zip(gt_masks) {
        if scores.dim() != mask.dim() {
            return Err(shape_err!("map {:?} vs mask {:?}", scores.dim(), mask.dim()));
        }
        let (ids, sizes) = label_regions(mask);
        regions += sizes.len();
        for (s, id) in scores.iter().zip(ids.iter()) {
            if s.is_nan() {
                return Err(arg_err!("score maps contain NaN"));
            }
            pixels.push((*s, id.map(|r| 1.0 / sizes[r] as f64)));
        }
    }
    if regions == 0 {
        return Err(arg_err!("ground truth contains no anomalous region"));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(arg_err!("ground truth contains no anomaly-free pixel"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut false_pos, mut overlap) = (0usize, 0.0f64);
    for group in pixels.chunk_by(|a, b| a.0 == b.0) {
        for (_, weight) in group {
            match weight {
                Some(w) => overlap += w,
                None => false_pos += 1,
            }
        }
        curve.push((
            false_pos as f64 / negatives as f64,
            (overlap / regions as f64).min(1.0),
        ));
    }
    Ok(curve)
}

/// Trapezoid area under `(x, y)` points sorted by `x`, from 0 up to `limit`, divided by `limit`.
///
/// Before the first point the curve is held at its first value; at `limit` it is
/// linearly interpolated.
pub fn normalized_area(curve: &[(f64, f64)], limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(arg_err!("FPR limit must lie in (0, 1], got {limit}"));
    }
    let &(_, first_y) = curve.first().ok_or_else(|| arg_err!("empty curve"))?;
    let (mut px, mut py) = (0.0, first_y);
    let mut area = 0.0;
    for &(x, y) in curve {
        if x >= limit {
            let y_at = if x > px { py + (y - py) * (limit - px) / (x - px) } else { y };
            area += (limit - px) * (py + y_at) / 2.0;
            return Ok(area / limit);
        }
        area += (x - px) * (py + y) / 2.0;
        (px, py) = (x, y);
    }
    // curve ended before the limit: hold the last value
    area += (limit - px) * py;
    Ok(area / limit)
}

pub fn aupro(score_maps: &[Array2<f64>], gt_masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(arg_err!("FPR limit must lie in (0, 1], got {fpr_limit}"));
    }
    normalized_area(&pro_curve(score_maps, gt_masks)?, fpr_limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub infer: InferConfig,
    pub limits: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            infer: InferConfig::default(),
            limits: DEFAULT_LIMITS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuproValue {
    pub limit: f64,
    pub value: Option<f64>,
}

/// Metrics for one model and one fusion strategy. Pixel metrics are `None` when skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: FusionStrategy,
    pub sigma: f64,
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub aupro: Vec<AuproValue>,
    pub pixel_metrics_skipped: Option<String>,
    pub samples: Vec<SampleScore>,
}

pub fn aupro_column(limit: f64) -> String {
    format!("AUPRO@{}%", (limit * 1000.0).round() / 10.0)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["I-AUROC".to_string(), "P-AUROC".to_string()];
        names.extend(self.aupro.iter().map(|a| aupro_column(a.limit)));
        names
    }

    pub fn metric_cells(&self) -> Vec<String> {
        let mut cells = vec![self.i_auroc.to_string(), cell(self.p_auroc)];
        cells.extend(self.aupro.iter().map(|a| cell(a.value)));
        cells
    }

    /// Metric table; values are printed at full precision so they match the JSON exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("strategy: {}\nsigma: {}\n", self.strategy, self.sigma);
        for (name, value) in self.column_names().iter().zip(self.metric_cells()) {
            let _ = writeln!(out, "{name}: {value}");
        }
        if let Some(reason) = &self.pixel_metrics_skipped {
            let _ = writeln!(out, "pixel metrics skipped: {reason}");
        }
        out
    }

    pub fn scores_csv(&self) -> String {
        let mut out = String::from("id,label,score\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{}", s.id, s.label.as_int(), s.score);
        }
        out
    }
}

/// Scores every sample and computes image and pixel metrics.
///
/// Normal samples without a mask count as entirely anomaly-free. If any anomalous sample
/// lacks a mask, pixel metrics are skipped.
pub fn evaluate_run(params: &ModelParams<f32>, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    for &limit in &cfg.limits {
        if !(limit > 0.0 && limit <= 1.0) {
            return Err(arg_err!("FPR limit must lie in (0, 1], got {limit}"));
        }
    }
    let results = samples
        .par_iter()
        .map(|s| infer_sample(params, s, &cfg.infer))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Anomalous).collect();
    let i_auroc = auroc(&scores, &labels)?;

    let missing = samples.iter().find(|s| s.label == Label::Anomalous && s.gt_mask.is_none());
    let (p_auroc, aupro_values, skipped) = if let Some(s) = missing {
        let reason = format!("anomalous sample {:?} has no ground-truth mask", s.id);
        (None, cfg.limits.iter().map(|_| None).collect(), Some(reason))
    } else {
        let maps: Vec<Array2<f64>> = results.iter().map(|r| r.smoothed.values().clone()).collect();
        let masks: Vec<Mask> = samples
            .iter()
            .zip(&maps)
            .map(|(s, m)| s.gt_mask.clone().unwrap_or_else(|| Array2::from_elem(m.dim(), false)))
            .collect();
        let pixel_scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        let pixel_labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
        let curve = pro_curve(&maps, &masks)?;
        let values = cfg
            .limits
            .iter()
            .map(|&l| normalized_area(&curve, l).map(Some))
            .collect::<Result<Vec<_>>>()?;
        (Some(auroc(&pixel_scores, &pixel_labels)?), values, None)
    };

    Ok(EvalReport {
        strategy: cfg.infer.strategy,
        sigma: cfg.infer.sigma,
        i_auroc,
        p_auroc,
        aupro: cfg
            .limits
            .iter()
            .zip(aupro_values)
            .map(|(&limit, value)| AuproValue { limit, value })
            .collect(),
        pixel_metrics_skipped: skipped,
        samples: samples
            .iter()
            .zip(scores)
            .map(|(s, score)| SampleScore { id: s.id.clone(), label: s.label, score })
            .collect(),
    })
}

/// The loss configurations compared by the ablation grid, three-term last.
pub fn loss_ablation_rows() -> [(&'static str, LossWeights); 4] {
    [
        ("sim-only", LossWeights::with_lambdas(1.0, 0.0, 0.0)),
        ("census-only", LossWeights::with_lambdas(0.0, 0.0, 1.0)),
        ("smooth-only", LossWeights::with_lambdas(0.0, 1.0, 0.0)),
        ("all-three", LossWeights::with_lambdas(1.0, 1.0, 1.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub training_hash: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub loss_rows: Vec<AblationRow>,
    pub fusion_rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.loss_rows.iter().chain(&self.fusion_rows).find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("losses", &self.loss_rows), ("fusion", &self.fusion_rows)] {
            let Some(first) = rows.first() else { continue };
            let _ = writeln!(out, "[{title}]");
            let _ = writeln!(out, "{:<12} {}", "row", first.report.column_names().join(" "));
            for r in rows {
                let _ = writeln!(out, "{:<12} {}", r.name, r.report.metric_cells().join(" "));
            }
        }
        out
    }
}

/// Content hash of everything that determines a trained model.
pub fn training_hash(train: &[Sample], model: &ModelConfig, cfg: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model)?);
    h.update(serde_json::to_vec(cfg)?);
    for s in train {
        h.update(s.id.as_bytes());
        for map in [&s.e2d, &s.e3d] {
            h.update((map.data().len() as u64).to_le_bytes());
            for v in map.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(s.source_validity.iter().map(|&b| b as u8).collect::<Vec<u8>>());
    }
    Ok(hex::encode(h.finalize()))
}

/// Trains, or loads from `cache_dir` when a model with the same training hash exists.
pub fn train_cached(
    train: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    cache_dir: Option<&Path>,
) -> Result<(ModelParams<f32>, String)> {
    let hash = training_hash(train, model, cfg)?;
    let Some(cache) = cache_dir else {
        return Ok((fit_samples(train, model, cfg)?.0, hash));
    };
    let dir = cache.join(&hash);
    if dir.join("done").exists() {
        info!("reusing cached model {hash}");
        return Ok((load_checkpoint(&dir)?, hash));
    }
    let (params, log): (ModelParams<f32>, TrainLog) = fit_samples(train, model, cfg)?;
    save_checkpoint(&params, &dir)?;
    let log_path = dir.join("train_log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&log)?).map_err(|e| MafrError::io(&log_path, e))?;
    let done = dir.join("done");
    fs::write(&done, b"").map_err(|e| MafrError::io(&done, e))?;
    Ok((params, hash))
}

/// One model per loss configuration, then every fusion strategy on the three-term model.
pub fn ablation_grid(
    train: &[Sample],
    test: &[Sample],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    cache_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut loss_rows = Vec::new();
    let mut full_model = None;
    for (name, lambdas) in loss_ablation_rows() {
        let weights = LossWeights { epsilon: train_cfg.weights.epsilon, census_kernel: train_cfg.weights.census_kernel, ..lambdas };
        let cfg = TrainConfig { weights, ..train_cfg.clone() };
        let (params, hash) = train_cached(train, model, &cfg, cache_dir)?;
        let report = evaluate_run(&params, test, eval_cfg)?;
        info!("ablation {name}: I-AUROC {}", report.i_auroc);
        loss_rows.push(AblationRow { name: name.to_string(), training_hash: hash.clone(), report });
        if name == "all-three" {
            full_model = Some((params, hash));
        }
    }
    let (params, hash) = full_model.expect("three-term row is always trained");
    let fusion_rows = FusionStrategy::ALL
        .iter()
        .map(|&strategy| {
            let cfg = EvalConfig { infer: InferConfig { strategy, ..eval_cfg.infer }, ..eval_cfg.clone() };
            Ok(AblationRow {
                name: strategy.name().to_string(),
                training_hash: hash.clone(),
                report: evaluate_run(&params, test, &cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { seed: train_cfg.seed, loss_rows, fusion_rows })
}

/// I-AUROC keyed by row name, for quick comparisons.
pub fn i_auroc_by_row(report: &AblationReport) -> BTreeMap<String, f64> {
    report
        .loss_rows
        .iter()
        .map(|r| (format!("loss:{}", r.name), r.report.i_auroc))
        .chain(report.fusion_rows.iter().map(|r| (format!("fusion:{}", r.name), r.report.i_auroc)))
        .collect()
}
