//! One function per subcommand. Each reads its inputs from the run config and writes
//! artifacts under the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mafr_core::anomaly::{infer_sample, AnomalyMap, Inference};
use mafr_core::evaluation::{ablation_grid, evaluate_run, AblationReport, EvalConfig, EvalReport};
use mafr_core::feature_store::{
    load_samples, save_feature_map, save_mask, FeatureMap, synth_anomalous_sample, synth_normal_sample, DatasetManifest, Label,
    Mask, Sample, SampleEntry, Split,
};
use mafr_core::gradcheck::{run_gradcheck, GradcheckReport};
use mafr_core::network::{load_checkpoint, save_checkpoint, ModelParams};
use mafr_core::training::{few_shot_subsample, fit_samples_with, TrainLog};
use mafr_core::MafrError;
use ndarray::Array2;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;

/// Sample seeds of test items are offset so they never coincide with training seeds.
const TEST_NORMAL_OFFSET: u64 = 1 << 32;
const TEST_ANOMALOUS_OFFSET: u64 = 2 << 32;

pub struct Workdir(PathBuf);

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir(root.into())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }
}

fn data<T>(r: mafr_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        MafrError::Numerical(m) => CliError::Numerical(m),
        other => CliError::Data(other.to_string()),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    data(DatasetManifest::load(path))
}

fn load_model(wd: &Workdir, cfg: &RunConfig) -> Result<ModelParams<f32>, CliError> {
    let dir = existing(wd.resolve(&cfg.paths.checkpoint), "checkpoint")?;
    data(load_checkpoint(dir))
}

fn load_test_samples(wd: &Workdir, cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let path = existing(wd.resolve(&cfg.paths.test_manifest()), "test manifest")?;
    data(load_samples(&load_manifest(&path)?, &path))
}

/// Training samples after optional few-shot subsampling.
fn load_train_samples(wd: &Workdir, cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let path = existing(wd.resolve(&cfg.paths.train_manifest()), "train manifest")?;
    let mut manifest = load_manifest(&path)?;
    if let Some(n) = cfg.train.shot_count {
        manifest = few_shot_subsample(&manifest, n, cfg.train.seed)?;
    }
    data(load_samples(&manifest, &path))
}

pub struct SynthOutcome {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub samples: usize,
}

pub fn cmd_synth(wd: &Workdir, cfg: &RunConfig) -> Result<SynthOutcome, CliError> {
    let s = &cfg.synth;
    if s.train_count == 0 || s.test_normal + s.test_anomalous == 0 {
        return Err(CliError::Usage("empty dataset: train and test counts must be positive".into()));
    }
    s.spec.validate()?;
    let root = wd.resolve(&cfg.paths.dataset);
    for sub in ["train", "test"] {
        create_dir(&root.join(sub))?;
    }

    let save_pair = |rel: &str, e2d: &FeatureMap, e3d: &FeatureMap| -> Result<(PathBuf, PathBuf), CliError> {
        let p2 = PathBuf::from(format!("{rel}_2d.mafr"));
        let p3 = PathBuf::from(format!("{rel}_3d.mafr"));
        data(save_feature_map(e2d, root.join(&p2)))?;
        data(save_feature_map(e3d, root.join(&p3)))?;
        Ok((p2, p3))
    };

    let mut train = Vec::with_capacity(s.train_count);
    for i in 0..s.train_count {
        let (e2d, e3d) = synth_normal_sample(&s.spec, i as u64)?;
        let id = format!("train_{i:04}");
        let (path_2d, path_3d) = save_pair(&format!("train/{id}"), &e2d, &e3d)?;
        train.push(SampleEntry { id, path_2d, path_3d, label: Label::Normal, mask_path: None });
    }

    let mut test = Vec::with_capacity(s.test_normal + s.test_anomalous);
    let mut push_test = |id: String, e2d: FeatureMap, e3d: FeatureMap, mask: &Mask, label| -> Result<(), CliError> {
        let (path_2d, path_3d) = save_pair(&format!("test/{id}"), &e2d, &e3d)?;
        let mask_path = PathBuf::from(format!("test/{id}_mask.mafr"));
        data(save_mask(mask, root.join(&mask_path)))?;
        test.push(SampleEntry { id, path_2d, path_3d, label, mask_path: Some(mask_path) });
        Ok(())
    };
    let empty = Array2::from_elem((s.spec.height, s.spec.width), false);
    for i in 0..s.test_normal {
        let (e2d, e3d) = synth_normal_sample(&s.spec, TEST_NORMAL_OFFSET + i as u64)?;
        push_test(format!("test_normal_{i:04}"), e2d, e3d, &empty, Label::Normal)?;
    }
    for i in 0..s.test_anomalous {
        let (e2d, e3d, mask) = synth_anomalous_sample(&s.spec, TEST_ANOMALOUS_OFFSET + i as u64)?;
        push_test(format!("test_anomalous_{i:04}"), e2d, e3d, &mask, Label::Anomalous)?;
    }

    let train_manifest = root.join("train.json");
    let test_manifest = root.join("test.json");
    let samples = train.len() + test.len();
    data(DatasetManifest { samples: train, split: Split::Train }.save(&train_manifest))?;
    data(DatasetManifest { samples: test, split: Split::Test }.save(&test_manifest))?;
    Ok(SynthOutcome { train_manifest, test_manifest, samples })
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
}

pub fn cmd_train(wd: &Workdir, cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let samples = load_train_samples(wd, cfg)?;
    let dir = wd.resolve(&cfg.paths.checkpoint);
    create_dir(&dir)?;
    if cfg.checkpoint_every == Some(0) {
        return Err(CliError::Usage("checkpoint_every must be positive".into()));
    }
    info!("training on {} samples", samples.len());
    let every = cfg.checkpoint_every;
    let mut hook = |epoch: usize, params: &ModelParams<f32>| -> mafr_core::Result<()> {
        match every {
            Some(k) if epoch.is_multiple_of(k) => save_checkpoint(params, dir.join(format!("epoch_{epoch:04}"))),
            _ => Ok(()),
        }
    };
    let (params, log) = fit_samples_with(&samples, &cfg.model, &cfg.train, &mut hook).map_err(|e| match e {
        MafrError::Io { .. } => CliError::Data(e.to_string()),
        other => CliError::from(other),
    })?;
    data(save_checkpoint(&params, &dir))?;
    write_json(&dir.join("train_log.json"), &log)?;
    Ok(TrainOutcome { checkpoint: dir, log })
}

/// Heatmap scaled so the map maximum is white.
pub fn heatmap_png(map: &AnomalyMap, path: &Path) -> Result<(), CliError> {
    let (h, w) = map.dim();
    let max = map.values().iter().copied().fold(0.0, f64::max);
    let pixels: Vec<u8> = map
        .values()
        .iter()
        .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dims");
    img.save(path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn scores_csv(samples: &[Sample], results: &[Inference]) -> String {
    let mut out = String::from("id,label,score\n");
    for (s, r) in samples.iter().zip(results) {
        out.push_str(&format!("{},{},{}\n", s.id, s.label.as_int(), r.score));
    }
    out
}

pub struct InferOutcome {
    pub maps_dir: PathBuf,
    pub scores: PathBuf,
    pub count: usize,
}

pub fn cmd_infer(wd: &Workdir, cfg: &RunConfig) -> Result<InferOutcome, CliError> {
    let params = load_model(wd, cfg)?;
    let samples = load_test_samples(wd, cfg)?;
    let results = samples
        .par_iter()
        .map(|s| infer_sample(&params, s, &cfg.infer))
        .collect::<mafr_core::Result<Vec<_>>>()?;
    let out = wd.resolve(&cfg.paths.output);
    let maps_dir = out.join("maps");
    create_dir(&maps_dir)?;
    for (s, r) in samples.iter().zip(&results) {
        data(save_feature_map(&r.smoothed.to_feature_map()?, maps_dir.join(format!("{}.mafr", s.id))))?;
        if cfg.png {
            heatmap_png(&r.smoothed, &maps_dir.join(format!("{}.png", s.id)))?;
        }
    }
    let scores = out.join("scores.csv");
    write(&scores, scores_csv(&samples, &results))?;
    Ok(InferOutcome { maps_dir, scores, count: samples.len() })
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig { infer: cfg.infer, limits: cfg.limits.clone() }
}

pub fn cmd_eval(wd: &Workdir, cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let params = load_model(wd, cfg)?;
    let samples = load_test_samples(wd, cfg)?;
    let report = evaluate_run(&params, &samples, &eval_config(cfg))?;
    let out = wd.resolve(&cfg.paths.output);
    create_dir(&out)?;
    write_json(&out.join("report.json"), &report)?;
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("scores.csv"), report.scores_csv())?;
    write(&out.join("run_config.json"), cfg.to_json())?;
    Ok(report)
}

pub fn cmd_ablate(wd: &Workdir, cfg: &RunConfig) -> Result<AblationReport, CliError> {
    let train = load_train_samples(wd, cfg)?;
    let test = load_test_samples(wd, cfg)?;
    let cache = wd.resolve(&cfg.paths.cache);
    create_dir(&cache)?;
    let report = ablation_grid(&train, &test, &cfg.model, &cfg.train, &eval_config(cfg), Some(&cache))
        .map_err(|e| match e {
            MafrError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::from(other),
        })?;
    let out = wd.resolve(&cfg.paths.output);
    create_dir(&out)?;
    write_json(&out.join("ablation.json"), &report)?;
    write(&out.join("ablation.txt"), report.to_text())?;
    write(&out.join("run_config.json"), cfg.to_json())?;
    Ok(report)
}

/// Runs the checks; a failing check is a numerical failure reported after the table.
pub fn cmd_gradcheck(wd: &Workdir, cfg: &RunConfig) -> Result<GradcheckReport, CliError> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    let out = wd.resolve(&cfg.paths.output);
    create_dir(&out)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    write(&out.join("gradcheck.txt"), report.to_text())?;
    Ok(report)
}
