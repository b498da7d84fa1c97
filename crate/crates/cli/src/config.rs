//! The JSON run description shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use mafr_core::anomaly::InferConfig;
use mafr_core::evaluation::DEFAULT_LIMITS;
use mafr_core::feature_store::SyntheticSpec;
use mafr_core::gradcheck::GradcheckConfig;
use mafr_core::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub spec: SyntheticSpec,
    pub train_count: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            train_count: 20,
            test_normal: 20,
            test_anomalous: 20,
        }
    }
}

/// Locations, relative to the working directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    /// Where `synth` writes samples and manifests.
    pub dataset: PathBuf,
    /// Defaults to `<dataset>/train.json`.
    pub train_manifest: Option<PathBuf>,
    /// Defaults to `<dataset>/test.json`.
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    /// Trained models reused by `ablate`.
    pub cache: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            train_manifest: None,
            test_manifest: None,
            checkpoint: "model".into(),
            output: "out".into(),
            cache: "cache".into(),
        }
    }
}

impl PathConfig {
    pub fn train_manifest(&self) -> PathBuf {
        self.train_manifest.clone().unwrap_or_else(|| self.dataset.join("train.json"))
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.test_manifest.clone().unwrap_or_else(|| self.dataset.join("test.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// False-positive-rate limits for AUPRO.
    pub limits: Vec<f64>,
    pub paths: PathConfig,
    pub gradcheck: GradcheckConfig,
    /// Save an extra checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Also write 8-bit PNG heatmaps next to exported maps.
    pub png: bool,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            limits: DEFAULT_LIMITS.to_vec(),
            paths: PathConfig::default(),
            gradcheck: GradcheckConfig::default(),
            checkpoint_every: None,
            png: false,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Sets the root seed of every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.spec.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
