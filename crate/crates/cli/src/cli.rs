//! Argument parsing. Flags override the JSON config, which overrides the defaults.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use mafr_core::anomaly::FusionStrategy;
use mafr_core::losses::LossWeights;

use crate::commands::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_infer, cmd_synth, cmd_train, Workdir};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mafr", version, about = "Fusion-restoration anomaly detection on 2D/3D feature maps")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// JSON run config, relative to the working directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, env = "MAFR_THREADS")]
    pub threads: Option<usize>,

    /// Root seed for synthesis, training and gradient checks.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with train and test manifests.
    Synth(SynthArgs),
    /// Fit a model on the normal training samples.
    Train(TrainArgs),
    /// Write anomaly maps and sample scores for a manifest.
    Infer(InferArgs),
    /// Compute I-AUROC, P-AUROC and AUPRO for a manifest.
    Eval(InferArgs),
    /// Loss and fusion ablation grids.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_normal: Option<usize>,
    #[arg(long)]
    pub test_anomalous: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Per-channel RMS shift inside anomalies.
    #[arg(long)]
    pub magnitude: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on a seeded subset of this many samples.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub lambda_sim: Option<f64>,
    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    #[arg(long)]
    pub lambda_census: Option<f64>,
    /// Fused embedding width.
    #[arg(long)]
    pub fused: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Test manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// add, max, multiply, 2d or 3d.
    #[arg(long)]
    pub strategy: Option<FusionStrategy>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Smooth before zeroing invalid pixels.
    #[arg(long)]
    pub smooth_first: bool,
    /// Also write PNG heatmaps.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of cached trained models.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negative control: inflate analytic weight gradients by 1%.
    #[arg(long)]
    pub perturb_weights: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_lambdas(w: &mut LossWeights, sim: Option<f64>, smooth: Option<f64>, census: Option<f64>) {
    set(&mut w.lambda_sim, sim);
    set(&mut w.lambda_smooth, smooth);
    set(&mut w.lambda_census, census);
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let wd = Workdir::new(&self.workdir);
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(&wd.resolve(p))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        match &self.command {
            Command::Synth(a) => {
                set(&mut cfg.paths.dataset, a.out.clone());
                set(&mut cfg.synth.train_count, a.train_count);
                set(&mut cfg.synth.test_normal, a.test_normal);
                set(&mut cfg.synth.test_anomalous, a.test_anomalous);
                set(&mut cfg.synth.spec.noise_sigma, a.noise_sigma);
                set(&mut cfg.synth.spec.anomaly.magnitude, a.magnitude);
            }
            Command::Train(a) => {
                if a.manifest.is_some() {
                    cfg.paths.train_manifest = a.manifest.clone();
                }
                set(&mut cfg.paths.checkpoint, a.checkpoint.clone());
                set(&mut cfg.train.epochs, a.epochs);
                set(&mut cfg.train.learning_rate, a.lr);
                set(&mut cfg.train.batch_size, a.batch_size);
                if a.shots.is_some() {
                    cfg.train.shot_count = a.shots;
                }
                set_lambdas(&mut cfg.train.weights, a.lambda_sim, a.lambda_smooth, a.lambda_census);
                if a.fused.is_some() {
                    cfg.model.fused = a.fused;
                }
                set(&mut cfg.model.dropout_p, a.dropout);
                if a.checkpoint_every.is_some() {
                    cfg.checkpoint_every = a.checkpoint_every;
                }
            }
            Command::Infer(a) | Command::Eval(a) => {
                if a.manifest.is_some() {
                    cfg.paths.test_manifest = a.manifest.clone();
                }
                set(&mut cfg.paths.checkpoint, a.checkpoint.clone());
                set(&mut cfg.paths.output, a.out.clone());
                set(&mut cfg.infer.strategy, a.strategy);
                set(&mut cfg.infer.sigma, a.sigma);
                if a.smooth_first {
                    cfg.infer.mask_before_smooth = false;
                }
                cfg.png |= a.png;
            }
            Command::Ablate(a) => {
                if a.train_manifest.is_some() {
                    cfg.paths.train_manifest = a.train_manifest.clone();
                }
                if a.test_manifest.is_some() {
                    cfg.paths.test_manifest = a.test_manifest.clone();
                }
                set(&mut cfg.paths.output, a.out.clone());
                set(&mut cfg.paths.cache, a.cache.clone());
                set(&mut cfg.train.epochs, a.epochs);
                if a.shots.is_some() {
                    cfg.train.shot_count = a.shots;
                }
                set(&mut cfg.infer.sigma, a.sigma);
            }
            Command::Gradcheck(a) => {
                set(&mut cfg.gradcheck.trials, a.trials);
                set(&mut cfg.paths.output, a.out.clone());
                cfg.gradcheck.perturb_weight_gradients |= a.perturb_weights;
            }
        }
        Ok(cfg)
    }
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let wd = Workdir::new(&cli.workdir);
    match &cli.command {
        Command::Synth(_) => {
            let o = cmd_synth(&wd, cfg)?;
            println!(
                "wrote {} samples; manifests {} and {}",
                o.samples,
                o.train_manifest.display(),
                o.test_manifest.display()
            );
        }
        Command::Train(_) => {
            let o = cmd_train(&wd, cfg)?;
            let last = o.log.epochs.last().map(|e| e.loss.total);
            println!(
                "trained on {} samples for {} epochs (final loss {}); checkpoint {}",
                o.log.sample_ids.len(),
                o.log.epochs.len(),
                last.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}")),
                o.checkpoint.display()
            );
        }
        Command::Infer(_) => {
            let o = cmd_infer(&wd, cfg)?;
            println!("wrote {} maps to {}; scores {}", o.count, o.maps_dir.display(), o.scores.display());
        }
        Command::Eval(_) => print!("{}", cmd_eval(&wd, cfg)?.to_text()),
        Command::Ablate(_) => print!("{}", cmd_ablate(&wd, cfg)?.to_text()),
        Command::Gradcheck(_) => {
            let report = cmd_gradcheck(&wd, cfg)?;
            print!("{}", report.to_text());
            if !report.passed {
                return Err(CliError::Numerical("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();

    let outcome = cli.run_config().and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_json());
            return Ok(());
        }
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.threads {
            if n == 0 {
                return Err(CliError::Usage("threads must be positive".into()));
            }
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
        pool.install(|| execute(&cli, &cfg))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
