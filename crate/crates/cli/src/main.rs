//! `larnet`: pretrain, initialize, train, evaluate, export, benchmark and
//! inspect discrete networks.
//!
//! Exit status: 0 on success, 1 when the command line, config or an input
//! file is invalid, 2 when a run fails.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use larnet::data::{AugmentationPolicy, NormMode};
use larnet::inference::EvalMode;
use larnet::model::{ArchName, ContinuousActivation, Stage};
use larnet::trainer::TrainConfig;

use crate::config::{DataConfig, DataFormat, Outputs, RunConfig, SyntheticConfig};

#[derive(Parser, Debug)]
#[command(name = "larnet", version, about = "Ternary-weight, binary-activation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a continuous tanh network to initialize from.
    Pretrain {
        #[arg(long, default_value = "cnn-small", value_parser = parse_arch)]
        arch: ArchName,
        /// Drop batch norm everywhere (real layers get a bias instead).
        #[arg(long)]
        no_bn: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Turn a pretrained model into weight distributions.
    Init {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_zero_lo: f64,
        #[arg(long, default_value_t = 0.95)]
        p_zero_hi: f64,
        /// Binary instead of ternary discrete layers.
        #[arg(long)]
        binary: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Optimize weight distributions (LR or LAR stage).
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Lar)]
        mode: StageArg,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Test accuracy of a model file (LARN or LARP).
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Evaluation path for LARN files; LARP files always run packed.
        #[arg(long, value_enum, default_value_t = ModeArg::Reference)]
        mode: ModeArg,
        /// Seed of the weight sample drawn from a LARN file.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Sample k networks, keep the best on the test split, write a packed model.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip writing the point-mass LARN copy of the chosen sample.
        #[arg(long)]
        no_reference: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Time ternary_dot against a float dot product.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 1024, 4096])]
        length: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        budget_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-layer weight and activation entropy histograms as CSV.
    Diag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rerun a resolved-config snapshot.
    Replay {
        config: PathBuf,
        /// Output directory of the rerun (defaults to the snapshot's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_enum, default_value_t = FormatArg::Mnist)]
    format: FormatArg,
    /// Dataset directory (IDX or CIFAR-10 binary files).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = NormArg::PerChannel)]
    norm: NormArg,
    #[arg(long)]
    limit_train: Option<usize>,
    #[arg(long)]
    limit_test: Option<usize>,
    #[arg(long, default_value_t = 4)]
    synthetic_classes: usize,
    #[arg(long, default_value_t = 200)]
    synthetic_per_class: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 8, 8])]
    synthetic_shape: Vec<usize>,
    #[arg(long, default_value_t = 0.6)]
    synthetic_spread: f32,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Learning-rate factor of the last linear layer.
    #[arg(long, default_value_t = 0.1)]
    head_lr_mult: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    mc_samples: usize,
    #[arg(long, default_value_t = 1.2)]
    tau: f64,
    /// Train on the soft relaxed activations instead of hard samples.
    #[arg(long)]
    soft: bool,
    #[arg(long, default_value_t = 1e-12)]
    prob_decay: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continuous activation of sign slots during the LR stage.
    #[arg(long, value_enum, default_value_t = ActArg::Relu)]
    lr_activation: ActArg,
    /// Pad, random-crop and flip training images.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 4)]
    pad: usize,
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
}

#[derive(Args, Debug)]
struct OutArgs {
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Metrics JSONL path (defaults to `<out>/<command>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Model file written by the command (defaults to `<out>/<command>.<ext>`).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Mnist,
    Cifar,
    Synthetic,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum NormArg {
    PerChannel,
    PerImage,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StageArg {
    Lr,
    Lar,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Reference,
    Packed,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ActArg {
    Relu,
    Tanh,
}

fn parse_arch(s: &str) -> Result<ArchName, String> {
    s.parse().map_err(|e: larnet::Error| e.to_string())
}

/// A failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<larnet::Error> for Failure {
    fn from(e: larnet::Error) -> Self {
        use larnet::Error::*;
        match e {
            ShapeMismatch { .. } | InvalidArgument { .. } | Format { .. } | UnsupportedVersion { .. } => {
                Failure::Invalid(e.to_string())
            }
            Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

fn data_config(a: DataArgs) -> Result<DataConfig, Failure> {
    let shape: [usize; 3] = a
        .synthetic_shape
        .as_slice()
        .try_into()
        .map_err(|_| Failure::Invalid("--synthetic-shape takes three values C,H,W".into()))?;
    Ok(DataConfig {
        format: match a.format {
            FormatArg::Mnist => DataFormat::Mnist,
            FormatArg::Cifar => DataFormat::Cifar,
            FormatArg::Synthetic => DataFormat::Synthetic,
        },
        path: a.data,
        normalization: match a.norm {
            NormArg::PerChannel => NormMode::PerChannel,
            NormArg::PerImage => NormMode::PerImage,
        },
        limit_train: a.limit_train,
        limit_test: a.limit_test,
        synthetic: SyntheticConfig {
            classes: a.synthetic_classes,
            per_class: a.synthetic_per_class,
            shape,
            spread: a.synthetic_spread,
            seed: a.synthetic_seed,
        },
    })
}

fn train_config(a: TrainArgs, mode: Stage) -> TrainConfig {
    TrainConfig {
        lr: a.lr,
        head_lr_multiplier: a.head_lr_mult,
        epochs: a.epochs,
        batch_size: a.batch,
        mc_samples: a.mc_samples,
        tau: a.tau,
        hard: !a.soft,
        prob_decay: a.prob_decay,
        weight_decay: a.weight_decay,
        mode,
        seed: a.seed,
        lr_activation: match a.lr_activation {
            ActArg::Relu => ContinuousActivation::Relu,
            ActArg::Tanh => ContinuousActivation::Tanh,
        },
        augmentation: AugmentationPolicy { enabled: a.augment, pad: a.pad, crop: 0, flip_prob: a.flip_prob },
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// `(outputs, model output path)` for a command writing `<name>.<ext>`.
fn outputs(a: OutArgs, name: &str, ext: &str) -> (Outputs, PathBuf) {
    let dir = absolute(&a.out);
    let output = a.output.map(|p| absolute(&p)).unwrap_or_else(|| dir.join(format!("{name}.{ext}")));
    let metrics = a.metrics.map(|p| absolute(&p)).unwrap_or_else(|| dir.join(format!("{name}.metrics.jsonl")));
    (Outputs { dir, metrics }, output)
}

fn resolve(cmd: Command) -> Result<RunConfig, Failure> {
    Ok(match cmd {
        Command::Pretrain { arch, no_bn, data, train, out } => {
            let (outputs, output) = outputs(out, "pretrain", "larn");
            RunConfig::Pretrain {
                arch,
                batch_norm: !no_bn,
                data: data_config(data)?,
                train: train_config(train, Stage::Pretrained),
                output,
                outputs,
            }
        }
        Command::Init { model, p_zero_lo, p_zero_hi, binary, out } => {
            let (outputs, output) = outputs(out, "init", "larn");
            RunConfig::Init { model: absolute(&model), p_zero_lo, p_zero_hi, binary, output, outputs }
        }
        Command::Train { model, mode, data, train, out } => {
            let (stage, name) = match mode {
                StageArg::Lr => (Stage::Lr, "train-lr"),
                StageArg::Lar => (Stage::Lar, "train-lar"),
            };
            let (outputs, output) = outputs(out, name, "larn");
            RunConfig::Train {
                model: absolute(&model),
                data: data_config(data)?,
                train: train_config(train, stage),
                output,
                outputs,
            }
        }
        Command::Eval { model, mode, seed, data, out } => RunConfig::Eval {
            model: absolute(&model),
            data: data_config(data)?,
            mode: match mode {
                ModeArg::Reference => EvalMode::Reference,
                ModeArg::Packed => EvalMode::Packed,
            },
            seed,
            outputs: outputs(out, "eval", "json").0,
        },
        Command::Export { model, k, seed, no_reference, data, out } => {
            let (outputs, output) = outputs(out, "export", "larp");
            let reference = (!no_reference).then(|| output.with_extension("ref.larn"));
            RunConfig::Export { model: absolute(&model), data: data_config(data)?, k, seed, output, reference, outputs }
        }
        Command::Bench { length, budget_ms, seed, out } => {
            RunConfig::Bench { lengths: length, budget_ms, seed, outputs: outputs(out, "bench", "jsonl").0 }
        }
        Command::Diag { model, bins, seed, data, out } => RunConfig::Diag {
            model: absolute(&model),
            data: data_config(data)?,
            bins,
            seed,
            outputs: outputs(out, "diag", "csv").0,
        },
        Command::Replay { config, out } => {
            let text =
                std::fs::read_to_string(&config).map_err(|e| Failure::Invalid(format!("{}: {e}", config.display())))?;
            let mut cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", config.display())))?;
            if let Some(dir) = out {
                cfg.redirect(absolute(&dir));
            }
            cfg
        }
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(cli.command)?;
    commands::validate(&cfg)?;
    commands::write_snapshot(&cfg)?;
    commands::execute(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("larnet: {f}");
            ExitCode::from(f.code())
        }
    }
}
