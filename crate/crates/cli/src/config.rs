//! Resolved run configuration: every default expanded, serializable, and
//! sufficient on its own to replay a run.

use std::path::PathBuf;

use larnet::data::NormMode;
use larnet::inference::EvalMode;
use larnet::model::ArchName;
use larnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Mnist,
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub spread: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Directory of the dataset files; unused for synthetic data.
    pub path: Option<PathBuf>,
    pub normalization: NormMode,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunConfig {
    Pretrain {
        arch: ArchName,
        batch_norm: bool,
        data: DataConfig,
        train: TrainConfig,
        output: PathBuf,
        outputs: Outputs,
    },
    Init {
        model: PathBuf,
        p_zero_lo: f64,
        p_zero_hi: f64,
        binary: bool,
        output: PathBuf,
        outputs: Outputs,
    },
    Train {
        model: PathBuf,
        data: DataConfig,
        train: TrainConfig,
        output: PathBuf,
        outputs: Outputs,
    },
    Eval {
        model: PathBuf,
        data: DataConfig,
        mode: EvalMode,
        seed: u64,
        outputs: Outputs,
    },
    Export {
        model: PathBuf,
        data: DataConfig,
        k: usize,
        seed: u64,
        output: PathBuf,
        reference: Option<PathBuf>,
        outputs: Outputs,
    },
    Bench {
        lengths: Vec<usize>,
        budget_ms: u64,
        seed: u64,
        outputs: Outputs,
    },
    Diag {
        model: PathBuf,
        data: DataConfig,
        bins: usize,
        seed: u64,
        outputs: Outputs,
    },
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Pretrain { .. } => "pretrain",
            RunConfig::Init { .. } => "init",
            RunConfig::Train { .. } => "train",
            RunConfig::Eval { .. } => "eval",
            RunConfig::Export { .. } => "export",
            RunConfig::Bench { .. } => "bench",
            RunConfig::Diag { .. } => "diag",
        }
    }

    pub fn outputs(&self) -> &Outputs {
        match self {
            RunConfig::Pretrain { outputs, .. }
            | RunConfig::Init { outputs, .. }
            | RunConfig::Train { outputs, .. }
            | RunConfig::Eval { outputs, .. }
            | RunConfig::Export { outputs, .. }
            | RunConfig::Bench { outputs, .. }
            | RunConfig::Diag { outputs, .. } => outputs,
        }
    }

    fn outputs_mut(&mut self) -> &mut Outputs {
        match self {
            RunConfig::Pretrain { outputs, .. }
            | RunConfig::Init { outputs, .. }
            | RunConfig::Train { outputs, .. }
            | RunConfig::Eval { outputs, .. }
            | RunConfig::Export { outputs, .. }
            | RunConfig::Bench { outputs, .. }
            | RunConfig::Diag { outputs, .. } => outputs,
        }
    }

    /// Moves every output path under the old output directory into `dir`.
    pub fn redirect(&mut self, dir: PathBuf) {
        let old = self.outputs().dir.clone();
        let rebase = |p: &mut PathBuf| {
            if let Ok(rel) = p.strip_prefix(&old) {
                *p = dir.join(rel);
            }
        };
        match self {
            RunConfig::Pretrain { output, .. } | RunConfig::Init { output, .. } | RunConfig::Train { output, .. } => {
                rebase(output)
            }
            RunConfig::Export { output, reference, .. } => {
                rebase(output);
                if let Some(r) = reference {
                    rebase(r);
                }
            }
            RunConfig::Eval { .. } | RunConfig::Bench { .. } | RunConfig::Diag { .. } => {}
        }
        let outputs = self.outputs_mut();
        rebase(&mut outputs.metrics);
        outputs.dir = dir.clone();
    }
}
