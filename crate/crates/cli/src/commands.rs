use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use larnet::data::{load_cifar_dir, load_mnist_dir, normalize_splits, synthetic_blobs, Dataset};
use larnet::distributions::WeightMode;
use larnet::inference::{bench_dot, best_of_k, evaluate, DiscreteModel, EvalMode, InferenceModel, PackedModel};
use larnet::layers::activation_entropy;
use larnet::model::{Architecture, LarModel, Stage};
use larnet::model_io::{self, FileKind};
use larnet::trainer::{pretrain_continuous, probe, train, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataConfig, DataFormat, RunConfig};
use crate::Failure;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn require_file(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", p.display())))
    }
}

fn validate_data(d: &DataConfig) -> Result<(), Failure> {
    match d.format {
        DataFormat::Mnist | DataFormat::Cifar => match &d.path {
            None => Err(invalid("--data is required for mnist and cifar datasets")),
            Some(p) if !p.is_dir() => Err(invalid(format!("dataset directory {} does not exist", p.display()))),
            Some(_) => Ok(()),
        },
        DataFormat::Synthetic => {
            let s = &d.synthetic;
            if s.classes < 2 || s.per_class < 4 || s.shape.contains(&0) {
                return Err(invalid("synthetic data needs ≥ 2 classes, ≥ 4 examples per class and a non-empty shape"));
            }
            Ok(())
        }
    }?;
    if d.limit_train == Some(0) || d.limit_test == Some(0) {
        return Err(invalid("dataset limits must be at least 1"));
    }
    Ok(())
}

/// Checks everything that can be checked before any work starts.
pub fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    match cfg {
        RunConfig::Pretrain { data, train, .. } => {
            validate_data(data)?;
            train.validate()?;
        }
        RunConfig::Init { model, p_zero_lo, p_zero_hi, .. } => {
            require_file(model, "model")?;
            if !(0.0 < *p_zero_lo && p_zero_lo < p_zero_hi && *p_zero_hi < 1.0) {
                return Err(invalid(format!("need 0 < p-zero-lo < p-zero-hi < 1, got {p_zero_lo} and {p_zero_hi}")));
            }
        }
        RunConfig::Train { model, data, train, .. } => {
            require_file(model, "model")?;
            validate_data(data)?;
            train.validate()?;
        }
        RunConfig::Eval { model, data, .. } | RunConfig::Diag { model, data, .. } => {
            require_file(model, "model")?;
            validate_data(data)?;
        }
        RunConfig::Export { model, data, k, .. } => {
            require_file(model, "model")?;
            validate_data(data)?;
            if *k == 0 {
                return Err(invalid("--k must be at least 1"));
            }
        }
        RunConfig::Bench { lengths, .. } => {
            if lengths.is_empty() || lengths.contains(&0) {
                return Err(invalid("--length needs positive values"));
            }
        }
    }
    if let RunConfig::Diag { bins: 0, .. } = cfg {
        return Err(invalid("--bins must be at least 1"));
    }
    Ok(())
}

/// Stem shared by the config snapshot and the default metrics file.
fn label(cfg: &RunConfig) -> String {
    match cfg {
        RunConfig::Train { train, .. } => match train.mode {
            Stage::Lr => "train-lr".into(),
            _ => "train-lar".into(),
        },
        other => other.name().into(),
    }
}

pub fn write_snapshot(cfg: &RunConfig) -> Result<(), Failure> {
    let dir = &cfg.outputs().dir;
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(format!("{}.config.json", label(cfg)));
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    model_io::write_atomic(&path, text.as_bytes())?;
    log::info!("config snapshot: {}", path.display());
    Ok(())
}

/// Appends one JSON object per line.
struct Metrics {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl Metrics {
    fn open(path: &Path) -> Result<Self, Failure> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_failure(path, e))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    fn write(&mut self, record: &impl Serialize) -> Result<(), Failure> {
        let mut line = serde_json::to_string(record).map_err(|e| Failure::Runtime(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| io_failure(&self.path, e))?;
        self.file.flush().map_err(|e| io_failure(&self.path, e))
    }
}

fn load_data(d: &DataConfig) -> Result<(Dataset, Dataset), Failure> {
    let (mut train, mut test) = match d.format {
        DataFormat::Mnist => load_mnist_dir(d.path.as_ref().expect("validated"))?,
        DataFormat::Cifar => load_cifar_dir(d.path.as_ref().expect("validated"))?,
        DataFormat::Synthetic => {
            let s = &d.synthetic;
            synthetic_blobs(s.classes, s.per_class, s.shape, s.spread, s.seed)?
        }
    };
    if let Some(n) = d.limit_train {
        train = train.take(n);
    }
    if let Some(n) = d.limit_test {
        test = test.take(n);
    }
    normalize_splits(&mut train, &mut test, d.normalization)?;
    log::info!("data: {} train, {} test, shape {:?}", train.len(), test.len(), train.shape);
    Ok((train, test))
}

fn load_model(path: &Path) -> Result<LarModel<f32>, Failure> {
    Ok(model_io::load_model(path)?)
}

fn check_data(arch: &Architecture, data: &Dataset) -> Result<(), Failure> {
    if data.shape[..] != arch.input_shape[..] || data.num_classes != arch.num_classes {
        return Err(invalid(format!(
            "dataset shape {:?} with {} classes does not fit a model for {:?} with {} classes",
            data.shape, data.num_classes, arch.input_shape, arch.num_classes
        )));
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig) -> Result<(), Failure> {
    let mut metrics = Metrics::open(&cfg.outputs().metrics)?;
    match cfg {
        RunConfig::Pretrain { arch, batch_norm, data, train: tc, output, .. } => {
            let (train_set, test_set) = load_data(data)?;
            let arch = Architecture::named(*arch, &train_set.shape, train_set.num_classes, *batch_norm)?;
            let (model, _) = pretrain_continuous::<f32>(arch, &train_set, Some(&test_set), tc, |m| {
                metrics.write(m).map_err(|e| larnet::Error::NonFinite(e.to_string()))
            })?;
            model_io::save_model(&model, output)?;
            log::info!("wrote {}", output.display());
        }
        RunConfig::Init { model, p_zero_lo, p_zero_hi, binary, output, .. } => {
            let m = load_model(model)?;
            if m.stage != Stage::Pretrained {
                return Err(invalid(format!("{} is not a pretrained model", model.display())));
            }
            let mut arch = m.arch.clone();
            if *binary {
                for l in &mut arch.layers {
                    if l.weights == larnet::model::WeightKind::Ternary {
                        l.weights = larnet::model::WeightKind::Binary;
                    }
                }
            }
            let m = LarModel { arch, ..m }.init_distributions(*p_zero_lo as f32, *p_zero_hi as f32)?;
            let p_zero: Vec<f64> = m
                .distributions()
                .iter()
                .filter(|(_, d)| d.mode() == WeightMode::Ternary)
                .map(|(_, d)| d.probabilities().zero.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64)
                .collect();
            metrics.write(&json!({ "stage": "lr", "mean_p_zero": p_zero }))?;
            model_io::save_model(&m, output)?;
            log::info!("wrote {}", output.display());
        }
        RunConfig::Train { model, data, train: tc, output, .. } => {
            let m = load_model(model)?;
            let mut m = match (m.stage, tc.mode) {
                (Stage::Pretrained, _) => return Err(invalid(format!("{}: run `init` first", model.display()))),
                (Stage::Lar, Stage::Lr) => return Err(invalid("a LAR-stage model cannot go back to the LR stage")),
                (s, t) if s == t => m,
                (_, t) => m.with_stage(t)?,
            };
            let (train_set, test_set) = load_data(data)?;
            check_data(&m.arch, &train_set)?;
            let result = train(&mut m, &train_set, Some(&test_set), tc, |r| {
                metrics.write(r).map_err(|e| larnet::Error::NonFinite(e.to_string()))
            });
            // a failed run still leaves the last completed epoch on disk
            model_io::save_model(&m, output)?;
            log::info!("wrote {}", output.display());
            result?;
        }
        RunConfig::Eval { model, data, mode, seed, .. } => {
            let (_, test_set) = load_data(data)?;
            let (accuracy, path) = match model_io::sniff(model)? {
                FileKind::Packed => {
                    let p = model_io::load_packed(model)?;
                    check_data(&p.arch, &test_set)?;
                    (evaluate(&InferenceModel::Packed(&p), &test_set)?, "packed")
                }
                FileKind::Model => {
                    let m = load_model(model)?;
                    check_data(&m.arch, &test_set)?;
                    if m.stage == Stage::Pretrained {
                        let cfg = TrainConfig { mode: m.stage, ..TrainConfig::default() };
                        (probe(&m, &test_set, &cfg, *seed, false)?.accuracy, "continuous")
                    } else {
                        let d = DiscreteModel::sample(&m, *seed)?;
                        match mode {
                            EvalMode::Reference => (evaluate(&InferenceModel::Reference(&d), &test_set)?, "reference"),
                            EvalMode::Packed => {
                                let p = PackedModel::from_discrete(&d)?;
                                (evaluate(&InferenceModel::Packed(&p), &test_set)?, "packed")
                            }
                        }
                    }
                }
            };
            let record = json!({
                "model": model,
                "path": path,
                "examples": test_set.len(),
                "accuracy": accuracy,
            });
            println!("{record}");
            metrics.write(&record)?;
        }
        RunConfig::Export { model, data, k, seed, output, reference, .. } => {
            let m = load_model(model)?;
            if m.stage == Stage::Pretrained {
                return Err(invalid(format!("{}: run `init` and `train` first", model.display())));
            }
            let (_, test_set) = load_data(data)?;
            check_data(&m.arch, &test_set)?;
            let best = best_of_k(&m, *k, &test_set, *seed)?;
            let packed = PackedModel::from_discrete(&best.model)?;
            model_io::save_packed(&packed, output)?;
            if let Some(r) = reference {
                model_io::save_model(&best.model.point_mass(&m)?, r)?;
            }
            let (float_bytes, packed_bytes) = model_io::interior_weight_bytes(&m, &packed);
            let record = json!({
                "accuracies": best.accuracies,
                "index": best.index,
                "sample_seed": best.seed,
                "sparsity": best.model.sparsity(),
                "interior_float_bytes": float_bytes,
                "interior_packed_bytes": packed_bytes,
                "output": output,
            });
            println!("{record}");
            metrics.write(&record)?;
        }
        RunConfig::Bench { lengths, budget_ms, seed, .. } => {
            for &n in lengths {
                for r in bench_dot(n, Duration::from_millis(*budget_ms), *seed)? {
                    println!("{}", serde_json::to_string(&r).map_err(|e| Failure::Runtime(e.to_string()))?);
                    metrics.write(&r)?;
                }
            }
        }
        RunConfig::Diag { model, data, bins, seed, outputs } => {
            let m = load_model(model)?;
            let (_, test_set) = load_data(data)?;
            check_data(&m.arch, &test_set)?;
            let dir = outputs.dir.join("diag");
            std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
            let mut files = Vec::new();
            for (layer, d) in m.distributions() {
                let support = if d.mode() == WeightMode::Ternary { 3f64 } else { 2.0 };
                let values: Vec<f64> = d.entropy().iter().map(|&v| f64::from(v)).collect();
                let path = dir.join(format!("weight_entropy_layer{layer}.csv"));
                write_histogram(&path, &values, support.ln(), *bins)?;
                files.push(path);
            }
            let cfg = TrainConfig { mode: m.stage, ..TrainConfig::default() };
            let pr = probe(&m, &test_set, &cfg, *seed, true)?;
            let sign_layers: Vec<usize> = m
                .arch
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.activation == larnet::model::Activation::Sign)
                .map(|(i, _)| i)
                .collect();
            for (probs, layer) in pr.sign_probs.iter().zip(&sign_layers) {
                let values: Vec<f64> = activation_entropy(probs).iter().map(|&v| f64::from(v)).collect();
                let path = dir.join(format!("activation_entropy_layer{layer}.csv"));
                write_histogram(&path, &values, 2f64.ln(), *bins)?;
                files.push(path);
            }
            let record = json!({
                "files": files,
                "activation_entropy": pr.activation_entropy,
                "accuracy": pr.accuracy,
            });
            println!("{record}");
            metrics.write(&record)?;
        }
    }
    Ok(())
}

/// Counts of `values` in `bins` equal-width bins over `[0, max]`.
fn write_histogram(path: &Path, values: &[f64], max: f64, bins: usize) -> Result<(), Failure> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / max) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| io_failure(path, e);
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(err)?;
    for (i, c) in counts.iter().enumerate() {
        let lo = max * i as f64 / bins as f64;
        let hi = max * (i + 1) as f64 / bins as f64;
        w.write_record([lo.to_string(), hi.to_string(), c.to_string()]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| io_failure(path, e))?;
    model_io::write_atomic(path, &bytes)?;
    Ok(())
}
