//! Multi-sample Monte-Carlo training with Adam and a cosine schedule.

use serde::{Deserialize, Serialize};

use crate::data::{batches, AugmentationPolicy, Dataset};
use crate::distributions::probability_decay_penalty;
use crate::error::{Error, Result};
use crate::layers::activation_entropy;
use crate::model::{Architecture, ContinuousActivation, ForwardOptions, ForwardTrace, LarModel, ParamGroup, Stage};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Graph, NodeId, Tensor};

const SHUFFLE: u64 = 0x5f;
const AUGMENT: u64 = 0xa6;
const NOISE: u64 = 0x4e;
const PROBE: u64 = 0x9b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate factor of the last linear layer.
    pub head_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub tau: f64,
    /// Straight-through hard activation samples; the soft relaxation when false.
    pub hard: bool,
    pub prob_decay: f64,
    pub weight_decay: f64,
    pub mode: Stage,
    pub seed: u64,
    pub lr_activation: ContinuousActivation,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            head_lr_multiplier: 0.1,
            epochs: 300,
            batch_size: 64,
            mc_samples: 2,
            tau: 1.2,
            hard: true,
            prob_decay: 1e-12,
            weight_decay: 1e-4,
            mode: Stage::Lar,
            seed: 0,
            lr_activation: ContinuousActivation::Relu,
            augmentation: AugmentationPolicy::disabled(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("head_lr_multiplier", self.head_lr_multiplier),
            ("prob_decay", self.prob_decay),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("train config", format!("{name} must be finite and non-negative, got {v}")));
        }
        if self.mc_samples == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train config", "mc_samples and batch_size must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("train config", "tau must be positive"));
        }
        Ok(())
    }

    pub fn forward_options<T: Scalar>(&self, training: bool, noise_seed: u64) -> ForwardOptions<T> {
        ForwardOptions { training, tau: T::c(self.tau), hard: self.hard, noise_seed, lr_activation: self.lr_activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Mean weight entropy (nats) of each distribution layer.
    pub weight_entropy: Vec<f64>,
    /// Mean activation entropy (nats) of each sampled binary layer, on the probe set.
    pub activation_entropy: Vec<f64>,
    /// Expected fraction of zero weights.
    pub sparsity: f64,
    pub skipped_steps: usize,
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct McLoss {
    pub loss: NodeId,
    pub cross_entropy: NodeId,
    pub traces: Vec<ForwardTrace>,
}

/// Cross-entropy averaged over the batch and `S` independent noise draws,
/// plus the probability-decay penalty. Draw `s` uses seed `(seed, s)`.
/// `g` must not hold parameters yet.
pub fn mc_loss<T: Scalar>(
    model: &mut LarModel<T>,
    g: &mut Graph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<McLoss> {
    if labels.is_empty() || x.shape().first() != Some(&labels.len()) {
        return Err(Error::invalid("mc_loss", "empty batch or label count mismatch"));
    }
    if g.params().next().is_some() {
        return Err(Error::invalid("mc_loss", "graph already holds parameters"));
    }
    let samples = if model.stage == Stage::Pretrained { 1 } else { cfg.mc_samples.max(1) };
    let xn = g.constant(x.clone());
    let mut total: Option<NodeId> = None;
    let mut traces = Vec::with_capacity(samples);
    for s in 0..samples {
        let trace = model.forward(g, xn, &cfg.forward_options(true, derive_seed(&[seed, s as u64])))?;
        let ce = g.softmax_cross_entropy(trace.logits, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
        traces.push(trace);
    }
    let ce = g.scale(total.expect("at least one sample"), T::one() / T::c(samples as f64));
    let groups: Vec<ParamGroup> = model.params().iter().map(|p| p.1).collect();
    let logit_nodes: Vec<NodeId> =
        g.params().take(groups.len()).filter(|&(_, key)| groups[key] == ParamGroup::Logits).map(|(n, _)| n).collect();
    let penalty = probability_decay_penalty(g, &logit_nodes, T::c(cfg.prob_decay))?;
    let loss = g.add(ce, penalty)?;
    Ok(McLoss { loss, cross_entropy: ce, traces })
}

/// Adam with per-tensor learning rate and L2 decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: T::c(0.9), beta2: T::c(0.999), eps: T::c(1e-8), steps: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    /// One update of every tensor from its gradient buffer. Returns `false`
    /// (and changes nothing) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lrs: &[T], decays: &[T]) -> Result<bool> {
        if lrs.len() != params.len() || decays.len() != params.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[lrs.len(), decays.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::invalid("adam_step", "optimizer state does not match the parameters"));
        }
        if params.iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            log::warn!("non-finite gradient at step {}; update skipped", self.steps + 1);
            return Ok(false);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad: Vec<T> = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.len()]);
            let (lr, wd) = (lrs[i], decays[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j] + wd * *w;
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

fn group_rates<T: Scalar>(groups: &[ParamGroup], cfg: &TrainConfig, lr: f64) -> (Vec<T>, Vec<T>) {
    groups
        .iter()
        .map(|g| match g {
            ParamGroup::Head => (T::c(lr * cfg.head_lr_multiplier), T::c(cfg.weight_decay)),
            ParamGroup::FullPrecision => (T::c(lr), T::c(cfg.weight_decay)),
            ParamGroup::BatchNorm | ParamGroup::Logits => (T::c(lr), T::zero()),
        })
        .unzip()
}

/// Accuracy and sign-probability statistics of single stochastic
/// evaluation-mode passes over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub accuracy: f64,
    /// Mean binary entropy per sampled binary layer.
    pub activation_entropy: Vec<f64>,
    /// Raw sign probabilities per sampled binary layer (when requested).
    pub sign_probs: Vec<Vec<f32>>,
}

pub fn probe<T: Scalar>(
    model: &LarModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    keep_probs: bool,
) -> Result<Probe> {
    if data.is_empty() {
        return Err(Error::invalid("probe", "empty dataset"));
    }
    let mut model = model.clone();
    let mut correct = 0usize;
    let mut ent_sum: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut probs: Vec<Vec<f32>> = Vec::new();
    for (b, idx) in batches(data.len(), cfg.batch_size.max(1), None)?.enumerate() {
        let (x, labels) = data.batch::<T>(&idx, None)?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let trace = model.forward(&mut g, xn, &cfg.forward_options(false, derive_seed(&[seed, PROBE, b as u64])))?;
        let logits = g.value(trace.logits);
        let k = logits.shape()[1];
        for (i, row) in logits.data().chunks_exact(k).enumerate() {
            correct += usize::from(argmax(row) == labels[i]);
        }
        let layers: Vec<NodeId> = trace.sign_probs.iter().flatten().copied().collect();
        if ent_sum.is_empty() {
            ent_sum = vec![0.0; layers.len()];
            counts = vec![0; layers.len()];
            probs = vec![Vec::new(); layers.len()];
        }
        for (l, &p) in layers.iter().enumerate() {
            let ps = g.data(p);
            ent_sum[l] += activation_entropy(ps).iter().map(|v| v.as_f64()).sum::<f64>();
            counts[l] += ps.len();
            if keep_probs {
                probs[l].extend(ps.iter().map(|v| v.as_f64() as f32));
            }
        }
    }
    Ok(Probe {
        accuracy: correct as f64 / data.len() as f64,
        activation_entropy: ent_sum.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect(),
        sign_probs: probs,
    })
}

fn weight_stats<T: Scalar>(model: &LarModel<T>) -> (Vec<f64>, f64) {
    let mut entropies = Vec::new();
    let (mut zero, mut total) = (0.0, 0usize);
    for (_, d) in model.distributions() {
        let e = d.entropy();
        entropies.push(e.iter().map(|v| v.as_f64()).sum::<f64>() / e.len().max(1) as f64);
        zero += d.probabilities().zero.iter().map(|v| v.as_f64()).sum::<f64>();
        total += d.len();
    }
    (entropies, if total == 0 { 0.0 } else { zero / total as f64 })
}

/// Runs `cfg.epochs` epochs of MC loss → backward → Adam. `on_epoch` sees
/// every epoch's metrics as soon as they exist. A non-finite loss restores
/// the model of the last completed epoch and returns an error.
pub fn train<T: Scalar>(
    model: &mut LarModel<T>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainingMetrics) -> Result<()>,
) -> Result<Vec<TrainingMetrics>> {
    cfg.validate()?;
    if cfg.mode != model.stage {
        return Err(Error::invalid(
            "train",
            format!("config mode {:?} does not match model stage {:?}", cfg.mode, model.stage),
        ));
    }
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if train_set.shape[..] != model.arch.input_shape[..] || train_set.num_classes != model.arch.num_classes {
        return Err(Error::shape("train", &train_set.shape, &model.arch.input_shape));
    }
    let groups: Vec<ParamGroup> = model.params().iter().map(|p| p.1).collect();
    let mut adam = Adam::<T>::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let (lrs, decays) = group_rates::<T>(&groups, cfg, lr);
        let (mut loss_sum, mut correct, mut seen, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        let order = batches(train_set.len(), cfg.batch_size, Some(derive_seed(&[cfg.seed, SHUFFLE, epoch as u64])))?;
        for (b, idx) in order.enumerate() {
            let aug_seed = derive_seed(&[cfg.seed, AUGMENT, epoch as u64, b as u64]);
            let (x, labels) = train_set.batch::<T>(&idx, Some((&cfg.augmentation, aug_seed)))?;
            let mut g = Graph::new();
            let out =
                mc_loss(model, &mut g, &x, &labels, cfg, derive_seed(&[cfg.seed, NOISE, epoch as u64, b as u64]))?;
            let loss = g.value(out.loss).item();
            if !loss.is_finite() {
                *model = last_good;
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            let grads = g.backward(out.loss)?;
            model.zero_grad();
            model.accumulate_grads(&g, &grads, T::one());
            if !adam.step(&mut model.params_mut(), &lrs, &decays)? {
                skipped += 1;
            }
            loss_sum += loss.as_f64() * labels.len() as f64;
            let logits = g.value(out.traces[0].logits);
            let k = logits.shape()[1];
            for (i, row) in logits.data().chunks_exact(k).enumerate() {
                correct += usize::from(argmax(row) == labels[i]);
            }
            seen += labels.len();
        }
        model.zero_grad();
        let probe_set = test_set.unwrap_or(train_set);
        let pr = probe(model, probe_set, cfg, derive_seed(&[cfg.seed, epoch as u64]), false)?;
        let (weight_entropy, sparsity) = weight_stats(model);
        let m = TrainingMetrics {
            stage: model.stage,
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy: test_set.map(|_| pr.accuracy),
            weight_entropy,
            activation_entropy: pr.activation_entropy,
            sparsity,
            skipped_steps: skipped,
        };
        log::info!(
            "{:?} epoch {epoch}: loss {:.4} train {:.4} test {:?}",
            m.stage,
            m.loss,
            m.train_accuracy,
            m.test_accuracy
        );
        on_epoch(&m)?;
        history.push(m);
        last_good = model.clone();
    }
    Ok(history)
}

/// Trains a real-weight network with tanh at every future sign position.
pub fn pretrain_continuous<T: Scalar>(
    arch: Architecture,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&TrainingMetrics) -> Result<()>,
) -> Result<(LarModel<T>, Vec<TrainingMetrics>)> {
    let mut model = LarModel::new_pretrain(arch, cfg.seed)?;
    let cfg = TrainConfig { mode: Stage::Pretrained, ..cfg.clone() };
    let history = train(&mut model, train_set, test_set, &cfg, on_epoch)?;
    Ok((model, history))
}
