//! Layer stacks and their staged forward passes.
//!
//! A model moves through three stages that share one architecture:
//! `Pretrained` (real weights, tanh where the sign will go), `Lr` (weight
//! distributions, Gaussian-sampled pre-activations, continuous activation)
//! and `Lar` (weight distributions and Gumbel-sampled binary activations).
//! The first and last layers keep real weights throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{WeightDistribution, WeightMode};
use crate::error::{Error, Result};
use crate::layers::{self, BatchNormState, LayerKind, PreActivation};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    FullPrecision,
    Ternary,
    Binary,
}

impl WeightKind {
    pub fn discrete_mode(self) -> Option<WeightMode> {
        match self {
            WeightKind::FullPrecision => None,
            WeightKind::Ternary => Some(WeightMode::Ternary),
            WeightKind::Binary => Some(WeightMode::Binary),
        }
    }
}

/// Activation slot. `Sign` slots become tanh while pretraining and the
/// continuous LR activation during the LR stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sign,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousActivation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weights: WeightKind,
    pub batch_norm: bool,
    pub bias: bool,
    pub activation: Activation,
    /// Adds the layer input to the (normalized) pre-activation.
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    MlpSmall,
    CnnSmall,
    MiniResnet,
}

impl std::str::FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(ArchName::MlpSmall),
            "cnn-small" => Ok(ArchName::CnnSmall),
            "mini-resnet" => Ok(ArchName::MiniResnet),
            _ => Err(Error::invalid("architecture", format!("unknown architecture {s:?}"))),
        }
    }
}

/// Self-describing layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-example input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Standard deviation of the noise assumed on real-weight sign layers.
    pub sign_noise: f64,
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding }
}

impl Architecture {
    fn stem(kind: LayerKind, batch_norm: bool) -> LayerSpec {
        LayerSpec {
            kind,
            weights: WeightKind::FullPrecision,
            batch_norm,
            bias: !batch_norm,
            activation: Activation::Sign,
            residual: false,
        }
    }

    fn discrete(kind: LayerKind, weights: WeightKind, batch_norm: bool, residual: bool) -> LayerSpec {
        LayerSpec { kind, weights, batch_norm, bias: false, activation: Activation::Sign, residual }
    }

    fn head(in_features: usize, out_features: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Linear { in_features, out_features },
            weights: WeightKind::FullPrecision,
            batch_norm: false,
            bias: true,
            activation: Activation::Identity,
            residual: false,
        }
    }

    fn finish(input_shape: &[usize], num_classes: usize, mut layers: Vec<LayerSpec>) -> Result<Self> {
        let mut arch = Self { input_shape: input_shape.to_vec(), num_classes, layers: Vec::new(), sign_noise: 1.0 };
        let mut shape = input_shape.to_vec();
        for l in &layers {
            shape = l.kind.output_shape(&shape)?;
        }
        let flat: usize = shape.iter().product();
        layers.push(Self::head(flat, num_classes));
        arch.layers = layers;
        arch.validate()?;
        Ok(arch)
    }

    /// Real linear → ternary linear → real head.
    pub fn mlp_small(input_shape: &[usize], num_classes: usize, hidden: usize, batch_norm: bool) -> Result<Self> {
        let n: usize = input_shape.iter().product();
        let layers = vec![
            Self::stem(LayerKind::Linear { in_features: n, out_features: hidden }, batch_norm),
            Self::discrete(
                LayerKind::Linear { in_features: hidden, out_features: hidden },
                WeightKind::Ternary,
                batch_norm,
                false,
            ),
        ];
        Self::finish(input_shape, num_classes, layers)
    }

    /// Real 5×5/2 conv → ternary 3×3/2 conv → real head.
    pub fn cnn_small(
        input_shape: &[usize],
        num_classes: usize,
        c1: usize,
        c2: usize,
        batch_norm: bool,
    ) -> Result<Self> {
        let c = input_shape.first().copied().unwrap_or(1);
        let layers = vec![
            Self::stem(conv(c, c1, 5, 2, 2), batch_norm),
            Self::discrete(conv(c1, c2, 3, 2, 1), WeightKind::Ternary, batch_norm, false),
        ];
        Self::finish(input_shape, num_classes, layers)
    }

    /// Real stem, then two stages of (strided ternary conv, residual ternary conv).
    pub fn mini_resnet(input_shape: &[usize], num_classes: usize, width: usize, batch_norm: bool) -> Result<Self> {
        let c = input_shape.first().copied().unwrap_or(1);
        let w = width;
        let layers = vec![
            Self::stem(conv(c, w, 3, 1, 1), batch_norm),
            Self::discrete(conv(w, 2 * w, 3, 2, 1), WeightKind::Ternary, batch_norm, false),
            Self::discrete(conv(2 * w, 2 * w, 3, 1, 1), WeightKind::Ternary, batch_norm, true),
            Self::discrete(conv(2 * w, 4 * w, 3, 2, 1), WeightKind::Ternary, batch_norm, false),
            Self::discrete(conv(4 * w, 4 * w, 3, 1, 1), WeightKind::Ternary, batch_norm, true),
        ];
        Self::finish(input_shape, num_classes, layers)
    }

    /// Default-sized architecture by name.
    pub fn named(name: ArchName, input_shape: &[usize], num_classes: usize, batch_norm: bool) -> Result<Self> {
        match name {
            ArchName::MlpSmall => Self::mlp_small(input_shape, num_classes, 256, batch_norm),
            ArchName::CnnSmall => Self::cnn_small(input_shape, num_classes, 32, 64, batch_norm),
            ArchName::MiniResnet => Self::mini_resnet(input_shape, num_classes, 16, batch_norm),
        }
    }

    /// Checks shape consistency; returns every layer's per-example input shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("architecture", "no layers"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            shapes.push(shape.clone());
            let out = l.kind.output_shape(&shape)?;
            if l.residual && out != shape {
                return Err(Error::invalid(
                    "architecture",
                    format!("layer {i}: residual needs equal input/output shapes, got {shape:?} -> {out:?}"),
                ));
            }
            shape = out;
        }
        let last = self.layers.last().unwrap();
        if last.activation != Activation::Identity || shape != [self.num_classes] {
            return Err(Error::invalid("architecture", "last layer must be a linear head over the classes"));
        }
        if !(self.sign_noise >= 0.0) {
            return Err(Error::invalid("architecture", "sign_noise must be non-negative"));
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Lr,
    Lar,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights<T> {
    Real(Tensor<T>),
    Distribution(WeightDistribution<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: LayerWeights<T>,
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
}

/// Optimizer treatment of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Distribution logits: probability decay only.
    Logits,
    /// Real weights and biases except the head: weight decay.
    FullPrecision,
    /// Batch-norm affine parameters: no decay.
    BatchNorm,
    /// Last linear layer: weight decay and the reduced learning rate.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LarModel<T> {
    pub arch: Architecture,
    pub stage: Stage,
    pub layers: Vec<LayerParams<T>>,
}

/// Knobs for one stochastic forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<T> {
    pub training: bool,
    pub tau: T,
    pub hard: bool,
    /// Seed of this pass; each layer derives its own stream from it.
    pub noise_seed: u64,
    pub lr_activation: ContinuousActivation,
}

impl<T: Scalar> ForwardOptions<T> {
    pub fn training(noise_seed: u64) -> Self {
        Self { training: true, tau: T::c(1.2), hard: true, noise_seed, lr_activation: ContinuousActivation::Relu }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Sign probabilities of every sampled binary layer (LAR stage only).
    pub sign_probs: Vec<Option<NodeId>>,
    /// Every layer's output node.
    pub outputs: Vec<NodeId>,
}

impl<T: Scalar> LarModel<T> {
    /// Pretraining model with LeCun-uniform real weights everywhere.
    pub fn new_pretrain(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut r = rng::stream_for(&[seed, 0x1417, i as u64]);
                let shape = spec.kind.weight_shape();
                let bound = (3.0 / spec.kind.fan_in() as f64).sqrt();
                let w = Tensor::from_fn(shape, |_| T::c(r.gen_range(-bound..bound)));
                LayerParams {
                    weights: LayerWeights::Real(w),
                    bias: spec.bias.then(|| Tensor::zeros(vec![spec.kind.out_channels()])),
                    bn: spec.batch_norm.then(|| BatchNormState::new(spec.kind.out_channels())),
                }
            })
            .collect();
        Ok(Self { arch, stage: Stage::Pretrained, layers })
    }

    /// LR-stage model: discrete slots become distributions initialized from
    /// the pretrained real weights; everything else is copied.
    pub fn init_distributions(&self, p_lo: T, p_hi: T) -> Result<Self> {
        let mut out = self.clone();
        for (spec, layer) in out.arch.layers.iter().zip(out.layers.iter_mut()) {
            let Some(mode) = spec.weights.discrete_mode() else { continue };
            let LayerWeights::Real(w) = &layer.weights else { continue };
            let dist = match mode {
                WeightMode::Ternary => WeightDistribution::init_from_pretrained(w, p_lo, p_hi)?,
                WeightMode::Binary => {
                    let t = WeightDistribution::init_from_pretrained(w, p_lo, p_hi)?;
                    WeightDistribution::binary(t.sign_logits().clone())
                }
            };
            layer.weights = LayerWeights::Distribution(dist);
        }
        out.stage = Stage::Lr;
        Ok(out)
    }

    /// Same parameters, different stage (e.g. LR → LAR transfer).
    pub fn with_stage(&self, stage: Stage) -> Result<Self> {
        let has_dist = self.layers.iter().any(|l| matches!(l.weights, LayerWeights::Distribution(_)));
        if stage != Stage::Pretrained
            && !has_dist
            && self.arch.layers.iter().any(|s| s.weights != WeightKind::FullPrecision)
        {
            return Err(Error::invalid("with_stage", "model has no weight distributions; initialize them first"));
        }
        let mut out = self.clone();
        out.stage = stage;
        Ok(out)
    }

    /// Parameter tensors in binding order, with their optimizer group.
    pub fn params(&self) -> Vec<(&Tensor<T>, ParamGroup)> {
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let real_group = if i == last { ParamGroup::Head } else { ParamGroup::FullPrecision };
            match &l.weights {
                LayerWeights::Real(w) => out.push((w, real_group)),
                LayerWeights::Distribution(d) => out.extend(d.logits().into_iter().map(|t| (t, ParamGroup::Logits))),
            }
            if let Some(b) = &l.bias {
                out.push((b, real_group));
            }
            if let Some(bn) = &l.bn {
                out.push((&bn.gamma, ParamGroup::BatchNorm));
                out.push((&bn.beta, ParamGroup::BatchNorm));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            match &mut l.weights {
                LayerWeights::Real(w) => out.push(w),
                LayerWeights::Distribution(d) => out.extend(d.logits_mut()),
            }
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(t, _)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|t| t.zero_grad());
    }

    /// Adds the gradients of every bound parameter into its buffer, scaled by `scale`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, grads: &crate::tensor::Gradients<T>, scale: T) {
        let bound: Vec<(NodeId, usize)> = g.params().collect();
        let mut params = self.params_mut();
        for (node, key) in bound {
            if let Some(gr) = grads.get(node) {
                let scaled: Vec<T> = gr.iter().map(|&v| v * scale).collect();
                params[key].accumulate_grad(&scaled);
            }
        }
    }

    pub fn distributions(&self) -> Vec<(usize, &WeightDistribution<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match &l.weights {
                LayerWeights::Distribution(d) => Some((i, d)),
                _ => None,
            })
            .collect()
    }

    /// Stochastic forward pass of a batch `x[B, ..input_shape]`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: NodeId, opts: &ForwardOptions<T>) -> Result<ForwardTrace> {
        let expected: Vec<usize> = self.arch.input_shape.clone();
        if g.shape(x).len() != expected.len() + 1 || g.shape(x)[1..] != expected[..] {
            return Err(Error::shape("forward", g.shape(x), &expected));
        }
        let stage = self.stage;
        let sign_noise = T::c(self.arch.sign_noise);
        let mut key = 0usize;
        let mut h = x;
        let mut sign_probs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, (spec, layer)) in self.arch.layers.iter().zip(self.layers.iter_mut()).enumerate() {
            let mut noise = rng::stream_for(&[opts.noise_seed, i as u64]);
            let (mut mean, mut std) = match &layer.weights {
                LayerWeights::Real(w) => {
                    let wn = g.param(w, key);
                    key += 1;
                    (spec.kind.apply(g, h, wn)?, None)
                }
                LayerWeights::Distribution(d) => {
                    let zero = d.zero_logits().map(|l| {
                        let n = g.param(l, key);
                        key += 1;
                        n
                    });
                    let sign = g.param(d.sign_logits(), key);
                    key += 1;
                    let (mu, var) = WeightDistribution::moments_on_graph(g, zero, sign)?;
                    let pre = layers::clt_forward(g, &spec.kind, h, mu, var)?;
                    match stage {
                        Stage::Lar => (pre.mean, Some(pre.std)),
                        Stage::Lr => {
                            let eps: Vec<T> = (0..g.value(pre.std).len()).map(|_| rng::normal(&mut noise)).collect();
                            let eps = g.constant(Tensor::new(g.shape(pre.std).to_vec(), eps)?);
                            let spread = g.mul(eps, pre.std)?;
                            (g.add(pre.mean, spread)?, None)
                        }
                        Stage::Pretrained => {
                            return Err(Error::invalid("forward", "pretrained stage cannot hold distributions"));
                        }
                    }
                }
            };
            if let Some(b) = &layer.bias {
                let bn_ = g.param(b, key);
                key += 1;
                mean = g.add_channel(mean, bn_)?;
            }
            if let Some(bn) = layer.bn.as_mut() {
                let gamma = g.param(&bn.gamma, key);
                let beta = g.param(&bn.beta, key + 1);
                key += 2;
                let (m, s) = layers::dist_batch_norm(g, mean, std, bn, gamma, beta, opts.training)?;
                mean = m;
                std = s;
            }
            if spec.residual {
                mean = g.add(mean, h)?;
            }
            let mut prob = None;
            h = match (spec.activation, stage) {
                (Activation::Identity, _) => mean,
                (Activation::Sign, Stage::Pretrained) => g.tanh(mean),
                (Activation::Sign, Stage::Lr) => match opts.lr_activation {
                    ContinuousActivation::Relu => g.relu(mean),
                    ContinuousActivation::Tanh => g.tanh(mean),
                },
                (Activation::Sign, Stage::Lar) => {
                    let std = match std {
                        Some(s) => s,
                        None => g.constant(Tensor::full(g.shape(mean).to_vec(), sign_noise)),
                    };
                    let p = layers::sign_probability(g, PreActivation { mean, std })?;
                    prob = Some(p);
                    layers::binary_activation(g, p, opts.tau, opts.hard, &mut noise)?
                }
            };
            sign_probs.push(prob);
            outputs.push(h);
        }
        Ok(ForwardTrace { logits: h, sign_probs, outputs })
    }
}
