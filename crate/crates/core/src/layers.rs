//! Stochastic layer internals: Gaussian propagation of pre-activations,
//! batch normalization over those Gaussians, sign probabilities and the
//! Gumbel-Softmax binary activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax, softmax, Graph, NodeId, Tensor};

/// Below this standard deviation a pre-activation is treated as deterministic.
pub const V_FLOOR: f64 = 1e-8;
/// Probability floor inside `log π`.
pub const P_FLOOR: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape and geometry of a layer's linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Linear { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Linear { in_features, out_features } => vec![out_features, in_features],
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerKind::Linear { out_features, .. } => out_features,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }

    /// Inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Linear { in_features, out_features } => {
                let n: usize = input.iter().product();
                if n != in_features {
                    return Err(Error::shape("linear layer", input, &[in_features]));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if input.len() != 3
                    || input[0] != in_channels
                    || input[1] + 2 * padding < kernel
                    || input[2] + 2 * padding < kernel
                {
                    return Err(Error::shape("conv2d layer", input, &[in_channels, kernel, kernel]));
                }
                Ok(vec![
                    out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
        }
    }

    /// Applies the linear map on the graph, flattening `[B, ..]` inputs for linear layers.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, w: NodeId) -> Result<NodeId> {
        match *self {
            LayerKind::Linear { .. } => {
                let s = g.shape(x).to_vec();
                let x = if s.len() > 2 { g.reshape(x, &[s[0], s[1..].iter().product()])? } else { x };
                g.linear(x, w)
            }
            LayerKind::Conv2d { stride, padding, .. } => g.conv2d(x, w, stride, padding),
        }
    }
}

/// Gaussian pre-activation: mean and standard deviation nodes of equal shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreActivation {
    pub mean: NodeId,
    pub std: NodeId,
}

/// `m = map(h; μ)`, `v = sqrt(map(h²; σ²))`.
pub fn clt_forward<T: Scalar>(
    g: &mut Graph<T>,
    kind: &LayerKind,
    h: NodeId,
    mean_w: NodeId,
    var_w: NodeId,
) -> Result<PreActivation> {
    let mean = kind.apply(g, h, mean_w)?;
    let h2 = g.square(h);
    let var = kind.apply(g, h2, var_w)?;
    let std = g.sqrt(var);
    Ok(PreActivation { mean, std })
}

/// Per-channel affine parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Number of training batches folded into the running statistics.
    pub tracked: u64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::c(BN_MOMENTUM),
            eps: T::c(BN_EPS),
            tracked: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn update_running(&mut self, mean: &[T], var: &[T]) {
        let keep = T::one() - self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = keep * self.running_var[c] + self.momentum * var[c];
        }
        self.tracked += 1;
    }
}

/// Batch normalization of Gaussian pre-activations.
///
/// Training mode uses the law of total variance: the channel variance is the
/// spread of the means plus the average variance. `pre.std = None` means a
/// deterministic input and reduces to ordinary batch normalization. `gamma`
/// and `beta` are the graph nodes of `bn.gamma` / `bn.beta`.
pub fn dist_batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    mean: NodeId,
    std: Option<NodeId>,
    bn: &mut BatchNormState<T>,
    gamma: NodeId,
    beta: NodeId,
    training: bool,
) -> Result<(NodeId, Option<NodeId>)> {
    let shape = g.shape(mean).to_vec();
    if shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("dist_batch_norm", "empty batch"));
    }
    if shape.len() < 2 || shape[1] != bn.channels() {
        return Err(Error::shape("dist_batch_norm", &shape, &[bn.channels()]));
    }
    let (centered, total_var) = if training {
        let mu = g.channel_mean(mean)?;
        let neg_mu = g.neg(mu);
        let centered = g.add_channel(mean, neg_mu)?;
        let sq = g.square(centered);
        let mut var = g.channel_mean(sq)?;
        if let Some(s) = std {
            let s2 = g.square(s);
            let within = g.channel_mean(s2)?;
            var = g.add(var, within)?;
        }
        let (mu_v, var_v) = (g.data(mu).to_vec(), g.data(var).to_vec());
        bn.update_running(&mu_v, &var_v);
        (centered, var)
    } else {
        let neg_mu = g.constant(Tensor::new(vec![bn.channels()], bn.running_mean.iter().map(|&v| -v).collect())?);
        let centered = g.add_channel(mean, neg_mu)?;
        let var = g.constant(Tensor::new(vec![bn.channels()], bn.running_var.clone())?);
        (centered, var)
    };
    let shifted = g.offset(total_var, bn.eps);
    let sd = g.sqrt(shifted);
    let inv = g.recip(sd);
    let scale = g.mul(gamma, inv)?;
    let scaled = g.mul_channel(centered, scale)?;
    let out_mean = g.add_channel(scaled, beta)?;
    let out_std = match std {
        Some(s) => {
            let abs_scale = g.abs(scale);
            Some(g.mul_channel(s, abs_scale)?)
        }
        None => None,
    };
    Ok((out_mean, out_std))
}

/// `p = Φ(m / v)` with the deterministic limit below [`V_FLOOR`].
pub fn sign_probability<T: Scalar>(g: &mut Graph<T>, pre: PreActivation) -> Result<NodeId> {
    g.sign_probability(pre.mean, pre.std, T::c(V_FLOOR))
}

/// `h = ĥ₊ − ĥ₋` from a Gumbel-Softmax draw over `π = [1 − p, p]`.
///
/// Only `g₊ − g₋` enters the two-class draw, so one logistic variate per
/// unit stands in for the Gumbel pair.
pub fn binary_activation<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: NodeId,
    tau: T,
    hard: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let noise: Vec<(T, T)> = (0..g.value(p).len()).map(|_| (T::zero(), rng::logistic(rng))).collect();
    g.binary_gumbel(p, &noise, tau, hard, T::c(P_FLOOR))
}

/// One Gumbel-Softmax draw from `probs` (sums to 1). Hard mode returns the one-hot argmax.
pub fn gumbel_softmax_sample<T: Scalar, R: Rng + ?Sized>(
    probs: &[T],
    tau: T,
    hard: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let noise: Vec<T> = (0..probs.len()).map(|_| rng::gumbel(rng)).collect();
    gumbel_softmax_with_noise(probs, &noise, tau, hard)
}

/// [`gumbel_softmax_sample`] with explicit Gumbel noise.
pub fn gumbel_softmax_with_noise<T: Scalar>(probs: &[T], noise: &[T], tau: T, hard: bool) -> Result<Vec<T>> {
    if tau <= T::zero() {
        return Err(Error::invalid("gumbel_softmax_sample", "temperature must be positive"));
    }
    if probs.len() != noise.len() || probs.is_empty() {
        return Err(Error::shape("gumbel_softmax_sample", &[probs.len()], &[noise.len()]));
    }
    let floor = T::c(P_FLOOR);
    let logits: Vec<T> = probs.iter().zip(noise).map(|(&p, &n)| (p.max(floor).ln() + n) / tau).collect();
    if hard {
        let k = argmax(&logits);
        Ok((0..probs.len()).map(|i| if i == k { T::one() } else { T::zero() }).collect())
    } else {
        Ok(softmax(&logits))
    }
}

/// Binary entropy in nats, `0·ln 0 = 0`.
pub fn activation_entropy<T: Scalar>(p: &[T]) -> Vec<T> {
    p.iter()
        .map(|&pi| {
            let q = T::one() - pi;
            let a = if pi > T::zero() { -pi * pi.ln() } else { T::zero() };
            let b = if q > T::zero() { -q * q.ln() } else { T::zero() };
            a + b
        })
        .collect()
}
