//! Per-weight categorical distributions over `{−1, 0, +1}` (or `{−1, +1}`).
//!
//! Ternary weights carry two logits: `l0` gives `p(w = 0) = σ(l0)` and `l1`
//! gives `p(w = +1 | w ≠ 0) = σ(l1)`. Binary weights carry only the sign
//! logit. Probabilities therefore stay strictly inside (0, 1) and the three
//! category probabilities sum to one by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph_sigmoid as sigmoid;
use crate::tensor::{Graph, NodeId, Tensor};

/// Logit magnitude used for point-mass ("hardened") distributions.
pub const HARD_LOGIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Binary,
    Ternary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDistribution<T> {
    mode: WeightMode,
    zero_logits: Option<Tensor<T>>,
    sign_logits: Tensor<T>,
}

/// Mean and variance of each weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Category probabilities `(p(−1), p(0), p(+1))` of each weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProbs<T> {
    pub minus: Vec<T>,
    pub zero: Vec<T>,
    pub plus: Vec<T>,
}

pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

impl<T: Scalar> WeightDistribution<T> {
    pub fn ternary(zero_logits: Tensor<T>, sign_logits: Tensor<T>) -> Result<Self> {
        if zero_logits.shape() != sign_logits.shape() {
            return Err(Error::shape("WeightDistribution::ternary", zero_logits.shape(), sign_logits.shape()));
        }
        Ok(Self { mode: WeightMode::Ternary, zero_logits: Some(zero_logits), sign_logits })
    }

    pub fn binary(sign_logits: Tensor<T>) -> Self {
        Self { mode: WeightMode::Binary, zero_logits: None, sign_logits }
    }

    /// All-zero logits: uniform over the support.
    pub fn uniform(mode: WeightMode, shape: &[usize]) -> Self {
        match mode {
            WeightMode::Ternary => Self {
                mode,
                zero_logits: Some(Tensor::zeros(shape.to_vec())),
                sign_logits: Tensor::zeros(shape.to_vec()),
            },
            WeightMode::Binary => Self::binary(Tensor::zeros(shape.to_vec())),
        }
    }

    /// Builds a ternary distribution from `p(w=0)` and `p(w=+1 | w≠0)`.
    pub fn from_factors(shape: &[usize], p_zero: &[T], p_plus_nonzero: &[T]) -> Result<Self> {
        let l0 = Tensor::new(shape.to_vec(), p_zero.iter().map(|&p| logit(p)).collect())?;
        let l1 = Tensor::new(shape.to_vec(), p_plus_nonzero.iter().map(|&p| logit(p)).collect())?;
        Self::ternary(l0, l1)
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn shape(&self) -> &[usize] {
        self.sign_logits.shape()
    }

    pub fn len(&self) -> usize {
        self.sign_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sign_logits.is_empty()
    }

    pub fn zero_logits(&self) -> Option<&Tensor<T>> {
        self.zero_logits.as_ref()
    }

    pub fn sign_logits(&self) -> &Tensor<T> {
        &self.sign_logits
    }

    /// Trainable logit tensors, zero logits first for ternary weights.
    pub fn logits(&self) -> Vec<&Tensor<T>> {
        self.zero_logits.iter().chain(std::iter::once(&self.sign_logits)).collect()
    }

    /// Distribution that samples exactly `weights` under every seed.
    pub fn point_mass(mode: WeightMode, shape: &[usize], weights: &[i8]) -> Result<Self> {
        let big = T::c(HARD_LOGIT);
        let pick = |on: bool| if on { big } else { -big };
        if let Some(&w) = weights.iter().find(|&&w| !(-1..=1).contains(&w) || (mode == WeightMode::Binary && w == 0)) {
            return Err(Error::invalid("point_mass", format!("weight {w} is outside the {mode:?} alphabet")));
        }
        let sign = Tensor::new(shape.to_vec(), weights.iter().map(|&w| pick(w == 1)).collect())?;
        match mode {
            WeightMode::Ternary => {
                Self::ternary(Tensor::new(shape.to_vec(), weights.iter().map(|&w| pick(w == 0)).collect())?, sign)
            }
            WeightMode::Binary => Ok(Self::binary(sign)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> WeightDistribution<U> {
        WeightDistribution {
            mode: self.mode,
            zero_logits: self.zero_logits.as_ref().map(|t| t.cast()),
            sign_logits: self.sign_logits.cast(),
        }
    }

    pub fn logits_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.zero_logits.iter_mut().chain(std::iter::once(&mut self.sign_logits)).collect()
    }

    fn check_finite(&self) -> Result<()> {
        if self.logits().iter().all(|t| t.all_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("distribution logits".into()))
        }
    }

    pub fn probabilities(&self) -> CategoryProbs<T> {
        let n = self.len();
        let mut out =
            CategoryProbs { minus: Vec::with_capacity(n), zero: Vec::with_capacity(n), plus: Vec::with_capacity(n) };
        for i in 0..n {
            let p0 = self.zero_logits.as_ref().map_or(T::zero(), |l| sigmoid(l.data()[i]));
            let q = sigmoid(self.sign_logits.data()[i]);
            let nz = T::one() - p0;
            out.zero.push(p0);
            out.plus.push(nz * q);
            out.minus.push(nz * (T::one() - q));
        }
        out
    }

    /// `μ = p(+1) − p(−1)`, `σ² = p(+1) + p(−1) − μ²`.
    pub fn moments(&self) -> Result<Moments<T>> {
        self.check_finite()?;
        let n = self.len();
        let mut mean = Vec::with_capacity(n);
        let mut var = Vec::with_capacity(n);
        for i in 0..n {
            let p0 = self.zero_logits.as_ref().map_or(T::zero(), |l| sigmoid(l.data()[i]));
            let nz = T::one() - p0;
            let c = T::c(2.0) * sigmoid(self.sign_logits.data()[i]) - T::one();
            mean.push(nz * c);
            var.push(nz * (T::one() - nz * c * c));
        }
        Ok(Moments { mean: Tensor::new(self.shape().to_vec(), mean)?, var: Tensor::new(self.shape().to_vec(), var)? })
    }

    /// Differentiable moments from logit nodes already placed on `g`
    /// (`zero` is `None` for binary weights). Returns `(μ, σ²)`.
    pub fn moments_on_graph(g: &mut Graph<T>, zero: Option<NodeId>, sign: NodeId) -> Result<(NodeId, NodeId)> {
        let q = g.sigmoid(sign);
        let two_q = g.scale(q, T::c(2.0));
        let c = g.offset(two_q, -T::one());
        match zero {
            Some(z) => {
                let p0 = g.sigmoid(z);
                let neg_p0 = g.neg(p0);
                let nz = g.offset(neg_p0, T::one());
                let mean = g.mul(nz, c)?;
                // σ² = nz·(1 − nz·c²), non-negative under rounding
                let c2 = g.square(c);
                let nz_c2 = g.mul(nz, c2)?;
                let neg = g.neg(nz_c2);
                let rest = g.offset(neg, T::one());
                let var = g.mul(nz, rest)?;
                Ok((mean, var))
            }
            None => {
                let c2 = g.square(c);
                let neg = g.neg(c2);
                let var = g.offset(neg, T::one());
                Ok((c, var))
            }
        }
    }

    /// Point mass at each weight's most probable value.
    pub fn hardened(&self) -> Self {
        let probs = self.probabilities();
        let big = T::c(HARD_LOGIT);
        let n = self.len();
        let mut l0 = Vec::with_capacity(n);
        let mut l1 = Vec::with_capacity(n);
        for i in 0..n {
            let (m, z, p) = (probs.minus[i], probs.zero[i], probs.plus[i]);
            if self.mode == WeightMode::Ternary && z >= m && z >= p {
                l0.push(big);
                l1.push(T::zero());
            } else {
                l0.push(-big);
                l1.push(if p >= m { big } else { -big });
            }
        }
        let shape = self.shape().to_vec();
        match self.mode {
            WeightMode::Ternary => Self {
                mode: self.mode,
                zero_logits: Some(Tensor::new(shape.clone(), l0).unwrap()),
                sign_logits: Tensor::new(shape, l1).unwrap(),
            },
            WeightMode::Binary => Self::binary(Tensor::new(shape, l1).unwrap()),
        }
    }

    /// Independent draws, one per weight: first "is zero", then the sign.
    /// Logits at or beyond ±[`HARD_LOGIT`] are treated as certain, so
    /// hardened distributions sample the same weights under every seed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i8> {
        let hard = T::c(HARD_LOGIT);
        let bernoulli = |logit: T, u: f64| {
            if logit >= hard {
                true
            } else if logit <= -hard {
                false
            } else {
                u < sigmoid(logit.as_f64())
            }
        };
        let zero = self.zero_logits.as_ref().map(Tensor::data);
        (0..self.len())
            .map(|i| {
                let (u0, u1): (f64, f64) = (rng.gen(), rng.gen());
                if zero.is_some_and(|z| bernoulli(z[i], u0)) {
                    0
                } else if bernoulli(self.sign_logits.data()[i], u1) {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }

    /// Shannon entropy (nats) of each weight's categorical.
    pub fn entropy(&self) -> Vec<T> {
        let probs = self.probabilities();
        (0..self.len()).map(|i| categorical_entropy(&[probs.minus[i], probs.zero[i], probs.plus[i]])).collect()
    }

    /// Initializes a ternary distribution from pretrained real weights.
    ///
    /// Weights are divided by their layer-wide standard deviation, then
    /// `p(0) = p_hi − (p_hi − p_lo)|w̃|` and
    /// `p(+1 | ≠0) = ½(1 + w̃ / (1 − p(0)))`, each clipped to `[p_lo, p_hi]`.
    /// The second formula uses the clipped `p(0)`.
    pub fn init_from_pretrained(weights: &Tensor<T>, p_lo: T, p_hi: T) -> Result<Self> {
        if !(T::zero() < p_lo && p_lo < p_hi && p_hi < T::one()) {
            return Err(Error::invalid(
                "init_from_pretrained",
                format!("need 0 < p_lo < p_hi < 1, got {p_lo}, {p_hi}"),
            ));
        }
        if !weights.all_finite() {
            return Err(Error::NonFinite("pretrained weights".into()));
        }
        let n = T::c(weights.len() as f64);
        let mean = weights.data().iter().copied().sum::<T>() / n;
        let var = weights.data().iter().map(|&w| (w - mean) * (w - mean)).sum::<T>() / n;
        let std = var.sqrt();
        if !(std > T::zero()) {
            return Err(Error::invalid("init_from_pretrained", "pretrained layer has zero standard deviation"));
        }
        let mut p0s = Vec::with_capacity(weights.len());
        let mut p1s = Vec::with_capacity(weights.len());
        for &w in weights.data() {
            let (p0, p1) = init_factors(w / std, p_lo, p_hi);
            p0s.push(p0);
            p1s.push(p1);
        }
        Self::from_factors(weights.shape(), &p0s, &p1s)
    }
}

/// `(p(0), p(+1 | ≠0))` for one normalized weight.
pub fn init_factors<T: Scalar>(w: T, p_lo: T, p_hi: T) -> (T, T) {
    let p0 = (p_hi - (p_hi - p_lo) * w.abs()).max(p_lo).min(p_hi);
    let p1 = (T::c(0.5) * (T::one() + w / (T::one() - p0))).max(p_lo).min(p_hi);
    (p0, p1)
}

pub fn categorical_entropy<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|&&v| v > T::zero()).map(|&v| -v * v.ln()).sum()
}

/// `λ·Σ ℓ²` over every logit tensor, added on the graph.
pub fn probability_decay_penalty<T: Scalar>(g: &mut Graph<T>, logits: &[NodeId], lambda: T) -> Result<NodeId> {
    if lambda < T::zero() {
        return Err(Error::invalid("probability_decay_penalty", "λ must be non-negative"));
    }
    let mut total: Option<NodeId> = None;
    for &l in logits {
        let sq = g.square(l);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(g.scale(total, lambda))
}

/// Fraction of exactly-zero entries across all given layers.
pub fn sparsity<'a>(layers: impl IntoIterator<Item = &'a [i8]>) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for l in layers {
        zeros += l.iter().filter(|&&w| w == 0).count();
        total += l.len();
    }
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
