//! Sampled discrete networks.
//!
//! [`DiscreteModel`] is the float reference: real first/last layers, ternary
//! interior weights, batch norm from running statistics and `sign(0) = +1`.
//! [`PackedModel`] runs the same network with bitplanes and popcounts; batch
//! norm is folded into per-channel thresholds found by searching the very
//! `f32` function the reference evaluates, so both paths agree bit for bit.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::WeightDistribution;
use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::model::{Activation, Architecture, LarModel, LayerWeights};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvGeometry};

const WORD: usize = 64;

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD)
}

/// Bit `i` set ⇔ activation `i` is `+1`. Bits past `len` stay zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBinaryVector {
    len: usize,
    words: Vec<u64>,
}

impl PackedBinaryVector {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; words_for(len)] }
    }

    /// `v ≥ 0 → +1`, including `-0.0`.
    pub fn from_signs(values: &[f32]) -> Self {
        let mut out = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                out.set(i);
            }
        }
        out
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut out = Self::zeros(bits.len());
        bits.iter().enumerate().filter(|(_, &b)| b).for_each(|(i, _)| out.set(i));
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / WORD] |= 1 << (i % WORD);
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { -1.0 }).collect()
    }
}

/// Row-wise `+1` and `−1` bitplanes of a ternary matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    plus: Vec<u64>,
    minus: Vec<u64>,
    /// Nonzero weights per row.
    row_nonzeros: Vec<i32>,
}

pub fn pack_ternary(w: &[i8], rows: usize, cols: usize) -> Result<PackedTernaryMatrix> {
    if w.len() != rows * cols {
        return Err(Error::shape("pack_ternary", &[w.len()], &[rows, cols]));
    }
    let stride = words_for(cols);
    let mut plus = vec![0u64; rows * stride];
    let mut minus = vec![0u64; rows * stride];
    for r in 0..rows {
        for c in 0..cols {
            let bit = 1u64 << (c % WORD);
            let at = r * stride + c / WORD;
            match w[r * cols + c] {
                1 => plus[at] |= bit,
                -1 => minus[at] |= bit,
                0 => {}
                v => {
                    return Err(Error::invalid(
                        "pack_ternary",
                        format!("entry {v} at ({r}, {c}) is not in {{-1, 0, 1}}"),
                    ));
                }
            }
        }
    }
    PackedTernaryMatrix::from_planes(rows, cols, plus, minus)
}

impl PackedTernaryMatrix {
    /// Validates plane disjointness and zero tails.
    pub fn from_planes(rows: usize, cols: usize, plus: Vec<u64>, minus: Vec<u64>) -> Result<Self> {
        let stride = words_for(cols);
        if plus.len() != rows * stride || minus.len() != rows * stride {
            return Err(Error::shape("packed planes", &[plus.len(), minus.len()], &[rows, stride]));
        }
        let tail = if cols.is_multiple_of(WORD) { u64::MAX } else { (1u64 << (cols % WORD)) - 1 };
        for r in 0..rows {
            for k in 0..stride {
                let (p, m) = (plus[r * stride + k], minus[r * stride + k]);
                if p & m != 0 {
                    return Err(Error::invalid(
                        "packed planes",
                        format!("row {r} word {k}: a weight is both +1 and -1"),
                    ));
                }
                if k + 1 == stride && (p | m) & !tail != 0 {
                    return Err(Error::invalid("packed planes", format!("row {r}: bits set beyond column {cols}")));
                }
            }
        }
        let row_nonzeros = (0..rows)
            .map(|r| {
                let s = r * stride..(r + 1) * stride;
                (popcount(&plus[s.clone()]) + popcount(&minus[s])) as i32
            })
            .collect();
        Ok(Self { rows, cols, plus, minus, row_nonzeros })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.cols)
    }

    pub fn plus(&self) -> &[u64] {
        &self.plus
    }

    pub fn minus(&self) -> &[u64] {
        &self.minus
    }

    pub fn row_planes(&self, r: usize) -> (&[u64], &[u64]) {
        let s = self.words_per_row();
        (&self.plus[r * s..(r + 1) * s], &self.minus[r * s..(r + 1) * s])
    }

    pub fn unpack(&self) -> Vec<i8> {
        let s = self.words_per_row();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (k, bit) = (r * s + c / WORD, c % WORD);
                out.push(((self.plus[k] >> bit) & 1) as i8 - ((self.minus[k] >> bit) & 1) as i8);
            }
        }
        out
    }

    pub fn nonzeros(&self) -> usize {
        popcount(&self.plus) as usize + popcount(&self.minus) as usize
    }
}

fn popcount(words: &[u64]) -> u32 {
    words.iter().map(|w| w.count_ones()).sum()
}

// For a nonzero weight, `w·a = −1` exactly when its minus bit equals the
// activation bit, so `w·a` summed over a row is `nnz − 2·popcount(N ∧ ¬(M ⊕ A))`
// with `N = P ∨ M`: one popcount per word.

#[inline(always)]
fn mismatch_word(p: u64, m: u64, a: u64) -> u32 {
    ((p | m) & !(m ^ a)).count_ones()
}

#[inline(always)]
fn mismatches_body(p: &[u64], m: &[u64], a: &[u64]) -> u32 {
    let (pc, mc, ac) = (p.chunks_exact(4), m.chunks_exact(4), a.chunks_exact(4));
    let tail: u32 = (pc.remainder().iter().zip(mc.remainder()).zip(ac.remainder()))
        .map(|((&pw, &mw), &aw)| mismatch_word(pw, mw, aw))
        .sum();
    // four independent sums keep the popcounts from serializing
    let mut acc = [0u32; 4];
    for ((p4, m4), a4) in pc.zip(mc).zip(ac) {
        for l in 0..4 {
            acc[l] += mismatch_word(p4[l], m4[l], a4[l]);
        }
    }
    acc.iter().sum::<u32>() + tail
}

/// `(nonzeros, mismatches)` over the lanes set in `v`.
#[inline(always)]
fn masked_body(p: &[u64], m: &[u64], a: &[u64], v: &[u64]) -> (u32, u32) {
    let (mut nz, mut mis) = (0, 0);
    for (((&pw, &mw), &aw), &vw) in p.iter().zip(m).zip(a).zip(v) {
        let n = (pw | mw) & vw;
        nz += n.count_ones();
        mis += (n & !(mw ^ aw)).count_ones();
    }
    (nz, mis)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn mismatches_popcnt(p: &[u64], m: &[u64], a: &[u64]) -> u32 {
    mismatches_body(p, m, a)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn masked_popcnt(p: &[u64], m: &[u64], a: &[u64], v: &[u64]) -> (u32, u32) {
    masked_body(p, m, a, v)
}

#[cfg(target_arch = "x86_64")]
fn has_popcnt() -> bool {
    std::arch::is_x86_feature_detected!("popcnt")
}

#[inline]
fn mismatches(p: &[u64], m: &[u64], a: &[u64]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        if has_popcnt() {
            // SAFETY: the CPU supports popcnt.
            return unsafe { mismatches_popcnt(p, m, a) };
        }
    }
    mismatches_body(p, m, a)
}

/// Integer dot product of ternary row `row` with ±1 activations.
pub fn ternary_dot(w: &PackedTernaryMatrix, row: usize, a: &PackedBinaryVector) -> Result<i32> {
    if a.len() != w.cols() || row >= w.rows() {
        return Err(Error::shape("ternary_dot", &[w.rows(), w.cols()], &[row, a.len()]));
    }
    let (p, m) = w.row_planes(row);
    Ok(w.row_nonzeros[row] - 2 * mismatches(p, m, a.words()) as i32)
}

/// Like [`ternary_dot`] but only lanes set in `valid` count (padding taps).
fn ternary_dot_masked(p: &[u64], m: &[u64], a: &[u64], valid: &[u64]) -> i32 {
    #[cfg(target_arch = "x86_64")]
    let (nz, mis) = if has_popcnt() {
        // SAFETY: the CPU supports popcnt.
        unsafe { masked_popcnt(p, m, a, valid) }
    } else {
        masked_body(p, m, a, valid)
    };
    #[cfg(not(target_arch = "x86_64"))]
    let (nz, mis) = masked_body(p, m, a, valid);
    nz as i32 - 2 * mis as i32
}

/// Per-channel `((z + bias) − mean)·scale + beta` in `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub bias: f32,
    pub mean: f32,
    pub scale: f32,
    pub beta: f32,
}

impl ChannelAffine {
    pub const IDENTITY: Self = Self { bias: 0.0, mean: 0.0, scale: 1.0, beta: 0.0 };

    #[inline]
    pub fn apply(&self, z: f32) -> f32 {
        ((z + self.bias) - self.mean) * self.scale + self.beta
    }
}

/// Sign decision of one channel: `+1` iff `z ≥ threshold` (or `z ≤ threshold` when flipped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldedThreshold {
    pub threshold: f64,
    pub flip: bool,
}

impl FoldedThreshold {
    #[inline]
    pub fn fires(&self, z: f64) -> bool {
        if self.flip {
            z <= self.threshold
        } else {
            z >= self.threshold
        }
    }

    /// `sign(γ(z − μ)/σ' + β) = flip · sign(z − t)` with `t = μ − βσ'/γ`, `flip = γ < 0`.
    pub fn analytic(gamma: f64, beta: f64, mean: f64, sigma: f64) -> Result<Self> {
        if gamma == 0.0 || !(sigma > 0.0) {
            return Err(Error::invalid("fold_batchnorm", "γ must be non-zero and σ' positive"));
        }
        Ok(Self { threshold: mean - beta * sigma / gamma, flip: gamma < 0.0 })
    }
}

/// Values the pre-activation can take.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FoldDomain {
    /// Integers in `[-bound, bound]`.
    Integer { bound: i64 },
    /// Any finite `f32`.
    Float,
}

/// Monotone integer key of a finite `f32`; `±0` share key 0.
fn float_key(f: f32) -> i64 {
    let b = f.to_bits();
    if b & 0x8000_0000 != 0 {
        -i64::from(b & 0x7fff_ffff)
    } else {
        i64::from(b)
    }
}

fn key_float(k: i64) -> f32 {
    if k < 0 {
        f32::from_bits((-k) as u32 | 0x8000_0000)
    } else {
        f32::from_bits(k as u32)
    }
}

/// Exact threshold of `affine.apply(z) + residual ≥ 0` over `domain`.
///
/// The rounded affine map is monotone in `z`, so the firing set is a
/// half-line; binary search finds its end point. A constant channel
/// (e.g. `γ = 0`) gets a threshold outside the domain.
pub fn fold_batchnorm(affine: &ChannelAffine, domain: FoldDomain, residual: f32) -> FoldedThreshold {
    let (lo, hi, to_f32): (i64, i64, fn(i64) -> f32) = match domain {
        FoldDomain::Integer { bound } => (-bound, bound, |k| k as f32),
        FoldDomain::Float => (float_key(f32::MIN), float_key(f32::MAX), key_float),
    };
    let fires = |k: i64| affine.apply(to_f32(k)) + residual >= 0.0;
    let to_f64 = |k: i64| f64::from(to_f32(k));
    let (at_lo, at_hi) = (fires(lo), fires(hi));
    if at_lo == at_hi {
        if affine.scale != 0.0 {
            log::debug!("channel sign is constant over the input range");
        } else {
            log::warn!("γ = 0: channel emits the constant sign of β");
        }
        // beyond the domain on the side that keeps the constant answer
        let threshold = if at_lo { -f64::MAX } else { f64::MAX };
        return FoldedThreshold { threshold, flip: false };
    }
    // first key where the answer differs from `at_lo`
    let (mut a, mut b) = (lo, hi);
    while b - a > 1 {
        let mid = a + (b - a) / 2;
        if fires(mid) == at_lo {
            a = mid;
        } else {
            b = mid;
        }
    }
    if at_hi {
        FoldedThreshold { threshold: to_f64(b), flip: false }
    } else {
        FoldedThreshold { threshold: to_f64(a), flip: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteWeights {
    Real(Vec<f32>),
    Ternary(Vec<i8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLayer {
    pub weights: DiscreteWeights,
    pub affine: Vec<ChannelAffine>,
}

/// One sampled network.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub arch: Architecture,
    pub layers: Vec<DiscreteLayer>,
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Binarized activations (`true` = +1) of every sign layer, in order.
    pub binary: Vec<Vec<bool>>,
    pub scores: Vec<f32>,
}

impl InferenceTrace {
    pub fn prediction(&self) -> usize {
        argmax_f32(&self.scores)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn affine_for<T: Scalar>(
    layer: &crate::model::LayerParams<T>,
    channels: usize,
    what: &str,
) -> Result<Vec<ChannelAffine>> {
    let mut out = vec![ChannelAffine::IDENTITY; channels];
    if let Some(b) = &layer.bias {
        for (a, &v) in out.iter_mut().zip(b.data()) {
            a.bias = v.as_f64() as f32;
        }
    }
    if let Some(bn) = &layer.bn {
        if bn.tracked == 0 {
            return Err(Error::invalid("sample", format!("{what}: batch norm has no running statistics")));
        }
        let eps = bn.eps.as_f64() as f32;
        for (c, a) in out.iter_mut().enumerate() {
            let var = bn.running_var[c].as_f64() as f32;
            a.mean = bn.running_mean[c].as_f64() as f32;
            a.scale = bn.gamma.data()[c].as_f64() as f32 / (var + eps).sqrt();
            a.beta = bn.beta.data()[c].as_f64() as f32;
        }
    }
    Ok(out)
}

impl DiscreteModel {
    /// Draws one weight sample; layer `i` uses stream `(seed, i)`.
    pub fn sample<T: Scalar>(model: &LarModel<T>, seed: u64) -> Result<Self> {
        model.arch.validate()?;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, (spec, layer)) in model.arch.layers.iter().zip(&model.layers).enumerate() {
            let weights = match (&layer.weights, spec.weights.discrete_mode()) {
                (LayerWeights::Distribution(d), Some(_)) => {
                    DiscreteWeights::Ternary(d.sample(&mut rng::stream_for(&[seed, i as u64])))
                }
                (LayerWeights::Real(w), None) => {
                    DiscreteWeights::Real(w.data().iter().map(|v| v.as_f64() as f32).collect())
                }
                _ => {
                    return Err(Error::invalid(
                        "sample",
                        format!("layer {i}: weights do not match the architecture (initialize distributions first)"),
                    ));
                }
            };
            layers.push(DiscreteLayer {
                weights,
                affine: affine_for(layer, spec.kind.out_channels(), &format!("layer {i}"))?,
            });
        }
        Ok(Self { arch: model.arch.clone(), layers })
    }

    /// `template` with every distribution pinned to this sample's weights.
    pub fn point_mass<T: Scalar>(&self, template: &LarModel<T>) -> Result<LarModel<T>> {
        let mut out = template.clone();
        for (i, (layer, ours)) in out.layers.iter_mut().zip(&self.layers).enumerate() {
            match (&mut layer.weights, &ours.weights) {
                (LayerWeights::Distribution(d), DiscreteWeights::Ternary(w)) => {
                    *d = WeightDistribution::point_mass(d.mode(), d.shape(), w)?;
                }
                (LayerWeights::Real(_), DiscreteWeights::Real(_)) => {}
                _ => return Err(Error::invalid("point_mass", format!("layer {i} does not match the template"))),
            }
        }
        Ok(out)
    }

    pub fn ternary_weights(&self) -> Vec<&[i8]> {
        self.layers
            .iter()
            .filter_map(|l| match &l.weights {
                DiscreteWeights::Ternary(w) => Some(w.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Fraction of zero weights over all ternary layers.
    pub fn sparsity(&self) -> f64 {
        crate::distributions::sparsity(self.ternary_weights())
    }
}

fn geometry(kind: &LayerKind, shape: &[usize]) -> Option<(ConvGeometry, usize)> {
    match *kind {
        LayerKind::Conv2d { out_channels, kernel, stride, padding, .. } => Some((
            ConvGeometry {
                in_channels: shape[0],
                height: shape[1],
                width: shape[2],
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            },
            out_channels,
        )),
        LayerKind::Linear { .. } => None,
    }
}

/// Dense `f32` layer on one example: the float dot of both paths.
fn real_layer(kind: &LayerKind, shape: &[usize], w: &[f32], x: &[f32]) -> Vec<f32> {
    match geometry(kind, shape) {
        Some((g, out)) => kernels::conv2d_forward(x, 1, w, out, &g).0,
        None => w.chunks_exact(x.len()).map(|row| float_dot(row, x)).collect(),
    }
}

/// Channel of flat output index `i`.
fn channel_of(out_shape: &[usize], i: usize) -> usize {
    match out_shape {
        [_, h, w] => i / (h * w),
        _ => i,
    }
}

/// Floating-point evaluation of a sampled network on one example.
pub fn reference_forward(model: &DiscreteModel, x: &[f32]) -> Result<InferenceTrace> {
    let shapes = model.arch.validate()?;
    let n: usize = model.arch.input_shape.iter().product();
    if x.len() != n {
        return Err(Error::shape("reference_forward", &[x.len()], &model.arch.input_shape));
    }
    let mut h = x.to_vec();
    let mut binary = Vec::new();
    for ((spec, layer), shape) in model.arch.layers.iter().zip(&model.layers).zip(&shapes) {
        let out_shape = spec.kind.output_shape(shape)?;
        let z = match &layer.weights {
            DiscreteWeights::Real(w) => real_layer(&spec.kind, shape, w, &h),
            DiscreteWeights::Ternary(w) => {
                let wf: Vec<f32> = w.iter().map(|&v| f32::from(v)).collect();
                real_layer(&spec.kind, shape, &wf, &h)
            }
        };
        let y: Vec<f32> = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| {
                let v = layer.affine[channel_of(&out_shape, i)].apply(zi);
                if spec.residual {
                    v + h[i]
                } else {
                    v
                }
            })
            .collect();
        match spec.activation {
            Activation::Identity => {
                return Ok(InferenceTrace { binary, scores: y });
            }
            Activation::Sign => {
                let bits: Vec<bool> = y.iter().map(|&v| v >= 0.0).collect();
                h = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
                binary.push(bits);
            }
        }
    }
    Err(Error::invalid("reference_forward", "architecture has no output layer"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PackedWeights {
    Real(Vec<f32>),
    Ternary(PackedTernaryMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PackedOutput {
    Scores(Vec<ChannelAffine>),
    Sign(Vec<FoldedThreshold>),
    /// Thresholds for input bit 0 (`h = −1`) and bit 1 (`h = +1`).
    ResidualSign(Vec<FoldedThreshold>, Vec<FoldedThreshold>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub weights: PackedWeights,
    pub output: PackedOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub arch: Architecture,
    pub layers: Vec<PackedLayer>,
}

impl PackedModel {
    /// Packs ternary planes and folds every sign layer's affine map.
    pub fn from_discrete(model: &DiscreteModel) -> Result<Self> {
        model.arch.validate()?;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, (spec, layer)) in model.arch.layers.iter().zip(&model.layers).enumerate() {
            let channels = spec.kind.out_channels();
            let fan_in = spec.kind.fan_in();
            let (weights, domain) = match &layer.weights {
                DiscreteWeights::Real(w) => (PackedWeights::Real(w.clone()), FoldDomain::Float),
                DiscreteWeights::Ternary(w) => {
                    if i == 0 {
                        return Err(Error::invalid("pack", "the first layer must keep real weights"));
                    }
                    (
                        PackedWeights::Ternary(pack_ternary(w, channels, fan_in)?),
                        FoldDomain::Integer { bound: fan_in as i64 },
                    )
                }
            };
            let fold = |r: f32| layer.affine.iter().map(|a| fold_batchnorm(a, domain, r)).collect::<Vec<_>>();
            let output = match (spec.activation, spec.residual) {
                (Activation::Identity, false) => PackedOutput::Scores(layer.affine.clone()),
                (Activation::Sign, false) => PackedOutput::Sign(fold(0.0)),
                (Activation::Sign, true) if i > 0 => PackedOutput::ResidualSign(fold(-1.0), fold(1.0)),
                _ => {
                    return Err(Error::invalid(
                        "pack",
                        format!("layer {i}: unsupported activation/residual combination"),
                    ));
                }
            };
            layers.push(PackedLayer { weights, output });
        }
        Ok(Self { arch: model.arch.clone(), layers })
    }

    pub fn ternary_weights(&self) -> Vec<Vec<i8>> {
        self.layers
            .iter()
            .filter_map(|l| match &l.weights {
                PackedWeights::Ternary(m) => Some(m.unpack()),
                _ => None,
            })
            .collect()
    }
}

enum Act {
    Float(Vec<f32>),
    Bits(PackedBinaryVector),
}

/// Integer pre-activations of a packed conv: im2row over packed bits.
fn packed_conv(m: &PackedTernaryMatrix, g: &ConvGeometry, a: &PackedBinaryVector) -> Vec<i32> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.patch_len();
    let out = m.rows();
    let mut z = vec![0i32; out * ho * wo];
    let mut patch = PackedBinaryVector::zeros(k);
    let mut valid = PackedBinaryVector::zeros(k);
    for oy in 0..ho {
        for ox in 0..wo {
            patch.words.iter_mut().for_each(|w| *w = 0);
            valid.words.iter_mut().for_each(|w| *w = 0);
            let (mut j, mut taps) = (0, 0);
            for c in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            valid.set(j);
                            taps += 1;
                            if a.get((c * g.height + y) * g.width + x) {
                                patch.set(j);
                            }
                        }
                        j += 1;
                    }
                }
            }
            let interior = taps == k;
            for o in 0..out {
                let (p, mm) = m.row_planes(o);
                z[o * ho * wo + oy * wo + ox] = if interior {
                    m.row_nonzeros[o] - 2 * mismatches(p, mm, patch.words()) as i32
                } else {
                    ternary_dot_masked(p, mm, patch.words(), valid.words())
                };
            }
        }
    }
    z
}

/// Bit-packed evaluation of one example.
pub fn packed_forward(model: &PackedModel, x: &[f32]) -> Result<InferenceTrace> {
    let shapes = model.arch.validate()?;
    let n: usize = model.arch.input_shape.iter().product();
    if x.len() != n {
        return Err(Error::shape("packed_forward", &[x.len()], &model.arch.input_shape));
    }
    let mut act = Act::Float(x.to_vec());
    let mut binary = Vec::new();
    for ((spec, layer), shape) in model.arch.layers.iter().zip(&model.layers).zip(&shapes) {
        let out_shape = spec.kind.output_shape(shape)?;
        // pre-activations, integer-valued for ternary layers
        let z: Vec<f64> = match (&layer.weights, &act) {
            (PackedWeights::Real(w), Act::Float(h)) => {
                real_layer(&spec.kind, shape, w, h).into_iter().map(f64::from).collect()
            }
            (PackedWeights::Real(w), Act::Bits(b)) => {
                real_layer(&spec.kind, shape, w, &b.to_signs()).into_iter().map(f64::from).collect()
            }
            (PackedWeights::Ternary(m), Act::Bits(b)) => {
                let zi = match geometry(&spec.kind, shape) {
                    Some((g, _)) => packed_conv(m, &g, b),
                    None => (0..m.rows()).map(|r| ternary_dot(m, r, b)).collect::<Result<Vec<_>>>()?,
                };
                zi.into_iter().map(f64::from).collect()
            }
            (PackedWeights::Ternary(_), Act::Float(_)) => {
                return Err(Error::invalid("packed_forward", "ternary layer needs binary input"));
            }
        };
        let len = z.len();
        match &layer.output {
            PackedOutput::Scores(affine) => {
                let scores =
                    z.iter().enumerate().map(|(i, &v)| affine[channel_of(&out_shape, i)].apply(v as f32)).collect();
                return Ok(InferenceTrace { binary, scores });
            }
            PackedOutput::Sign(t) => {
                let mut bits = PackedBinaryVector::zeros(len);
                for (i, &v) in z.iter().enumerate() {
                    if t[channel_of(&out_shape, i)].fires(v) {
                        bits.set(i);
                    }
                }
                binary.push(bits.to_bits());
                act = Act::Bits(bits);
            }
            PackedOutput::ResidualSign(neg, pos) => {
                let Act::Bits(input) = &act else {
                    return Err(Error::invalid("packed_forward", "residual layer needs binary input"));
                };
                let mut bits = PackedBinaryVector::zeros(len);
                for (i, &v) in z.iter().enumerate() {
                    let c = channel_of(&out_shape, i);
                    let t = if input.get(i) { &pos[c] } else { &neg[c] };
                    if t.fires(v) {
                        bits.set(i);
                    }
                }
                binary.push(bits.to_bits());
                act = Act::Bits(bits);
            }
        }
    }
    Err(Error::invalid("packed_forward", "architecture has no output layer"))
}

/// Evaluation path of [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Reference,
    Packed,
}

pub enum InferenceModel<'a> {
    Reference(&'a DiscreteModel),
    Packed(&'a PackedModel),
}

impl InferenceModel<'_> {
    pub fn mode(&self) -> EvalMode {
        match self {
            InferenceModel::Reference(_) => EvalMode::Reference,
            InferenceModel::Packed(_) => EvalMode::Packed,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Result<InferenceTrace> {
        match self {
            InferenceModel::Reference(m) => reference_forward(m, x),
            InferenceModel::Packed(m) => packed_forward(m, x),
        }
    }

    fn arch(&self) -> &Architecture {
        match self {
            InferenceModel::Reference(m) => &m.arch,
            InferenceModel::Packed(m) => &m.arch,
        }
    }
}

/// Top-1 accuracy, no augmentation.
pub fn evaluate(model: &InferenceModel<'_>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    if data.shape[..] != model.arch().input_shape[..] {
        return Err(Error::shape("evaluate", &data.shape, &model.arch().input_shape));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        correct += usize::from(model.forward(data.image(i))?.prediction() == data.labels[i]);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Result of [`best_of_k`].
#[derive(Debug, Clone)]
pub struct BestOfK {
    pub model: DiscreteModel,
    pub index: usize,
    /// Accuracy of every sample in draw order.
    pub accuracies: Vec<f64>,
    /// Seed that reproduces the chosen sample through [`DiscreteModel::sample`].
    pub seed: u64,
}

pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(&[seed, 0x5a3, index as u64])
}

/// Samples `k` networks and keeps the most accurate on `data` (ties → lowest index).
pub fn best_of_k<T: Scalar>(model: &LarModel<T>, k: usize, data: &Dataset, seed: u64) -> Result<BestOfK> {
    if k == 0 {
        return Err(Error::invalid("best_of_k", "k must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("best_of_k", "empty validation set"));
    }
    let mut best: Option<(DiscreteModel, usize, f64)> = None;
    let mut accuracies = Vec::with_capacity(k);
    for i in 0..k {
        let m = DiscreteModel::sample(model, sample_seed(seed, i))?;
        let acc = evaluate(&InferenceModel::Reference(&m), data)?;
        accuracies.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((m, i, acc));
        }
    }
    let (model, index, _) = best.expect("k ≥ 1");
    Ok(BestOfK { model, index, accuracies, seed: sample_seed(seed, index) })
}

/// One benchmark line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    pub length: usize,
    pub ns_per_call: f64,
    /// Float-dot time over this op's time.
    pub speedup: f64,
}

/// The reference path's `f32` dot product, accumulated in eight lanes.
pub fn float_dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn time_per_call(budget: Duration, mut f: impl FnMut()) -> f64 {
    let mut reps = 1u64;
    loop {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        let e = t.elapsed();
        if e >= budget || reps >= 1 << 30 {
            return e.as_nanos() as f64 / reps as f64;
        }
        reps *= 2;
    }
}

const BENCH_ROUNDS: u32 = 5;

/// Times `ternary_dot` against [`float_dot`] at `length`; each gets `budget`.
pub fn bench_dot(length: usize, budget: Duration, seed: u64) -> Result<Vec<BenchRecord>> {
    use rand::Rng;
    let mut r = rng::stream(seed);
    let w: Vec<i8> = (0..length).map(|_| r.gen_range(-1..=1)).collect();
    let a: Vec<f32> = (0..length).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let packed = pack_ternary(&w, 1, length)?;
    let bits = PackedBinaryVector::from_signs(&a);
    let wf: Vec<f32> = w.iter().map(|&v| f32::from(v)).collect();
    // interleaved rounds, fastest of each, so a burst of load hits both sides alike
    let slice = budget / BENCH_ROUNDS;
    let (mut float_ns, mut packed_ns) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..BENCH_ROUNDS {
        float_ns = float_ns.min(time_per_call(slice, || {
            black_box(float_dot(black_box(&wf), black_box(&a)));
        }));
        packed_ns = packed_ns.min(time_per_call(slice, || {
            black_box(ternary_dot(black_box(&packed), 0, black_box(&bits)).unwrap_or(0));
        }));
    }
    Ok(vec![
        BenchRecord { op: "float_dot".into(), length, ns_per_call: float_ns, speedup: 1.0 },
        BenchRecord { op: "ternary_dot".into(), length, ns_per_call: packed_ns, speedup: float_ns / packed_ns },
    ])
}
