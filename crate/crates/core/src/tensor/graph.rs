//! Tape-style reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! run its backward rule, so node order is a topological order by
//! construction. `backward` walks the tape once in reverse.

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Square,
    Sqrt,
    Recip,
    Abs,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    NormalCdf,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
        /// Patch matrix of `x`, kept when `w` needs a gradient.
        col: Vec<T>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddChannel {
        a: NodeId,
        c: NodeId,
    },
    MulChannel {
        a: NodeId,
        c: NodeId,
    },
    ChannelMean(NodeId),
    Scale(NodeId, T),
    Offset(NodeId),
    Unary(NodeId, Unary),
    Sum(NodeId),
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SignProbability {
        m: NodeId,
        v: NodeId,
        floor: T,
    },
    BinaryGumbel {
        p: NodeId,
        soft: Vec<T>,
        tau: T,
        floor: T,
    },
    GumbelSoftmax {
        probs: NodeId,
        soft: Vec<T>,
        classes: usize,
        tau: T,
        floor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param_key: Option<usize>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Computation record: executed operations in topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param_key: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf. `key` identifies the parameter in the caller's store.
    pub fn param(&mut self, value: &Tensor<T>, key: usize) -> NodeId {
        let mut v = value.clone();
        v.zero_grad();
        let id = self.push(Tensor::new(v.shape().to_vec(), v.into_data()).unwrap(), Op::Leaf, true);
        self.nodes[id.0].param_key = Some(key);
        id
    }

    /// Differentiable leaf that is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// `(node, key)` for every parameter leaf.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.param_key.map(|k| (NodeId(i), k)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        mk: fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn offset(&mut self, a: NodeId, k: T) -> NodeId {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: NodeId, u: Unary) -> NodeId {
        let f: fn(T) -> T = match u {
            Unary::Neg => |x| -x,
            Unary::Square => |x| x * x,
            Unary::Sqrt => |x| x.max(T::zero()).sqrt(),
            Unary::Recip => |x| x.recip(),
            Unary::Abs => |x| x.abs(),
            Unary::Tanh => |x| x.tanh(),
            Unary::Relu => |x| x.max(T::zero()),
            Unary::Sigmoid => sigmoid,
            Unary::Exp => |x| x.exp(),
            Unary::Log => |x| x.ln(),
            Unary::NormalCdf => |x| x.normal_cdf(),
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, u), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Neg)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }
    /// Square root; negative inputs clamp to zero and the gradient at zero is zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sqrt)
    }
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Recip)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Abs)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Log)
    }
    /// Standard normal CDF, computed through `erf`.
    pub fn normal_cdf(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::NormalCdf)
    }

    /// `x[B,in] · w[out,in]ᵀ`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (b, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); b * out];
        kernels::matmul_a_bt_acc(self.data(x), self.data(w), &mut y, b, inp, out);
        let value = Tensor::new(vec![b, out], y)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Linear { x, w }, rg))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", as_, bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut y = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut y, m, k, n);
        let value = Tensor::new(vec![m, n], y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// 2-D convolution, `x[B,C,H,W]`, `w[O,C,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        if !geom.valid() {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (y, col) = kernels::conv2d_forward(self.data(x), xs[0], self.data(w), ws[0], &geom);
        let value = Tensor::new(vec![xs[0], ws[0], geom.out_height(), geom.out_width()], y)?;
        let rg = self.rg(x) || self.rg(w);
        let col = if self.rg(w) { col } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, geom, col }, rg))
    }

    fn channel_check(&self, op: &'static str, a: NodeId, c: NodeId) -> Result<(usize, usize, usize)> {
        let layout = Tensor::<T>::channel_layout(self.shape(a));
        match layout {
            Some(l) if self.shape(c) == [l.1] => Ok(l),
            _ => Err(Error::shape(op, self.shape(a), self.shape(c))),
        }
    }

    /// `a[B,C,..] + c[C]` broadcast over every axis but the channel axis.
    pub fn add_channel(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (b, ch, r) = self.channel_check("add_channel", a, c)?;
        let cv = self.data(c);
        let mut y = self.data(a).to_vec();
        for bi in 0..b {
            for (ci, &cval) in cv.iter().enumerate().take(ch) {
                let base = (bi * ch + ci) * r;
                y[base..base + r].iter_mut().for_each(|v| *v += cval);
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), y)?;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(value, Op::AddChannel { a, c }, rg))
    }

    /// `a[B,C,..] * c[C]` broadcast over every axis but the channel axis.
    pub fn mul_channel(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (b, ch, r) = self.channel_check("mul_channel", a, c)?;
        let cv = self.data(c);
        let mut y = self.data(a).to_vec();
        for bi in 0..b {
            for (ci, &cval) in cv.iter().enumerate().take(ch) {
                let base = (bi * ch + ci) * r;
                y[base..base + r].iter_mut().for_each(|v| *v *= cval);
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), y)?;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(value, Op::MulChannel { a, c }, rg))
    }

    /// Per-channel mean over batch and spatial axes: `[B,C,..] -> [C]`.
    pub fn channel_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (b, ch, r) = Tensor::<T>::channel_layout(self.shape(a))
            .ok_or_else(|| Error::shape("channel_mean", self.shape(a), &[]))?;
        if b * r == 0 {
            return Err(Error::invalid("channel_mean", "empty batch"));
        }
        let av = self.data(a);
        let inv = T::c(1.0 / (b * r) as f64);
        let mut y = vec![T::zero(); ch];
        for bi in 0..b {
            for (ci, yc) in y.iter_mut().enumerate() {
                let base = (bi * ch + ci) * r;
                *yc += av[base..base + r].iter().copied().sum::<T>();
            }
        }
        y.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![ch], y)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::ChannelMean(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean softmax cross-entropy of `logits[B,K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.data(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[labels[i]];
        }
        loss /= T::c(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// `Φ(m / v)`; where `v < floor` the result is the deterministic sign
    /// probability (1, 0, or ½ at `m = 0`) and carries no gradient.
    pub fn sign_probability(&mut self, m: NodeId, v: NodeId, floor: T) -> Result<NodeId> {
        self.same_shape("sign_probability", m, v)?;
        let half = T::c(0.5);
        let data = self
            .data(m)
            .iter()
            .zip(self.data(v))
            .map(|(&mi, &vi)| {
                if vi < floor {
                    if mi > T::zero() {
                        T::one()
                    } else if mi < T::zero() {
                        T::zero()
                    } else {
                        half
                    }
                } else {
                    (mi / vi).normal_cdf()
                }
            })
            .collect();
        let value = Tensor::new(self.shape(m).to_vec(), data)?;
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(value, Op::SignProbability { m, v, floor }, rg))
    }

    /// Two-class Gumbel-Softmax over `π = [1 − p, p]` returning `ĥ₊ − ĥ₋`.
    ///
    /// `noise` holds one `(g₋, g₊)` pair per element. In hard mode the forward
    /// value is the ±1 argmax and the backward rule is the soft sample's.
    pub fn binary_gumbel(&mut self, p: NodeId, noise: &[(T, T)], tau: T, hard: bool, floor: T) -> Result<NodeId> {
        if tau <= T::zero() {
            return Err(Error::invalid("binary_gumbel", "temperature must be positive"));
        }
        if noise.len() != self.value(p).len() {
            return Err(Error::shape("binary_gumbel", self.shape(p), &[noise.len()]));
        }
        let two = T::c(2.0);
        let mut soft = Vec::with_capacity(noise.len());
        let mut out = Vec::with_capacity(noise.len());
        for (&pi, &(g_minus, g_plus)) in self.data(p).iter().zip(noise) {
            let odds = pi.max(floor) / (T::one() - pi).max(floor);
            let d = (odds.ln() + g_plus - g_minus) / tau;
            // tanh(d/2)
            let s = T::one() - two / (T::one() + d.exp());
            soft.push(s);
            out.push(if hard {
                if d >= T::zero() {
                    T::one()
                } else {
                    -T::one()
                }
            } else {
                s
            });
        }
        let value = Tensor::new(self.shape(p).to_vec(), out)?;
        let rg = self.rg(p);
        Ok(self.push(value, Op::BinaryGumbel { p, soft, tau, floor }, rg))
    }

    /// K-class Gumbel-Softmax over rows of `probs[N,K]` with noise `[N·K]`.
    pub fn gumbel_softmax(&mut self, probs: NodeId, noise: &[T], tau: T, hard: bool, floor: T) -> Result<NodeId> {
        if tau <= T::zero() {
            return Err(Error::invalid("gumbel_softmax", "temperature must be positive"));
        }
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || noise.len() != s[0] * s[1] {
            return Err(Error::shape("gumbel_softmax", &s, &[noise.len()]));
        }
        let (n, k) = (s[0], s[1]);
        let pv = self.data(probs);
        let mut soft = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let logits: Vec<T> = (0..k).map(|j| (pv[i * k + j].max(floor).ln() + noise[i * k + j]) / tau).collect();
            let row = softmax(&logits);
            let arg = argmax(&logits);
            for j in 0..k {
                soft[i * k + j] = row[j];
                out[i * k + j] = if hard {
                    if j == arg {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else {
                    row[j]
                };
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(probs);
        Ok(self.push(value, Op::GumbelSoftmax { probs, soft, classes: k, tau, floor }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backward_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((o, &d), &v)| *o += d * v));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).zip(av).for_each(|((o, &d), &v)| *o += d * v));
            }
            Op::Div(a, b) => {
                let bv = self.data(*b);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * y[i] / bv[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, &d)| *o += d * *k));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
            }
            Op::Unary(a, u) => {
                let x = self.data(*a);
                let (zero, one, half, two) = (T::zero(), T::one(), T::c(0.5), T::c(2.0));
                self.acc(grads, *a, |ga| match u {
                    Unary::Neg => unary_grad(ga, g, x, y, |_, _| -one),
                    Unary::Square => unary_grad(ga, g, x, y, |x, _| two * x),
                    Unary::Sqrt => unary_grad(ga, g, x, y, |_, y| if y > zero { half / y } else { zero }),
                    Unary::Recip => unary_grad(ga, g, x, y, |_, y| -(y * y)),
                    Unary::Abs => unary_grad(ga, g, x, y, |x, _| {
                        if x > zero {
                            one
                        } else if x < zero {
                            -one
                        } else {
                            zero
                        }
                    }),
                    Unary::Tanh => unary_grad(ga, g, x, y, |_, y| one - y * y),
                    Unary::Relu => unary_grad(ga, g, x, y, |x, _| if x > zero { one } else { zero }),
                    Unary::Sigmoid => unary_grad(ga, g, x, y, |_, y| y * (one - y)),
                    Unary::Exp => unary_grad(ga, g, x, y, |_, y| y),
                    Unary::Log => unary_grad(ga, g, x, y, |x, _| x.recip()),
                    Unary::NormalCdf => unary_grad(ga, g, x, y, |x, _| x.normal_pdf()),
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Linear { x, w } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (b, inp, out) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (self.data(*x), self.data(*w));
                self.acc(grads, *x, |gx| kernels::matmul_acc(g, wv, gx, b, out, inp));
                self.acc(grads, *w, |gw| kernels::matmul_at_b_acc(g, xv, gw, b, out, inp));
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| kernels::matmul_a_bt_acc(g, bv, ga, m, n, k));
                self.acc(grads, *b, |gb| kernels::matmul_at_b_acc(av, g, gb, m, k, n));
            }
            Op::Conv2d { x, w, geom, col } => {
                let batch = self.shape(*x)[0];
                let out_ch = self.shape(*w)[0];
                let (xv, wv) = (self.data(*x), self.data(*w));
                let mut gx = self.rg(*x).then(|| take_or_zero(grads, *x, xv.len()));
                let mut gw = self.rg(*w).then(|| take_or_zero(grads, *w, wv.len()));
                kernels::conv2d_backward(col, batch, wv, out_ch, geom, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
            Op::AddChannel { a, c } => {
                let (b, ch, r) = Tensor::<T>::channel_layout(self.shape(*a)).unwrap();
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *c, |gc| {
                    for bi in 0..b {
                        for (ci, o) in gc.iter_mut().enumerate().take(ch) {
                            let base = (bi * ch + ci) * r;
                            *o += g[base..base + r].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::MulChannel { a, c } => {
                let (b, ch, r) = Tensor::<T>::channel_layout(self.shape(*a)).unwrap();
                let (av, cv) = (self.data(*a), self.data(*c));
                self.acc(grads, *a, |ga| {
                    for bi in 0..b {
                        for ci in 0..ch {
                            let base = (bi * ch + ci) * r;
                            for i in base..base + r {
                                ga[i] += g[i] * cv[ci];
                            }
                        }
                    }
                });
                self.acc(grads, *c, |gc| {
                    for bi in 0..b {
                        for (ci, o) in gc.iter_mut().enumerate().take(ch) {
                            let base = (bi * ch + ci) * r;
                            let mut s = T::zero();
                            for i in base..base + r {
                                s += g[i] * av[i];
                            }
                            *o += s;
                        }
                    }
                });
            }
            Op::ChannelMean(a) => {
                let (b, ch, r) = Tensor::<T>::channel_layout(self.shape(*a)).unwrap();
                let inv = T::c(1.0 / (b * r) as f64);
                self.acc(grads, *a, |ga| {
                    for bi in 0..b {
                        for ci in 0..ch {
                            let base = (bi * ch + ci) * r;
                            let d = g[ci] * inv;
                            ga[base..base + r].iter_mut().for_each(|o| *o += d);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::c(labels.len() as f64);
                self.acc(grads, *logits, |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::SignProbability { m, v, floor } => {
                let (mv, vv) = (self.data(*m), self.data(*v));
                let floor = *floor;
                self.acc(grads, *m, |gm| {
                    for i in 0..gm.len() {
                        if vv[i] >= floor {
                            gm[i] += g[i] * (mv[i] / vv[i]).normal_pdf() / vv[i];
                        }
                    }
                });
                self.acc(grads, *v, |gv| {
                    for i in 0..gv.len() {
                        if vv[i] >= floor {
                            let r = mv[i] / vv[i];
                            gv[i] -= g[i] * r.normal_pdf() * r / vv[i];
                        }
                    }
                });
            }
            Op::BinaryGumbel { p, soft, tau, floor } => {
                let pv = self.data(*p);
                let (tau, floor) = (*tau, *floor);
                let half = T::c(0.5);
                self.acc(grads, *p, |gp| {
                    for i in 0..gp.len() {
                        let pi = pv[i];
                        let q = T::one() - pi;
                        let mut dd = T::zero();
                        if pi > floor {
                            dd += pi.recip();
                        }
                        if q > floor {
                            dd += q.recip();
                        }
                        let ds = half * (T::one() - soft[i] * soft[i]);
                        gp[i] += g[i] * ds * dd / tau;
                    }
                });
            }
            Op::GumbelSoftmax { probs, soft, classes, tau, floor } => {
                let k = *classes;
                let pv = self.data(*probs);
                let (tau, floor) = (*tau, *floor);
                self.acc(grads, *probs, |gp| {
                    for i in 0..gp.len() / k {
                        let row = &soft[i * k..(i + 1) * k];
                        let grow = &g[i * k..(i + 1) * k];
                        let dot: T = row.iter().zip(grow).map(|(&s, &d)| s * d).sum();
                        for j in 0..k {
                            let ds = row[j] * (grow[j] - dot);
                            let pj = pv[i * k + j];
                            if pj > floor {
                                gp[i * k + j] += ds / (tau * pj);
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let buf = grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }
}

fn take_or_zero<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, n: usize) -> Vec<T> {
    grads[id.0].take().unwrap_or_else(|| vec![T::zero(); n])
}

/// `ga += g · f(x, y)` elementwise.
#[inline]
fn unary_grad<T: Scalar>(ga: &mut [T], g: &[T], x: &[T], y: &[T], f: impl Fn(T, T) -> T) {
    for (((o, &d), &xv), &yv) in ga.iter_mut().zip(g).zip(x).zip(y) {
        *o += d * f(xv, yv);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &d)| *o += d);
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
