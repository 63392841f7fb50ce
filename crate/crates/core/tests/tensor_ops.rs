//! Forward identities and gradient checks for every differentiable op.

use larnet::tensor::finite_difference_check;
use larnet::{Error, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Gradient check of `build(g, inputs) -> scalar` over all inputs.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let f = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().enumerate().map(|(k, p)| g.param(p, k)).collect();
        let out = build(&mut g, &ids);
        let loss = g.sum(out);
        let grads = g.backward(loss)?;
        let gv = ids
            .iter()
            .zip(ps)
            .map(|(&id, p)| grads.get(id).map(|s| s.to_vec()).unwrap_or(vec![0.0; p.len()]))
            .collect();
        Ok((g.data(loss)[0], gv))
    };
    finite_difference_check(f, &inputs, 1e-6, 1e-6).unwrap()
}

#[test]
fn matmul_identity_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (ai, ei) = (g.constant(a.clone()), g.constant(eye));
    let y = g.matmul(ei, ai).unwrap();
    assert_eq!(g.data(y), a.data());
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let y = g.conv2d(xi, wi, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn identity_elements_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 6], -3.0, 3.0);
    let mut g = Graph::<f64>::new();
    let xi = g.constant(x.clone());
    let zero = g.constant(Tensor::zeros(vec![4, 6]));
    let one = g.constant(Tensor::full(vec![4, 6], 1.0));
    let a = g.add(xi, zero).unwrap();
    let m = g.mul(xi, one).unwrap();
    assert_eq!(g.data(a), x.data());
    assert_eq!(g.data(m), x.data());
}

#[test]
fn tanh_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.tanh(x);
    assert_eq!(g.data(y)[0], 0.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap()[0], 1.0);
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap()[0], 6.0);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let err = check(vec![a, b], |g, ids| {
        let s = g.add(ids[0], ids[1]).unwrap();
        let d = g.sub(s, ids[1]).unwrap();
        let m = g.mul(d, ids[1]).unwrap();
        let q = g.div(m, ids[0]).unwrap();
        let sc = g.scale(q, 0.7);
        let o = g.offset(sc, 0.3);
        let n = g.neg(o);
        let sq = g.square(n);
        let r = g.sqrt(sq);
        let rc = g.recip(r);
        let l = g.ln(rc);
        let e = g.exp(l);
        let t = g.tanh(e);
        let sg = g.sigmoid(t);
        let c = g.normal_cdf(sg);
        let ab = g.abs(c);
        g.relu(ab)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_matmul_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let err = check(vec![x, w, b], |g, ids| {
        let y = g.linear(ids[0], ids[1]).unwrap();
        let z = g.matmul(y, ids[2]).unwrap();
        g.tanh(z)
    });
    assert!(err < 1e-6, "{err}");

    let x = rand_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let err = check(vec![x, w], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], 2, 1).unwrap();
        g.tanh(y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn channel_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    let c1 = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let c2 = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let err = check(vec![x, c1, c2], |g, ids| {
        let a = g.mul_channel(ids[0], ids[1]).unwrap();
        let b = g.add_channel(a, ids[2]).unwrap();
        let t = g.tanh(b);
        let m = g.channel_mean(t).unwrap();
        g.square(m)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn loss_and_sampling_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let err = check(vec![logits], |g, ids| g.softmax_cross_entropy(ids[0], &[0, 2, 1, 2]).unwrap());
    assert!(err < 1e-6, "{err}");

    let m = rand_tensor(&mut rng, &[6], -1.0, 1.0);
    let v = rand_tensor(&mut rng, &[6], 0.3, 2.0);
    let err = check(vec![m, v], |g, ids| g.sign_probability(ids[0], ids[1], 1e-8).unwrap());
    assert!(err < 1e-6, "{err}");

    let p = rand_tensor(&mut rng, &[8], 0.05, 0.95);
    let noise: Vec<(f64, f64)> = (0..8).map(|_| (rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0))).collect();
    let err = check(vec![p.clone()], |g, ids| {
        let h = g.binary_gumbel(ids[0], &noise, 1.2, false, 1e-6).unwrap();
        g.square(h)
    });
    assert!(err < 1e-6, "{err}");

    let probs = rand_tensor(&mut rng, &[3, 4], 0.1, 1.0);
    let noise: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let weights: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let err = check(vec![probs], |g, ids| {
        let s = g.gumbel_softmax(ids[0], &noise, 0.8, false, 1e-6).unwrap();
        let w = g.constant(Tensor::new(vec![3, 4], weights.clone()).unwrap());
        g.mul(s, w).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let id = g.param(&p, 0);
        let sq = g.square(id);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        p.accumulate_grad(grads.get(id).unwrap());
    }
    assert_eq!(p.grad().unwrap(), &[4.0, -8.0]);
    p.zero_grad();
    assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn constant_objective_has_zero_error() {
    let params = vec![Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
    let err = finite_difference_check(|_| Ok((5.0, vec![vec![0.0; 3]])), &params, 1e-6, 1e-12).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn linear_model_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let err = check(vec![w], |g, ids| {
        let xi = g.constant(x.clone());
        g.linear(xi, ids[0]).unwrap()
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w1 = rand_tensor(&mut rng, &[8, 6], -0.8, 0.8);
    let w2 = rand_tensor(&mut rng, &[3, 8], -0.8, 0.8);
    let x = rand_tensor(&mut rng, &[5, 6], -1.0, 1.0);
    let err = check(vec![w1, w2], |g, ids| {
        let xi = g.constant(x.clone());
        let h = g.linear(xi, ids[0]).unwrap();
        let h = g.tanh(h);
        let y = g.linear(h, ids[1]).unwrap();
        g.softmax_cross_entropy(y, &[0, 1, 2, 1, 0]).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}
