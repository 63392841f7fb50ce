//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `LARNET_ACCEPTANCE=1,5,9` runs a subset. The MNIST criteria read IDX
//! files from `LARNET_MNIST_DIR` (default `<workspace>/data/mnist`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use larnet::data::{load_mnist_dir, normalize_splits, synthetic_blobs, Dataset, NormMode};
use larnet::distributions::WeightDistribution;
use larnet::inference::*;
use larnet::layers::LayerKind;
use larnet::layers::{
    binary_activation, dist_batch_norm, gumbel_softmax_sample, gumbel_softmax_with_noise, BatchNormState,
};
use larnet::model::*;
use larnet::model_io::*;
use larnet::tensor::finite_difference_check;
use larnet::trainer::*;
use larnet::{rng, Graph, Scalar, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + Scalar::erf(x / std::f64::consts::SQRT_2))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// `|got − want| ≤ tol · max(|want|, scale)`; `scale` stands in for a mean near zero.
fn within(got: f64, want: f64, scale: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(scale)
}

// 1. Gradient correctness ---------------------------------------------------

fn gradient_model() -> LarModel<f64> {
    let arch = Architecture {
        input_shape: vec![1, 5, 8],
        num_classes: 10,
        layers: vec![
            LayerSpec {
                kind: LayerKind::Linear { in_features: 40, out_features: 24 },
                weights: WeightKind::Ternary,
                batch_norm: true,
                bias: false,
                activation: Activation::Sign,
                residual: false,
            },
            LayerSpec {
                kind: LayerKind::Linear { in_features: 24, out_features: 10 },
                weights: WeightKind::FullPrecision,
                batch_norm: false,
                bias: true,
                activation: Activation::Identity,
                residual: false,
            },
        ],
        sign_noise: 1.0,
    };
    let mut m = LarModel::<f64>::new_pretrain(arch, 11)
        .unwrap()
        .init_distributions(0.05, 0.95)
        .unwrap()
        .with_stage(Stage::Lar)
        .unwrap();
    let mut r = rng::stream(12);
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
    m
}

fn criterion_1() -> Outcome {
    let model = gradient_model();
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(t, _)| (*t).clone()).collect();
    let count: usize = params.iter().map(Tensor::len).sum();
    let mut r = rng::stream(13);
    let batch = 8;
    let x = Tensor::from_fn(vec![batch, 1, 5, 8], |_| rng::normal::<f64, _>(&mut r));
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let cfg = TrainConfig { mc_samples: 2, hard: false, prob_decay: 1e-3, ..Default::default() };
    let objective = |ps: &[Tensor<f64>]| {
        let mut m = model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let mut g = Graph::new();
        let out = mc_loss(&mut m, &mut g, &x, &labels, &cfg, 99)?;
        let grads = g.backward(out.loss)?;
        m.zero_grad();
        m.accumulate_grads(&g, &grads, 1.0);
        let analytic = m.params().iter().map(|(t, _)| t.grad().map_or(vec![0.0; t.len()], <[f64]>::to_vec)).collect();
        Ok((g.value(out.loss).item(), analytic))
    };
    let err = finite_difference_check(objective, &params, 1e-6, 1e-6).map_err(|e| e.to_string())?;
    check(count >= 1000 && err < 1e-4, format!("{count} parameters, max relative error {err:.2e} (< 1e-4)"))
}

// 2. CLT fidelity -----------------------------------------------------------

fn criterion_2() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut r = rng::stream(21);
    let (mut worst_p, mut worst_split, mut worst_mean, mut worst_std) = (0f64, 0f64, 0f64, 0f64);
    let mut ok = true;
    for fan_in in [256usize, 1024] {
        for _ in 0..20 {
            let p_zero: Vec<f64> = (0..fan_in).map(|_| r.gen_range(0.05..0.95)).collect();
            let p_plus: Vec<f64> = (0..fan_in).map(|_| r.gen_range(0.0..1.0)).collect();
            let d = WeightDistribution::from_factors(&[fan_in], &p_zero, &p_plus).map_err(|e| e.to_string())?;
            let h: Vec<i32> = (0..fan_in).map(|_| if r.gen::<bool>() { 1 } else { -1 }).collect();
            let mom = d.moments().map_err(|e| e.to_string())?;
            let m: f64 = mom.mean.data().iter().zip(&h).map(|(mu, &hi)| mu * f64::from(hi)).sum();
            let v = mom.var.data().iter().sum::<f64>().sqrt();
            let (mut positive, mut zero) = (0usize, 0usize);
            let mut zs = Vec::with_capacity(SAMPLES);
            for _ in 0..SAMPLES {
                let w = d.sample(&mut r);
                let z: i32 = w.iter().zip(&h).map(|(&wi, &hi)| i32::from(wi) * hi).sum();
                positive += usize::from(z > 0);
                zero += usize::from(z == 0);
                zs.push(f64::from(z));
            }
            let p_emp = positive as f64 / SAMPLES as f64;
            let target = phi(m / v);
            let (em, es) = mean_std(&zs);
            worst_p = worst_p.max((p_emp - target).abs());
            worst_split = worst_split.max((p_emp + 0.5 * zero as f64 / SAMPLES as f64 - target).abs());
            worst_mean = worst_mean.max((em - m).abs() / m.abs().max(v));
            worst_std = worst_std.max((es - v).abs() / v);
            ok &= (p_emp - target).abs() < 0.01 && within(em, m, v, 0.02) && within(es, v, 0.0, 0.02);
        }
    }
    check(
        ok,
        format!(
            "max |P(z>0) - Phi(m/v)| {worst_p:.4} (< 0.01), mean err {worst_mean:.4}, std err {worst_std:.4} (< 0.02); \
             with ties split, max |P(z>0) + P(z=0)/2 - Phi(m/v)| {worst_split:.4}"
        ),
    )
}

// 3. Gumbel-Softmax ---------------------------------------------------------

fn criterion_3() -> Outcome {
    const DRAWS: usize = 100_000;
    let mut r = rng::stream(31);
    let mut worst = 0f64;
    for pi in [[0.5, 0.5], [0.2, 0.8], [0.99, 0.01]] {
        let mut counts = [0usize; 2];
        for _ in 0..DRAWS {
            let y = gumbel_softmax_sample(&pi, 1.2, true, &mut r).map_err(|e| e.to_string())?;
            counts[usize::from(y[1] == 1.0)] += 1;
        }
        for k in 0..2 {
            worst = worst.max((counts[k] as f64 / DRAWS as f64 - pi[k]).abs());
        }
    }
    // the two-class draw the network uses, with p = P(+1)
    for p in [0.5, 0.8, 0.01] {
        let mut g = Graph::<f64>::new();
        let pn = g.constant(Tensor::full(vec![DRAWS], p));
        let h = binary_activation(&mut g, pn, 1.2, true, &mut r).map_err(|e| e.to_string())?;
        let plus = g.data(h).iter().filter(|&&v| v == 1.0).count();
        worst = worst.max((plus as f64 / DRAWS as f64 - p).abs());
    }
    let taus = [1.2, 0.5, 0.1, 0.01];
    let mut gaps = [0f64; 4];
    let mut per_draw = true;
    for _ in 0..1000 {
        let p0: f64 = r.gen_range(0.01..0.99);
        let probs = [p0, 1.0 - p0];
        let noise: Vec<f64> = (0..2).map(|_| rng::gumbel(&mut r)).collect();
        let hard = gumbel_softmax_with_noise(&probs, &noise, 1.0, true).map_err(|e| e.to_string())?;
        let mut prev = f64::INFINITY;
        for (i, &tau) in taus.iter().enumerate() {
            let soft = gumbel_softmax_with_noise(&probs, &noise, tau, false).map_err(|e| e.to_string())?;
            let gap: f64 = soft.iter().zip(&hard).map(|(s, h)| (s - h).abs()).sum();
            per_draw &= gap <= prev;
            prev = gap;
            gaps[i] += gap / 1000.0;
        }
    }
    let shrinking = gaps.windows(2).all(|w| w[1] < w[0]);
    check(
        worst <= 0.01 && shrinking && per_draw,
        format!("max frequency error {worst:.4} (<= 0.01); mean soft-hard L1 gap at tau {taus:?}: {gaps:.4?}"),
    )
}

// 4. Distributional batch norm ----------------------------------------------

fn criterion_4() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut r = rng::stream(41);
    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for b in [1usize, 2, 8, 32] {
        let m = (0..b).map(|_| r.gen_range(-3.0..3.0)).collect();
        let v = (0..b).map(|_| r.gen_range(0.1..2.0)).collect();
        cases.push((m, v));
    }
    cases.push((vec![1.5; 6], vec![0.0; 6]));
    cases.push((vec![-0.5, 2.0, 0.3], vec![0.0; 3]));
    cases.push((vec![0.7, 0.7, -1.0, 4.0], vec![1.0, 0.0, 0.5, 0.0]));
    cases.push((vec![2.0], vec![0.0]));
    let mut worst = 0f64;
    let mut ok = true;
    for (means, stds) in &cases {
        let b = means.len();
        let mut bn = BatchNormState::<f64>::new(1);
        bn.gamma.data_mut()[0] = r.gen_range(-2.0..2.0);
        bn.beta.data_mut()[0] = r.gen_range(-1.0..1.0);
        let (gamma, beta) = (bn.gamma.data()[0], bn.beta.data()[0]);
        let mut g = Graph::new();
        let mn = g.constant(Tensor::new(vec![b, 1], means.clone()).unwrap());
        let sn = g.constant(Tensor::new(vec![b, 1], stds.clone()).unwrap());
        let gn = g.constant(bn.gamma.clone());
        let bt = g.constant(bn.beta.clone());
        let (om, os) = dist_batch_norm(&mut g, mn, Some(sn), &mut bn, gn, bt, true).map_err(|e| e.to_string())?;
        let (out_m, out_s) = (g.data(om).to_vec(), g.data(os.expect("std")).to_vec());

        // Monte Carlo: pooled batch statistics, then scalar batch norm per sample
        let draws: Vec<Vec<f64>> = means
            .iter()
            .zip(stds)
            .map(|(&m, &s)| (0..SAMPLES).map(|_| m + s * rng::normal::<f64, _>(&mut r)).collect())
            .collect();
        let pooled: Vec<f64> = draws.iter().flatten().copied().collect();
        let (mu_b, sd_b) = mean_std(&pooled);
        let scale = gamma / (sd_b * sd_b + bn.eps).sqrt();
        for i in 0..b {
            let ys: Vec<f64> = draws[i].iter().map(|z| scale * (z - mu_b) + beta).collect();
            let (ym, ys) = mean_std(&ys);
            // zero-variance outputs are compared against a small absolute scale
            let spread = out_s[i].max(gamma.abs() * 1e-3);
            worst = worst.max((ym - out_m[i]).abs() / out_m[i].abs().max(spread));
            worst = worst.max((ys - out_s[i]).abs() / out_s[i].max(spread));
            ok &= within(ym, out_m[i], spread, 0.02) && within(ys, out_s[i], spread, 0.02);
        }
    }
    check(ok, format!("{} batches, worst moment error {worst:.4} (< 0.02)", cases.len()))
}

// 5. Inference bit-exactness ------------------------------------------------

fn randomized(arch: Architecture, seed: u64) -> LarModel<f32> {
    let mut m = LarModel::<f32>::new_pretrain(arch, seed)
        .unwrap()
        .init_distributions(0.05, 0.95)
        .unwrap()
        .with_stage(Stage::Lar)
        .unwrap();
    let mut r = rng::stream(seed ^ 0x51);
    for (spec, layer) in m.arch.layers.clone().iter().zip(m.layers.iter_mut()) {
        let scale = (spec.kind.fan_in() as f32).sqrt();
        if let Some(bn) = layer.bn.as_mut() {
            for c in 0..bn.channels() {
                bn.running_mean[c] = r.gen_range(-1.0..1.0) * scale * 0.3;
                bn.running_var[c] = r.gen_range(0.2..2.0) * scale * scale * 0.3;
                bn.gamma.data_mut()[c] = r.gen_range(-1.5..1.5);
                bn.beta.data_mut()[c] = r.gen_range(-0.5..0.5);
            }
            bn.tracked = 1;
        }
        if let LayerWeights::Distribution(d) = &mut layer.weights {
            for l in d.logits_mut() {
                l.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-1.0..1.0));
            }
        }
    }
    m
}

fn criterion_5() -> Outcome {
    let mut compared = 0usize;
    for (i, name) in [ArchName::MlpSmall, ArchName::CnnSmall].into_iter().enumerate() {
        let arch = Architecture::named(name, &[1, 28, 28], 10, true).map_err(|e| e.to_string())?;
        let model = randomized(arch, 50 + i as u64);
        let mut r = rng::stream(55 + i as u64);
        for s in 0..4 {
            let d = DiscreteModel::sample(&model, s).map_err(|e| e.to_string())?;
            let p = PackedModel::from_discrete(&d).map_err(|e| e.to_string())?;
            for _ in 0..250 {
                let x: Vec<f32> = (0..784).map(|_| rng::normal(&mut r)).collect();
                let a = reference_forward(&d, &x).map_err(|e| e.to_string())?;
                let b = packed_forward(&p, &x).map_err(|e| e.to_string())?;
                if a.binary != b.binary || a.prediction() != b.prediction() {
                    return Err(format!("{name:?}: paths disagree on input {compared}"));
                }
                compared += 1;
            }
        }
    }
    let mut r = rng::stream(57);
    for len in [1usize, 63, 64, 65, 4096] {
        for case in 0..10_000 {
            let zero: f64 = r.gen_range(0.0..1.0);
            let w: Vec<i8> = (0..len)
                .map(|_| {
                    if r.gen_bool(zero) {
                        0
                    } else if r.gen() {
                        1
                    } else {
                        -1
                    }
                })
                .collect();
            let a: Vec<bool> = (0..len).map(|_| r.gen()).collect();
            let brute: i32 = w.iter().zip(&a).map(|(&wi, &ai)| i32::from(wi) * if ai { 1 } else { -1 }).sum();
            let packed = pack_ternary(&w, 1, len).map_err(|e| e.to_string())?;
            let got = ternary_dot(&packed, 0, &PackedBinaryVector::from_bits(&a)).map_err(|e| e.to_string())?;
            if got != brute {
                return Err(format!("ternary_dot length {len} case {case}: {got} != {brute}"));
            }
        }
    }
    Ok(format!("{compared} inputs over mlp-small/cnn-small identical; 5 x 10^4 ternary_dot cases exact"))
}

// 6-8. MNIST ----------------------------------------------------------------

/// Leading training images used; the test split is always complete.
const TRAIN_IMAGES: usize = 8000;
const PRETRAIN_EPOCHS: usize = 5;
const LR_EPOCHS: usize = 5;
const LAR_EPOCHS: usize = 30;

fn mnist() -> Result<(Dataset, Dataset), String> {
    let dir = std::env::var_os("LARNET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let (train, mut test) = load_mnist_dir(&dir).map_err(|e| format!("MNIST at {}: {e}", dir.display()))?;
    let mut train = train.take(TRAIN_IMAGES);
    normalize_splits(&mut train, &mut test, NormMode::PerChannel).map_err(|e| e.to_string())?;
    Ok((train, test))
}

struct Run {
    model: LarModel<f32>,
    last: TrainingMetrics,
    elapsed: Duration,
}

fn base_config() -> TrainConfig {
    TrainConfig { lr: 0.01, batch_size: 64, seed: 1, ..Default::default() }
}

/// Pretrain (tanh) then LR stage; returns the LR-stage model.
fn warm_start(train: &Dataset, probe: &Dataset, batch_norm: bool) -> Result<(LarModel<f32>, Duration), String> {
    let t = Instant::now();
    let arch = Architecture::named(ArchName::CnnSmall, &[1, 28, 28], 10, batch_norm).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: PRETRAIN_EPOCHS, ..base_config() };
    let (m, _) = pretrain_continuous::<f32>(arch, train, Some(probe), &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let mut m = m.init_distributions(0.05, 0.95).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: LR_EPOCHS, mode: Stage::Lr, ..base_config() };
    train_stage(&mut m, train, probe, &cfg)?;
    Ok((m, t.elapsed()))
}

fn train_stage(
    m: &mut LarModel<f32>,
    train: &Dataset,
    probe: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingMetrics, String> {
    let history = larnet::trainer::train(m, train, Some(probe), cfg, |h| {
        eprintln!(
            "  {:?} epoch {}: loss {:.4} probe {:.4} entropy {:?}",
            h.stage,
            h.epoch,
            h.loss,
            h.test_accuracy.unwrap_or(f64::NAN),
            h.activation_entropy
        );
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    history.last().cloned().ok_or_else(|| "no epochs".to_string())
}

fn lar(start: &LarModel<f32>, train: &Dataset, probe: &Dataset, head_lr_multiplier: f64) -> Result<Run, String> {
    let t = Instant::now();
    let mut model = start.with_stage(Stage::Lar).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: LAR_EPOCHS, mode: Stage::Lar, head_lr_multiplier, ..base_config() };
    let last = train_stage(&mut model, train, probe, &cfg)?;
    Ok(Run { model, last, elapsed: t.elapsed() })
}

struct MnistResults {
    best: Result<(BestOfK, Duration), String>,
    no_bn: Result<f64, String>,
    entropy: Result<(f64, f64), String>,
}

fn mnist_runs() -> MnistResults {
    let fail = |e: String| MnistResults { best: Err(e.clone()), no_bn: Err(e.clone()), entropy: Err(e) };
    let (train, test) = match mnist() {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    // per-epoch monitoring only; final numbers use the whole test split
    let probe = test.take(1000);
    let (start, warm) = match warm_start(&train, &probe, true) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let main = lar(&start, &train, &probe, 0.1);
    let best = main.as_ref().map_err(Clone::clone).and_then(|run| {
        let b = best_of_k(&run.model, 5, &test, 7).map_err(|e| e.to_string())?;
        Ok((b, warm + run.elapsed))
    });
    let entropy = main.as_ref().map_err(Clone::clone).and_then(|run| {
        let wide = lar(&start, &train, &probe, 1.0)?;
        let last = |m: &TrainingMetrics| m.activation_entropy.last().copied().ok_or("no binary layer".to_string());
        Ok((last(&run.last)?, last(&wide.last)?))
    });
    let no_bn = warm_start(&train, &probe, false).and_then(|(m, _)| {
        let run = lar(&m, &train, &probe, 0.1)?;
        let b = best_of_k(&run.model, 5, &test, 7).map_err(|e| e.to_string())?;
        Ok(b.accuracies[b.index])
    });
    MnistResults { best, no_bn, entropy }
}

fn criterion_6(r: &MnistResults) -> Outcome {
    let (b, elapsed) = r.best.as_ref().map_err(Clone::clone)?;
    let best = b.accuracies[b.index];
    let lo = b.accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo) * 100.0;
    let sparsity = b.model.sparsity();
    check(
        best >= 0.96 && spread < 0.5 && (0.25..=0.60).contains(&sparsity) && elapsed.as_secs() <= 3600,
        format!(
            "best-of-5 accuracy {best:.4} (>= 0.96), spread {spread:.2} points (< 0.5), sparsity {sparsity:.3} \
             (in [0.25, 0.60]), {:.0} s (<= 3600)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(r: &MnistResults) -> Outcome {
    let (b, _) = r.best.as_ref().map_err(Clone::clone)?;
    let with_bn = b.accuracies[b.index];
    let without = r.no_bn.as_ref().map_err(Clone::clone)?;
    let gap = (with_bn - without) * 100.0;
    check(gap >= 2.0, format!("with BN {with_bn:.4}, without {without:.4}: gap {gap:.2} points (>= 2)"))
}

fn criterion_8(r: &MnistResults) -> Outcome {
    let (low, high) = r.entropy.as_ref().map_err(Clone::clone)?;
    check(low < high, format!("last binary layer entropy: head multiplier 0.1 -> {low:.4} nats, 1.0 -> {high:.4} nats"))
}

// 9. Throughput -------------------------------------------------------------

fn criterion_9() -> Outcome {
    let records = bench_dot(4096, Duration::from_secs(2), 91).map_err(|e| e.to_string())?;
    let float = &records[0];
    let packed = &records[1];
    check(
        packed.speedup >= 8.0,
        format!(
            "float_dot {:.1} ns, ternary_dot {:.1} ns at length 4096: {:.2}x (>= 8)",
            float.ns_per_call, packed.ns_per_call, packed.speedup
        ),
    )
}

// 10. Determinism and serialization -----------------------------------------

/// Runs every stage from JSON snapshots; returns each stage's JSONL and model bytes.
fn replayable_runs(snapshots: &[String]) -> Result<Vec<(String, Vec<u8>)>, String> {
    let (train, test) = synthetic_blobs(3, 40, [1, 6, 6], 1.0, 5).map_err(|e| e.to_string())?;
    let arch = Architecture::named(ArchName::MlpSmall, &[1, 6, 6], 3, true).map_err(|e| e.to_string())?;
    let mut model: Option<LarModel<f32>> = None;
    let mut out = Vec::new();
    for snapshot in snapshots {
        let cfg: TrainConfig = serde_json::from_str(snapshot).map_err(|e| e.to_string())?;
        let mut jsonl = String::new();
        let mut log = |m: &TrainingMetrics| {
            jsonl.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            jsonl.push('\n');
            Ok(())
        };
        let m = match (cfg.mode, model.take()) {
            (Stage::Pretrained, _) => {
                pretrain_continuous::<f32>(arch.clone(), &train, Some(&test), &cfg, &mut log)
                    .map_err(|e| e.to_string())?
                    .0
            }
            (stage, Some(prev)) => {
                let mut m =
                    if stage == Stage::Lr { prev.init_distributions(0.05, 0.95) } else { prev.with_stage(stage) }
                        .map_err(|e| e.to_string())?;
                larnet::trainer::train(&mut m, &train, Some(&test), &cfg, &mut log).map_err(|e| e.to_string())?;
                m
            }
            (_, None) => return Err("stage without a predecessor".into()),
        };
        out.push((jsonl, encode_model(&m).map_err(|e| e.to_string())?));
        model = Some(m);
    }
    Ok(out)
}

fn criterion_10() -> Outcome {
    let snapshots: Vec<String> = [Stage::Pretrained, Stage::Lr, Stage::Lar]
        .into_iter()
        .map(|mode| {
            let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 3, mode, ..Default::default() };
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        })
        .collect();
    let first = replayable_runs(&snapshots)?;
    let second = replayable_runs(&snapshots)?;
    let replayed = first == second && first.iter().all(|(j, _)| j.lines().count() == 2);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model: LarModel<f32> = decode_model(&first[2].1, dir.path()).map_err(|e| e.to_string())?;
    let larn = dir.path().join("m.larn");
    save_model(&model, &larn).map_err(|e| e.to_string())?;
    let reread = std::fs::read(&larn).map_err(|e| e.to_string())?;
    let back: LarModel<f32> = load_model(&larn).map_err(|e| e.to_string())?;
    let wide: LarModel<f64> = gradient_model();
    let wide_bytes = encode_model(&wide).map_err(|e| e.to_string())?;
    let wide_back: LarModel<f64> = decode_model(&wide_bytes, dir.path()).map_err(|e| e.to_string())?;
    let packed = PackedModel::from_discrete(&DiscreteModel::sample(&model, 4).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let larp = dir.path().join("m.larp");
    save_packed(&packed, &larp).map_err(|e| e.to_string())?;
    let packed_back = load_packed(&larp).map_err(|e| e.to_string())?;
    let round_trips = reread == first[2].1
        && encode_model(&back).map_err(|e| e.to_string())? == reread
        && encode_model(&wide_back).map_err(|e| e.to_string())? == wide_bytes
        && packed_back == packed
        && encode_packed(&packed_back).map_err(|e| e.to_string())?
            == std::fs::read(&larp).map_err(|e| e.to_string())?;
    check(
        replayed && round_trips,
        format!("three stages replayed from JSON snapshots: metrics and models identical {replayed}; LARN (f32, f64) and LARP round trips exact {round_trips}"),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    // `cargo test -- --list` and friends pass harness flags; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let selected: Option<Vec<usize>> =
        std::env::var("LARNET_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let names = [
        "gradient correctness",
        "CLT fidelity",
        "Gumbel-Softmax",
        "distributional batch norm",
        "inference bit-exactness",
        "MNIST end-to-end",
        "batch-norm ablation",
        "entropy control",
        "throughput",
        "determinism and serialization",
    ];
    let mnist = (wanted(6) || wanted(7) || wanted(8)).then(|| {
        eprintln!("training MNIST configurations for criteria 6-8");
        let t = Instant::now();
        let r = guarded_mnist();
        eprintln!("MNIST runs took {:.0} s", t.elapsed().as_secs_f64());
        r
    });
    let mut failed = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = match n {
            1 => guarded(criterion_1),
            2 => guarded(criterion_2),
            3 => guarded(criterion_3),
            4 => guarded(criterion_4),
            5 => guarded(criterion_5),
            6 => guarded(|| criterion_6(mnist.as_ref().unwrap())),
            7 => guarded(|| criterion_7(mnist.as_ref().unwrap())),
            8 => guarded(|| criterion_8(mnist.as_ref().unwrap())),
            9 => guarded(criterion_9),
            _ => guarded(criterion_10),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({}): {detail} [{secs:.1} s]", names[n - 1]),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({}): {detail} [{secs:.1} s]", names[n - 1]);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn guarded_mnist() -> MnistResults {
    catch_unwind(mnist_runs).unwrap_or_else(|_| MnistResults {
        best: Err("MNIST runs panicked".into()),
        no_bn: Err("MNIST runs panicked".into()),
        entropy: Err("MNIST runs panicked".into()),
    })
}
