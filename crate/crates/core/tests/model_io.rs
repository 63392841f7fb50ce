use std::path::{Path, PathBuf};

use larnet::inference::{packed_forward, reference_forward, DiscreteModel, PackedModel};
use larnet::model::{Architecture, LarModel, LayerWeights, Stage};
use larnet::model_io::*;
use larnet::{rng, Error};
use rand::Rng;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Every parameter set to a distinct, exactly representable value.
fn tiny_model() -> LarModel<f32> {
    let arch = Architecture::mlp_small(&[1, 2, 2], 2, 3, true).unwrap();
    let mut m = LarModel::<f32>::new_pretrain(arch, 0).unwrap().init_distributions(0.05, 0.95).unwrap();
    m.stage = Stage::Lar;
    let mut k = 0f32;
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v = k * 0.25 - 2.0;
            k += 1.0;
        }
    }
    for layer in &mut m.layers {
        if let Some(bn) = layer.bn.as_mut() {
            bn.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 - 1.0);
            bn.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + i as f32);
            bn.tracked = 7;
        }
    }
    m
}

fn random_model(seed: u64) -> LarModel<f32> {
    let arch = Architecture::cnn_small(&[1, 8, 8], 3, 4, 6, true).unwrap();
    let mut m = LarModel::<f32>::new_pretrain(arch, seed).unwrap().init_distributions(0.05, 0.95).unwrap();
    m.stage = Stage::Lar;
    let mut r = rng::stream(seed);
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-3.0..3.0));
    }
    for layer in &mut m.layers {
        if let Some(bn) = layer.bn.as_mut() {
            bn.running_mean.iter_mut().for_each(|v| *v = r.gen_range(-2.0..2.0));
            bn.running_var.iter_mut().for_each(|v| *v = r.gen_range(0.5..4.0));
            bn.tracked = 3;
        }
    }
    m
}

fn bits(m: &LarModel<f32>) -> Vec<u32> {
    let mut out: Vec<u32> = m.params().iter().flat_map(|(t, _)| t.data().iter().map(|v| v.to_bits())).collect();
    for l in &m.layers {
        if let Some(bn) = &l.bn {
            out.extend(bn.running_mean.iter().chain(&bn.running_var).map(|v| v.to_bits()));
            out.push(bn.tracked as u32);
        }
    }
    out
}

#[test]
fn model_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, stage) in [Stage::Pretrained, Stage::Lr, Stage::Lar].into_iter().enumerate() {
        let m = if stage == Stage::Pretrained {
            LarModel::<f32>::new_pretrain(Architecture::mini_resnet(&[1, 8, 8], 3, 4, false).unwrap(), 5).unwrap()
        } else {
            random_model(i as u64).with_stage(stage).unwrap()
        };
        let path = dir.path().join(format!("m{i}.larn"));
        save_model(&m, &path).unwrap();
        let back: LarModel<f32> = load_model(&path).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.stage, m.stage);
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(sniff(&path).unwrap(), FileKind::Model);
    }
}

#[test]
fn packed_round_trip_and_export_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_model(9);
    let d = DiscreteModel::sample(&m, 4).unwrap();
    let p = PackedModel::from_discrete(&d).unwrap();
    let path = dir.path().join("m.larp");
    save_packed(&p, &path).unwrap();
    let back = load_packed(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(sniff(&path).unwrap(), FileKind::Packed);
    let mut r = rng::stream(1);
    for _ in 0..50 {
        let x: Vec<f32> = (0..64).map(|_| rng::normal(&mut r)).collect();
        let a = reference_forward(&d, &x).unwrap();
        let b = packed_forward(&back, &x).unwrap();
        assert_eq!((a.binary, a.scores), (b.binary, b.scores));
    }
}

#[test]
fn packed_interior_is_small() {
    let m = random_model(2);
    let p = PackedModel::from_discrete(&DiscreteModel::sample(&m, 0).unwrap()).unwrap();
    let (float, packed) = interior_weight_bytes(&m, &p);
    assert!(packed * 12 <= float, "{packed} vs {float}");
}

#[test]
fn point_mass_export_is_seed_independent() {
    let mut m = random_model(3);
    for l in &mut m.layers {
        if let LayerWeights::Distribution(d) = &mut l.weights {
            *d = d.hardened();
        }
    }
    let a = encode_packed(&PackedModel::from_discrete(&DiscreteModel::sample(&m, 1).unwrap()).unwrap()).unwrap();
    let b = encode_packed(&PackedModel::from_discrete(&DiscreteModel::sample(&m, 2).unwrap()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncation_is_rejected_everywhere() {
    let bytes = encode_model(&tiny_model()).unwrap();
    for len in 0..bytes.len() {
        assert!(decode_model::<f32>(&bytes[..len], Path::new("t")).is_err(), "prefix {len}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_model::<f32>(&extra, Path::new("t")).unwrap_err().to_string().contains("trailing"));
    let p =
        encode_packed(&PackedModel::from_discrete(&DiscreteModel::sample(&tiny_model(), 0).unwrap()).unwrap()).unwrap();
    for len in 0..p.len() {
        assert!(decode_packed(&p[..len], Path::new("t")).is_err(), "prefix {len}");
    }
}

#[test]
fn diagnostics_name_the_field() {
    let mut bytes = encode_model(&tiny_model()).unwrap();
    bytes[4] = 2;
    let e = decode_model::<f32>(&bytes, Path::new("t")).unwrap_err();
    assert_eq!(e.to_string(), "unsupported version 2 (expected 1)");

    // the first blob length sits right after the descriptor, stage and weights tag
    let bytes = encode_model(&tiny_model()).unwrap();
    let descriptor = 4 + 4 * 3 + 4 + 8 + 4 + 3 * (1 + 8 + 2);
    let at = 8 + descriptor + 1 + 1;
    let mut bad = bytes.clone();
    bad[at] += 1;
    match decode_model::<f32>(&bad, Path::new("t")).unwrap_err() {
        Error::Format { offset, msg, .. } => {
            assert_eq!(offset as usize, at);
            assert!(msg.contains("layer 0 weights") && msg.contains("declared length 13"), "{msg}");
        }
        e => panic!("{e}"),
    }

    let mut p =
        encode_packed(&PackedModel::from_discrete(&DiscreteModel::sample(&tiny_model(), 0).unwrap()).unwrap()).unwrap();
    p[0] = b'X';
    assert!(decode_packed(&p, Path::new("t")).unwrap_err().to_string().contains("bad magic"));
}

#[test]
fn overlapping_planes_are_rejected() {
    let p = PackedModel::from_discrete(&DiscreteModel::sample(&tiny_model(), 0).unwrap()).unwrap();
    let bytes = encode_packed(&p).unwrap();
    let d = decode_packed(&bytes, Path::new("t")).unwrap();
    let larnet::inference::PackedWeights::Ternary(m) = &d.layers[1].weights else { panic!() };
    // minus plane of row 0 follows the plus planes; set every bit it shares with plus
    let plus0 = m.plus()[0];
    let needle: Vec<u8> = m.plus().iter().chain(m.minus()).flat_map(|w| w.to_le_bytes()).collect();
    let start = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut bad = bytes.clone();
    let minus0 = start + 8 * m.plus().len();
    let word = u64::from_le_bytes(bad[minus0..minus0 + 8].try_into().unwrap()) | plus0 | 1;
    bad[minus0..minus0 + 8].copy_from_slice(&word.to_le_bytes());
    let e = decode_packed(&bad, Path::new("t")).unwrap_err().to_string();
    assert!(e.contains("both +1 and -1"), "{e}");
}

#[test]
fn golden_fixtures() {
    let m = tiny_model();
    let larn = encode_model(&m).unwrap();
    let larp = encode_packed(&PackedModel::from_discrete(&DiscreteModel::sample(&m, 0).unwrap()).unwrap()).unwrap();
    if std::env::var_os("LARNET_BLESS").is_some() {
        std::fs::create_dir_all(fixture("")).unwrap();
        std::fs::write(fixture("tiny.larn"), &larn).unwrap();
        std::fs::write(fixture("tiny.larp"), &larp).unwrap();
    }
    assert_eq!(larn, std::fs::read(fixture("tiny.larn")).unwrap());
    assert_eq!(larp, std::fs::read(fixture("tiny.larp")).unwrap());
    assert_eq!(&larn[..8], b"LARN\x01\0\0\0");
    assert_eq!(&larp[..8], b"LARP\x01\0\0\0");
    let back: LarModel<f32> = load_model(fixture("tiny.larn")).unwrap();
    assert_eq!(bits(&back), bits(&m));
}
