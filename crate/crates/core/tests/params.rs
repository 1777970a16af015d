//! Parameter accounting, initialization and checkpoints.

mod common;

use common::*;
use deep_rnmt_core::checkpoint::{from_bytes, to_bytes};
use deep_rnmt_core::model::score_sequence;
use deep_rnmt_core::params::{count_params, gru_transition_count, init_params, Init, Layout};
use deep_rnmt_core::{Error, ModelConfig, ParameterSet};

fn config(pairs: &[(&str, &str)]) -> ModelConfig {
    let mut c = ModelConfig::default();
    for (k, v) in [("encoder.hidden", "6"), ("encoder.embedding", "5"), ("decoder.hidden", "7"), ("decoder.embedding", "4")]
        .iter()
        .chain(pairs)
    {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap()
}

#[test]
fn count_matches_allocation_over_the_param_matrix() {
    let m = param_matrix();
    assert!(m.len() >= 20);
    for pairs in m {
        let c = config(&pairs);
        let count = count_params(&c);
        let allocated = init_params::<f64>(&c, 1).unwrap().total_scalars();
        assert_eq!(count.total, allocated, "{pairs:?}");
        assert_eq!(count.components.iter().map(|x| x.1).sum::<usize>(), count.total, "{pairs:?}");
        assert_eq!(Layout::of(&c).unwrap().total(), allocated, "{pairs:?}");
    }
}

#[test]
fn single_transition_count_by_hand() {
    assert_eq!(gru_transition_count(4, 8, false), 3 * (4 * 8 + 8 * 8 + 8));
    assert_eq!(gru_transition_count(4, 8, false), 312);
}

#[test]
fn encoder_ordering_at_depth_four() {
    let total = |pairs: &[(&str, &str)]| count_params(&config(pairs)).total;
    let shallow = total(&[]);
    let dt = total(&[("encoder.kind", "deep_transition"), ("encoder.depths", "4")]);
    let alt = total(&[("encoder.kind", "alternating"), ("encoder.depth", "4")]);
    let biuni = total(&[("encoder.kind", "biunidirectional"), ("encoder.depth", "4")]);
    assert!(shallow < dt && dt < alt && alt < biuni, "{shallow} {dt} {alt} {biuni}");
}

#[test]
fn decoder_variant_ordering_at_depth_four() {
    let total = |v: &str| count_params(&config(&[("decoder.kind", "stacked"), ("decoder.variant", v), ("decoder.depth", "4")])).total;
    let (gru, rgru, crgru, cgru) = (total("gru"), total("rgru"), total("crgru"), total("cgru"));
    assert!(gru < rgru && rgru < crgru && crgru < cgru, "{gru} {rgru} {crgru} {cgru}");
}

#[test]
fn init_is_deterministic_and_seeded() {
    let c = config(&[("decoder.kind", "bideep"), ("decoder.depths", "4,2")]);
    let a = init_params::<f64>(&c, 5).unwrap();
    assert_eq!(a, init_params::<f64>(&c, 5).unwrap());
    assert_ne!(a, init_params::<f64>(&c, 6).unwrap());
}

#[test]
fn init_follows_the_declared_scheme() {
    let c = config(&[("encoder.kind", "bideep"), ("encoder.depths", "2,2"), ("decoder.kind", "stacked"), ("decoder.variant", "cgru"), ("decoder.depth", "2")]);
    let p = init_params::<f64>(&c, 9).unwrap();
    let layout = Layout::of(&c).unwrap();
    let mut orthogonal = 0;
    for (spec, (name, t)) in layout.specs.iter().zip(p.iter()) {
        assert_eq!(spec.name, name);
        let v = t.values();
        match spec.init {
            Init::Zeros => assert!(v.iter().all(|&x| x == 0.0), "{name}"),
            Init::Ones => assert!(v.iter().all(|&x| x == 1.0), "{name}"),
            Init::Uniform { fan_in } => {
                let a = 1.0 / (fan_in as f64).sqrt();
                assert!(v.iter().all(|x| x.abs() <= a), "{name}");
            }
            Init::Orthogonal { blocks } => {
                orthogonal += 1;
                let n = t.shape()[0];
                let width = n * blocks;
                for b in 0..blocks {
                    for i in 0..n {
                        for j in 0..n {
                            let dot: f64 = (0..n).map(|k| v[k * width + b * n + i] * v[k * width + b * n + j]).sum();
                            let want = if i == j { 1.0 } else { 0.0 };
                            assert!((dot - want).abs() < 1e-10, "{name} block {b}: ({i},{j}) = {dot}");
                        }
                    }
                }
            }
        }
    }
    assert!(orthogonal > 0);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    for pairs in param_matrix() {
        let c = config(&pairs);
        let p = randomized(&c, 3);
        let bytes = to_bytes(&p, &c);
        let (q, c2): (ParameterSet, _) = from_bytes(&bytes).unwrap();
        assert_eq!(c, c2);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.values()), bits(b.values()));
        }
        assert_eq!(to_bytes(&q, &c2), bytes);
    }
}

#[test]
fn mismatched_parameters_name_the_first_offender() {
    let c = config(&[]);
    let other = config(&[("decoder.kind", "deep_transition"), ("decoder.depths", "3")]);
    let p = init_params::<f64>(&other, 1).unwrap();
    match p.check_layout(&c) {
        Err(Error::ParamMismatch { name, .. }) => assert!(name.starts_with("dec."), "{name}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let wider = config(&[("encoder.hidden", "8")]);
    match init_params::<f64>(&wider, 1).unwrap().check_layout(&c) {
        Err(Error::ParamMismatch { name, .. }) => assert!(name.starts_with("enc.fwd.l1.t1."), "{name}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = config(&[]);
    let bytes = to_bytes(&init_params::<f64>(&c, 1).unwrap(), &c);
    assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut v = bytes.clone();
    v[8] = 99;
    assert!(matches!(from_bytes::<f64>(&v), Err(Error::Checkpoint(_))));
    let mut v = bytes;
    v.push(0);
    assert!(matches!(from_bytes::<f64>(&v), Err(Error::Checkpoint(_))));
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny_baseline.ckpt");
const GOLDEN_SCORE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny_baseline.score");
const GOLDEN_SOURCE: [usize; 4] = [3, 5, 2, 0];
const GOLDEN_TARGET: [usize; 4] = [3, 5, 2, 0];

fn golden_model() -> (ParameterSet, ModelConfig) {
    let c = tiny(&[]);
    (randomized(&c, 2024), c)
}

#[test]
fn golden_checkpoint_reproduces_stored_score() {
    let bytes = std::fs::read(GOLDEN).unwrap();
    let (p, c): (ParameterSet, _) = from_bytes(&bytes).unwrap();
    let stored = std::fs::read_to_string(GOLDEN_SCORE).unwrap();
    let bits = u64::from_str_radix(stored.trim(), 16).unwrap();
    let (score, _) = score_sequence(&p, &c, &GOLDEN_SOURCE, &GOLDEN_TARGET).unwrap();
    assert_eq!(score.to_bits(), bits, "{score} vs {}", f64::from_bits(bits));
    let (fresh, fresh_config) = golden_model();
    assert_eq!(to_bytes(&fresh, &fresh_config), bytes);
}

/// Writes the golden files. Run once with `--ignored` when the format changes.
#[test]
#[ignore]
fn regenerate_golden_checkpoint() {
    let (p, c) = golden_model();
    std::fs::write(GOLDEN, to_bytes(&p, &c)).unwrap();
    let (score, _) = score_sequence(&p, &c, &GOLDEN_SOURCE, &GOLDEN_TARGET).unwrap();
    std::fs::write(GOLDEN_SCORE, format!("{:016x}\n", score.to_bits())).unwrap();
}
