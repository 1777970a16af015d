#![allow(dead_code)]

use deep_rnmt_core::params::init_params;
use deep_rnmt_core::{Graph, ModelConfig, ParameterSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny dimensions (H=5, E=4, V=7) with overrides applied on top.
pub fn tiny(pairs: &[(&str, &str)]) -> ModelConfig {
    let mut c = ModelConfig::default();
    for (k, v) in [
        ("encoder.hidden", "5"),
        ("encoder.embedding", "4"),
        ("decoder.hidden", "5"),
        ("decoder.embedding", "4"),
        ("model.src_vocab", "7"),
        ("model.tgt_vocab", "7"),
    ]
    .iter()
    .chain(pairs)
    {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap()
}

/// Initialized parameters with every entry perturbed, so that biases and
/// layer-norm parameters are not at their special initial values.
pub fn randomized(config: &ModelConfig, seed: u64) -> ParameterSet {
    let mut p = init_params::<f64>(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sentence of length `1..=max_len` over `2..vocab`, EOS appended.
pub fn sentence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = rng.gen_range(1..=max_len);
    let mut s: Vec<usize> = (0..n).map(|_| rng.gen_range(2..vocab)).collect();
    s.push(0);
    s
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the gradient of `sum(R ∘ f(inputs))` for a fixed random `R`
/// against central differences, for every entry of every input. Returns the
/// largest relative error.
#[allow(clippy::needless_range_loop)]
pub fn fd_max_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor], with_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone().with_requires_grad(with_grad))).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let mut rr = rng(7);
        let weights = random_tensor(&mut rr, &shape);
        let w = g.constant(weights);
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let value = g.values(loss)[0];
        if !with_grad {
            return (value, vec![]);
        }
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let orig = xs[i].values()[k];
            xs[i].values_mut()[k] = orig + eps;
            let plus = eval(&xs, false).0;
            xs[i].values_mut()[k] = orig - eps;
            let minus = eval(&xs, false).0;
            xs[i].values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}

/// The encoder shapes of the gradient grid.
pub fn grid_encoders() -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
    vec![
        ("shallow", vec![("encoder.kind", "shallow")]),
        ("deep_transition(L=4)", vec![("encoder.kind", "deep_transition"), ("encoder.depths", "4")]),
        ("alternating(D=4)", vec![("encoder.kind", "alternating"), ("encoder.depth", "4")]),
        ("biunidirectional(D=4)", vec![("encoder.kind", "biunidirectional"), ("encoder.depth", "4")]),
        ("bideep(2,2)", vec![("encoder.kind", "bideep"), ("encoder.depth", "2"), ("encoder.depths", "2,2")]),
    ]
}

/// The decoder shapes of the gradient grid.
pub fn grid_decoders() -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
    let stacked = |v| vec![("decoder.kind", "stacked"), ("decoder.variant", v), ("decoder.depth", "4")];
    vec![
        ("baseline", vec![("decoder.kind", "baseline")]),
        ("deep_transition(L=8)", vec![("decoder.kind", "deep_transition"), ("decoder.depths", "8")]),
        ("stacked gru(D=4)", stacked("gru")),
        ("stacked rgru(D=4)", stacked("rgru")),
        ("stacked cgru(D=4)", stacked("cgru")),
        ("stacked crgru(D=4)", stacked("crgru")),
        ("bideep(4/2)", vec![("decoder.kind", "bideep"), ("decoder.depths", "4,2")]),
    ]
}

/// Every encoder kind, decoder kind and variant, plus the flags that change
/// the layout.
pub fn param_matrix() -> Vec<Vec<(&'static str, &'static str)>> {
    let mut out: Vec<Vec<(&str, &str)>> = vec![
        vec![],
        vec![("model.layer_norm", "false")],
        vec![("model.tied_embeddings", "true"), ("encoder.embedding", "5"), ("decoder.embedding", "5")],
        vec![("decoder.output_depth", "3")],
        vec![("decoder.output_inputs", "state_only")],
        vec![("encoder.kind", "deep_transition"), ("encoder.depths", "4")],
        vec![("encoder.kind", "alternating"), ("encoder.depth", "3")],
        vec![("encoder.kind", "biunidirectional"), ("encoder.depth", "4")],
        vec![("encoder.kind", "bideep"), ("encoder.depths", "2,3")],
        vec![("encoder.kind", "mixed"), ("encoder.depth", "4"), ("encoder.alt_layers", "2"), ("encoder.uni_layers", "2")],
        vec![("decoder.kind", "deep_transition"), ("decoder.depths", "5")],
        vec![("decoder.kind", "bideep"), ("decoder.depths", "4,2")],
        vec![("decoder.kind", "bideep"), ("decoder.variant", "cgru"), ("decoder.depths", "3,2,2")],
        vec![("decoder.kind", "bideep"), ("decoder.variant", "rgru"), ("decoder.depths", "2,1"), ("model.layer_norm", "false")],
        vec![
            ("encoder.kind", "bideep"),
            ("encoder.depths", "2,2"),
            ("decoder.kind", "bideep"),
            ("decoder.variant", "crgru"),
            ("decoder.depths", "4,2"),
        ],
    ];
    for v in ["gru", "rgru", "cgru", "crgru"] {
        out.push(vec![("decoder.kind", "stacked"), ("decoder.variant", v), ("decoder.depth", "3")]);
        out.push(vec![("decoder.kind", "stacked"), ("decoder.variant", v), ("decoder.depth", "2"), ("model.layer_norm", "false")]);
    }
    out
}
