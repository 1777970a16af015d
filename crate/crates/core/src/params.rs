//! Named parameter storage, deterministic initialization and the closed-form
//! parameter counter.
//!
//! Model components declare their tensors through a [`ParamSink`]. The same
//! declaration code drives allocation ([`Layout`]) and graph binding
//! ([`crate::model::bind`]), so names, shapes and order always agree.
//! [`count_params`] is computed independently from per-component formulas.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CellVariant, ModelConfig, OutputInputs};
use crate::{Error, Real, Result, Tensor};

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    /// `[H × blocks·H]`, every `H×H` block orthogonal.
    Orthogonal { blocks: usize },
    Zeros,
    Ones,
}

/// Receiver of parameter declarations.
pub trait ParamSink {
    type Handle: Copy;
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Self::Handle>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of declared tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl ParamSink for Layout {
    type Handle = ();

    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        });
        Ok(())
    }
}

impl Layout {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        let mut layout = Layout::default();
        crate::model::declare(config, &mut layout)?;
        Ok(layout)
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Ordered map from hierarchical name (e.g. `enc.fwd.l1.t2.U`) to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T = f64> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::ParamMismatch {
                name,
                reason: "duplicate name".into(),
            });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Errors on the first tensor whose name or shape differs from the
    /// layout of `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = Layout::of(config)?;
        for (i, spec) in layout.specs.iter().enumerate() {
            let Some((name, t)) = self.entries.get(i) else {
                return Err(Error::ParamMismatch {
                    name: spec.name.clone(),
                    reason: "missing".into(),
                });
            };
            if *name != spec.name {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    reason: format!("expected `{}` at position {i}", spec.name),
                });
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                });
            }
        }
        if let Some((name, _)) = self.entries.get(layout.specs.len()) {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                reason: "not part of this architecture".into(),
            });
        }
        Ok(())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (name, t) in &self.entries {
            let values = t.values().iter().map(|&v| f(v)).collect();
            out.push(name.clone(), Tensor::new(t.shape(), values).expect("same shape"))
                .expect("unique names");
        }
        out
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use num_traits::Float;
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(core::f64::consts::TAU * u2)
}

/// Orthonormal columns from a Gaussian matrix via modified Gram-Schmidt,
/// applied twice for full working precision. Row-major `n×n`.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use num_traits::Float;
    let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| standard_normal(rng)).collect()).collect();
    for j in 0..n {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _ in 0..2 {
            for prev in done.iter() {
                let dot: f64 = prev.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= dot * p;
                }
            }
        }
        let norm = Float::sqrt(col.iter().map(|v| v * v).sum::<f64>());
        col.iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * n + j] = v;
        }
    }
    out
}

fn init_values(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use num_traits::Float;
    let numel = spec.shape.iter().product();
    match spec.init {
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::Uniform { fan_in } => {
            let a = 1.0 / Float::sqrt(fan_in as f64);
            (0..numel).map(|_| rng.gen_range(-a..a)).collect()
        }
        Init::Orthogonal { blocks } => {
            let n = spec.shape[0];
            let mut out = vec![0.0; numel];
            for b in 0..blocks {
                let q = orthogonal(n, rng);
                for i in 0..n {
                    for j in 0..n {
                        out[i * n * blocks + b * n + j] = q[i * n + j];
                    }
                }
            }
            out
        }
    }
}

/// Deterministic initialization: orthogonal recurrent blocks, fan-in scaled
/// uniform input/output matrices, zero biases, unit layer-norm gains.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    let layout = Layout::of(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for spec in &layout.specs {
        let values = init_values(spec, &mut rng).into_iter().map(T::of).collect();
        set.push(spec.name.clone(), Tensor::new(spec.shape.clone(), values)?)?;
    }
    Ok(set)
}

/// Closed-form parameter count with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub components: Vec<(&'static str, usize)>,
}

/// One GRU transition; `d_in == 0` means no external input.
pub fn gru_transition_count(d_in: usize, hidden: usize, layer_norm: bool) -> usize {
    let h = hidden;
    let input = if d_in > 0 { 3 * h * d_in } else { 0 };
    let norms = match (layer_norm, d_in > 0) {
        (false, _) => 0,
        (true, true) => 12 * h,
        (true, false) => 6 * h,
    };
    input + 3 * h * h + 3 * h + norms
}

pub fn dtgru_cell_count(d_in: usize, hidden: usize, depth: usize, layer_norm: bool) -> usize {
    gru_transition_count(d_in, hidden, layer_norm) + (depth - 1) * gru_transition_count(0, hidden, layer_norm)
}

pub fn attention_count(state: usize, annotation: usize, hidden: usize, layer_norm: bool) -> usize {
    let ln = if layer_norm { 4 * hidden } else { 0 };
    state * hidden + annotation * hidden + hidden + hidden + ln
}

fn conditional_cell_count(d_in: usize, ctx: usize, hidden: usize, depth: usize, ln: bool) -> usize {
    gru_transition_count(d_in, hidden, ln)
        + gru_transition_count(ctx, hidden, ln)
        + (depth - 2) * gru_transition_count(0, hidden, ln)
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let ln = config.layer_norm;
    let (e, d) = (&config.encoder, &config.decoder);
    let (he, hd) = (e.hidden, d.hidden);
    let ann = e.annotation_width();
    let layout = e.layout();

    let src_emb = config.src_vocab * e.embedding;
    let mut encoder = 0;
    for (level, &depth) in layout.alt_depths.iter().enumerate() {
        let d_in = if level == 0 { e.embedding } else { he };
        encoder += 2 * dtgru_cell_count(d_in, he, depth, ln);
    }
    encoder += layout.uni_levels * dtgru_cell_count(ann, ann, 1, ln);

    let tgt_emb = if config.tied_embeddings { 0 } else { config.tgt_vocab * d.embedding };
    let init = ann * hd + hd + if ln { 2 * hd } else { 0 };

    let depths = &d.transition_depths;
    let mut recurrent = conditional_cell_count(d.embedding, ann, hd, depths[0], ln);
    let mut attention = attention_count(hd, ann, hd, ln);
    for &depth in &depths[1..] {
        recurrent += match d.variant {
            CellVariant::Gru => dtgru_cell_count(hd, hd, depth, ln),
            CellVariant::Rgru => dtgru_cell_count(hd + ann, hd, depth, ln),
            CellVariant::Cgru | CellVariant::Crgru => conditional_cell_count(hd, ann, hd, depth, ln),
        };
        if d.variant == CellVariant::Cgru {
            attention += attention_count(hd, ann, hd, ln);
        }
    }

    let out_in = match d.output_inputs {
        OutputInputs::Full => hd + d.embedding + ann,
        OutputInputs::StateOnly => hd,
    };
    let hid = d.embedding;
    let ln_out = if ln { 2 * hid } else { 0 };
    let output = (out_in * hid + hid + ln_out)
        + (d.output_depth - 1) * (hid * hid + hid + ln_out)
        + hid * config.tgt_vocab
        + config.tgt_vocab;

    let components = vec![
        ("src_embedding", src_emb),
        ("encoder", encoder),
        ("tgt_embedding", tgt_emb),
        ("decoder_init", init),
        ("decoder_recurrent", recurrent),
        ("attention", attention),
        ("output", output),
    ];
    ParamCount {
        total: components.iter().map(|(_, n)| n).sum(),
        components,
    }
}
