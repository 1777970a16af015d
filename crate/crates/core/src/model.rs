//! Whole-model assembly: declaration, binding parameters into a graph,
//! teacher-forced scoring, loss and gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::decoder::{DecoderMemory, DecoderParams, DecoderState};
use crate::encoder::{encode, EncoderParams};
use crate::params::{Init, ParamSink};
use crate::{Error, Graph, ModelConfig, ParameterSet, Real, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelParams<H> {
    pub encoder: EncoderParams<H>,
    pub decoder: DecoderParams<H>,
}

/// Declares every tensor of the model in canonical order.
pub fn declare<S: ParamSink>(config: &ModelConfig, sink: &mut S) -> Result<ModelParams<S::Handle>> {
    let ln = config.layer_norm;
    let encoder = EncoderParams::declare(sink, &config.encoder, config.src_vocab, ln)?;
    let tied = config.tied_embeddings.then_some(encoder.emb);
    let decoder = DecoderParams::declare(
        sink,
        &config.decoder,
        config.encoder.annotation_width(),
        config.tgt_vocab,
        tied,
        ln,
    )?;
    Ok(ModelParams { encoder, decoder })
}

/// Copies a [`ParameterSet`] into a graph in declaration order, checking each
/// name and shape on the way.
struct BindSink<'a, T: Real> {
    graph: &'a mut Graph<T>,
    params: &'a ParameterSet<T>,
    next: usize,
    trainable: bool,
    leaves: Vec<Var>,
}

impl<T: Real> ParamSink for BindSink<'_, T> {
    type Handle = Var;

    fn tensor(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Var> {
        if self.next >= self.params.len() {
            return Err(Error::ParamMismatch {
                name: name.into(),
                reason: "missing".into(),
            });
        }
        let (have, tensor) = self.params.entry(self.next);
        if have != name {
            return Err(Error::ParamMismatch {
                name: have.into(),
                reason: format!("expected `{name}`"),
            });
        }
        if tensor.shape() != shape {
            return Err(Error::ParamMismatch {
                name: name.into(),
                reason: format!("shape {:?}, expected {:?}", tensor.shape(), shape),
            });
        }
        self.next += 1;
        let t = Tensor::new(tensor.shape(), tensor.values().to_vec())?.with_requires_grad(self.trainable);
        let v = self.graph.leaf(t);
        self.leaves.push(v);
        Ok(v)
    }
}

/// Parameters bound into one graph. `leaves[i]` holds parameter `i`.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: ModelParams<Var>,
    pub leaves: Vec<Var>,
}

pub fn bind<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &ParameterSet<T>,
    trainable: bool,
) -> Result<Bound> {
    let mut sink = BindSink {
        graph: g,
        params,
        next: 0,
        trainable,
        leaves: Vec::with_capacity(params.len()),
    };
    let bound = declare(config, &mut sink)?;
    if sink.next != params.len() {
        let (name, _) = params.entry(sink.next);
        return Err(Error::ParamMismatch {
            name: name.into(),
            reason: "not part of this architecture".into(),
        });
    }
    Ok(Bound {
        params: bound,
        leaves: sink.leaves,
    })
}

fn check_vocab(rows: &[Vec<usize>], vocab: usize) -> Result<()> {
    match rows.iter().flatten().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::TokenOutOfVocab { token, vocab }),
        None => Ok(()),
    }
}

/// Encodes the source side and prepares the decoder.
pub fn start<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    bound: &Bound,
    source: &crate::data::Padded,
) -> Result<(DecoderMemory, DecoderState)> {
    check_vocab(source.rows(), config.src_vocab)?;
    let ann = encode(g, &bound.params.encoder, config.encoder.kind, source)?;
    let dec = &bound.params.decoder;
    let mem = dec.memory(g, ann)?;
    let state = dec.init_state(g, &mem)?;
    Ok((mem, state))
}

/// Teacher-forced log-probabilities of every target position, one `[B×1]`
/// node per position (padding positions included).
pub fn target_log_probs<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    bound: &Bound,
    batch: &Batch,
) -> Result<Vec<Var>> {
    check_vocab(batch.target.rows(), config.tgt_vocab)?;
    let (mem, mut state) = start(g, config, bound, &batch.source)?;
    let dec = &bound.params.decoder;
    let b = batch.size();
    let mut y_prev = dec.prev_embedding(g, None, b)?;
    let mut out = Vec::with_capacity(batch.target.len());
    for j in 0..batch.target.len() {
        let ids = batch.target.column(j);
        let step = dec.step(g, &mem, &state, y_prev)?;
        let lp = g.log_softmax(step.logits);
        out.push(g.pick(lp, &ids)?);
        state = step.state;
        y_prev = dec.prev_embedding(g, Some(&ids), b)?;
    }
    Ok(out)
}

/// Summed negative log-likelihood over unmasked target tokens.
pub fn nll_sum<T: Real>(g: &mut Graph<T>, config: &ModelConfig, bound: &Bound, batch: &Batch) -> Result<Var> {
    let picked = target_log_probs(g, config, bound, batch)?;
    let all = g.concat(&picked, 1)?;
    let mask: Vec<T> = batch
        .target
        .mask()
        .into_iter()
        .map(|m| if m { T::one() } else { T::zero() })
        .collect();
    let mask = g.constant(Tensor::new([batch.size(), batch.target.len()], mask)?);
    let kept = g.mul(all, mask)?;
    let total = g.sum(kept);
    Ok(g.affine(total, -T::one(), T::zero()))
}

/// Per-row log-probabilities of the unmasked target tokens.
pub fn sequence_log_probs<T: Real>(params: &ParameterSet<T>, config: &ModelConfig, batch: &Batch) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, config, params, false)?;
    let picked = target_log_probs(&mut g, config, &bound, batch)?;
    Ok((0..batch.size())
        .map(|r| {
            (0..batch.target.lengths()[r])
                .map(|j| g.values(picked[j])[r])
                .collect()
        })
        .collect())
}

/// Total and per-token log-probability of `target` given `source`, both used
/// exactly as given (no framing).
pub fn score_sequence<T: Real>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    source: &[usize],
    target: &[usize],
) -> Result<(T, Vec<T>)> {
    let batch = Batch::new(&[source], &[target])?;
    let per_token = sequence_log_probs(params, config, &batch)?.pop().expect("one row");
    let total = per_token.iter().fold(T::zero(), |a, &v| a + v);
    Ok((total, per_token))
}

/// Mean per-token cross-entropy.
pub fn loss<T: Real>(params: &ParameterSet<T>, config: &ModelConfig, batch: &Batch) -> Result<T> {
    let mut g = Graph::new();
    let bound = bind(&mut g, config, params, false)?;
    let nll = nll_sum(&mut g, config, &bound, batch)?;
    let tokens = T::of(batch.target.tokens() as f64);
    Ok(g.values(nll)[0] / tokens)
}

/// Summed NLL of a batch and its gradient for every parameter, in parameter
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f64> {
    pub nll: T,
    pub tokens: usize,
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(params: &ParameterSet<T>) -> Self {
        Self {
            nll: T::zero(),
            tokens: 0,
            grads: params.iter().map(|(_, t)| alloc::vec![T::zero(); t.numel()]).collect(),
        }
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        self.nll = self.nll + other.nll;
        self.tokens += other.tokens;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

pub fn nll_gradients<T: Real>(params: &ParameterSet<T>, config: &ModelConfig, batch: &Batch) -> Result<Gradients<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, config, params, true)?;
    let nll = nll_sum(&mut g, config, &bound, batch)?;
    g.backward(nll)?;
    let grads = bound
        .leaves
        .iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![T::zero(); t.numel()],
        })
        .collect();
    Ok(Gradients {
        nll: g.values(nll)[0],
        tokens: batch.target.tokens(),
        grads,
    })
}
