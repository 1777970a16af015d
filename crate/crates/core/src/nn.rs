//! Building blocks shared by encoders and decoders: embeddings, layer
//! normalization, additive attention and the deep output network.

use alloc::format;
use alloc::vec::Vec;

use crate::config::OutputInputs;
use crate::params::{Init, ParamSink};
use crate::{Error, Graph, Real, Result, Var};

pub const LN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams<H> {
    pub gain: H,
    pub bias: H,
    pub epsilon: f64,
}

impl<H: Copy> LayerNormParams<H> {
    pub fn declare<S: ParamSink<Handle = H>>(sink: &mut S, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: sink.tensor(&format!("{prefix}.gain"), &[width], Init::Ones)?,
            bias: sink.tensor(&format!("{prefix}.bias"), &[width], Init::Zeros)?,
            epsilon: LN_EPSILON,
        })
    }
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, T::of(p.epsilon))
}

/// `x·W`, layer-normalized when `ln` is present. No bias.
pub fn project<T: Real>(g: &mut Graph<T>, x: Var, w: Var, ln: Option<&LayerNormParams<Var>>) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    match ln {
        Some(p) => layer_norm(g, xw, p),
        None => Ok(xw),
    }
}

/// Rows of the embedding table for a batch of token ids.
pub fn embed<T: Real>(g: &mut Graph<T>, table: Var, ids: &[usize]) -> Result<Var> {
    let vocab = g.shape(table)[0];
    if let Some(&token) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfVocab { token, vocab });
    }
    g.gather_rows(table, ids)
}

/// `tanh(LN(x·W) + b)`.
#[derive(Clone, Debug)]
pub struct TanhLayer<H> {
    pub w: H,
    pub b: H,
    pub ln: Option<LayerNormParams<H>>,
}

impl<H: Copy> TanhLayer<H> {
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        ln: bool,
    ) -> Result<Self> {
        let w = sink.tensor(&format!("{prefix}.W"), &[d_in, d_out], Init::Uniform { fan_in: d_in })?;
        let b = sink.tensor(&format!("{prefix}.b"), &[d_out], Init::Zeros)?;
        let ln = if ln {
            Some(LayerNormParams::declare(sink, &format!("{prefix}.ln"), d_out)?)
        } else {
            None
        };
        Ok(Self { w, b, ln })
    }
}

impl TanhLayer<Var> {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let a = project(g, x, self.w, self.ln.as_ref())?;
        let a = g.add(a, self.b)?;
        Ok(g.tanh(a))
    }
}

/// Additive attention: `e_i = vᵀ tanh(LN(s·W_s) + LN(C_i·W_c) + b)`.
#[derive(Clone, Debug)]
pub struct AttentionParams<H> {
    pub w_state: H,
    pub w_ann: H,
    pub b: H,
    pub v: H,
    pub ln_state: Option<LayerNormParams<H>>,
    pub ln_ann: Option<LayerNormParams<H>>,
}

impl<H: Copy> AttentionParams<H> {
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        state: usize,
        annotation: usize,
        hidden: usize,
        ln: bool,
    ) -> Result<Self> {
        let w_state = sink.tensor(&format!("{prefix}.W_state"), &[state, hidden], Init::Uniform { fan_in: state })?;
        let w_ann = sink.tensor(
            &format!("{prefix}.W_ann"),
            &[annotation, hidden],
            Init::Uniform { fan_in: annotation },
        )?;
        let b = sink.tensor(&format!("{prefix}.b"), &[hidden], Init::Zeros)?;
        let v = sink.tensor(&format!("{prefix}.v"), &[hidden, 1], Init::Uniform { fan_in: hidden })?;
        let (ln_state, ln_ann) = if ln {
            (
                Some(LayerNormParams::declare(sink, &format!("{prefix}.ln_state"), hidden)?),
                Some(LayerNormParams::declare(sink, &format!("{prefix}.ln_ann"), hidden)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            w_state,
            w_ann,
            b,
            v,
            ln_state,
            ln_ann,
        })
    }
}

/// Annotations of a source batch with their padding mask.
#[derive(Clone, Debug)]
pub struct Annotations {
    /// Time-major `[N×B×D]`.
    pub seq: Var,
    /// Row-major `[B×N]`, true at real tokens.
    pub mask: Vec<bool>,
    pub len: usize,
    pub batch: usize,
}

/// Per-sentence part of the attention scores, computed once per source.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    /// `LN(C·W_ann) + b`, `[N×B×A]`.
    keys: Var,
    hidden: usize,
}

impl AttentionParams<Var> {
    pub fn memory<T: Real>(&self, g: &mut Graph<T>, ann: &Annotations) -> Result<AttentionMemory> {
        let d = g.shape(ann.seq)[2];
        let hidden = g.shape(self.w_ann)[1];
        let flat = g.reshape(ann.seq, &[ann.len * ann.batch, d])?;
        let k = project(g, flat, self.w_ann, self.ln_ann.as_ref())?;
        let k = g.add(k, self.b)?;
        let keys = g.reshape(k, &[ann.len, ann.batch, hidden])?;
        Ok(AttentionMemory { keys, hidden })
    }

    /// Context vectors `[B×D]` and attention weights `[B×N]` for decoder
    /// states `s: [B×H]`.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        mem: &AttentionMemory,
        ann: &Annotations,
        s: Var,
    ) -> Result<(Var, Var)> {
        let q = project(g, s, self.w_state, self.ln_state.as_ref())?;
        let a = g.add(mem.keys, q)?;
        let a = g.tanh(a);
        let flat = g.reshape(a, &[ann.len * ann.batch, mem.hidden])?;
        let e = g.matmul(flat, self.v)?;
        let e = g.reshape(e, &[ann.len, ann.batch])?;
        let e = g.transpose(e)?;
        let weights = g.softmax(e, Some(&ann.mask))?;
        let context = g.time_weighted_sum(weights, ann.seq)?;
        Ok((context, weights))
    }
}

/// Deep output network followed by the vocabulary projection.
#[derive(Clone, Debug)]
pub struct OutputParams<H> {
    pub hidden: Vec<TanhLayer<H>>,
    pub proj_w: H,
    pub proj_b: H,
    pub inputs: OutputInputs,
}

impl<H: Copy> OutputParams<H> {
    #[allow(clippy::too_many_arguments)]
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        inputs: OutputInputs,
        widths: (usize, usize, usize),
        hidden: usize,
        depth: usize,
        vocab: usize,
        ln: bool,
    ) -> Result<Self> {
        let (state, emb, ctx) = widths;
        let d_in = match inputs {
            OutputInputs::Full => state + emb + ctx,
            OutputInputs::StateOnly => state,
        };
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let from = if l == 0 { d_in } else { hidden };
            layers.push(TanhLayer::declare(sink, &format!("{prefix}.h{}", l + 1), from, hidden, ln)?);
        }
        let proj_w = sink.tensor(&format!("{prefix}.proj.W"), &[hidden, vocab], Init::Uniform { fan_in: hidden })?;
        let proj_b = sink.tensor(&format!("{prefix}.proj.b"), &[vocab], Init::Zeros)?;
        Ok(Self {
            hidden: layers,
            proj_w,
            proj_b,
            inputs,
        })
    }
}

impl OutputParams<Var> {
    /// Unnormalized scores `[B×V]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, state: Var, y_prev: Var, context: Var) -> Result<Var> {
        let mut x = match self.inputs {
            OutputInputs::Full => g.concat(&[state, y_prev, context], 1)?,
            OutputInputs::StateOnly => state,
        };
        for layer in &self.hidden {
            x = layer.apply(g, x)?;
        }
        let z = g.matmul(x, self.proj_w)?;
        g.add(z, self.proj_b)
    }
}
