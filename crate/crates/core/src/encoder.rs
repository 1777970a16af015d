//! Bidirectional source encoders.
//!
//! Every topology is an alternating part (a forward and a backward stack of
//! deep-transition cells, directions alternating per level, residual
//! connections above level 1) optionally followed by forward-only levels of
//! double width. Shallow, deep-transition, alternating, biunidirectional,
//! BiDeep and mixed encoders are points in that space; see
//! [`EncoderConfig::layout`].
//!
//! Batches are time-major with right padding. At masked positions every
//! recurrence carries its state through unchanged, so padding never reaches
//! a real position in either direction.

use alloc::format;
use alloc::vec::Vec;

use crate::cells::{residual_combine, DtGruCellParams};
use crate::config::{EncoderConfig, EncoderKind};
use crate::data::Padded;
use crate::nn::{embed, Annotations};
use crate::params::{Init, ParamSink};
use crate::{Graph, Real, Result, Var};

#[derive(Clone, Debug)]
pub struct EncoderParams<H> {
    pub emb: H,
    /// Forward part, bottom level first.
    pub fwd: Vec<DtGruCellParams<H>>,
    /// Backward part, bottom level first.
    pub bwd: Vec<DtGruCellParams<H>>,
    /// Forward-only double-width levels.
    pub uni: Vec<DtGruCellParams<H>>,
}

impl<H: Copy> EncoderParams<H> {
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        config: &EncoderConfig,
        vocab: usize,
        ln: bool,
    ) -> Result<Self> {
        let (e, h) = (config.embedding, config.hidden);
        let emb = sink.tensor("enc.emb", &[vocab, e], Init::Uniform { fan_in: e })?;
        let layout = config.layout();
        let mut parts = [Vec::new(), Vec::new()];
        for (name, part) in ["fwd", "bwd"].iter().zip(parts.iter_mut()) {
            for (level, &depth) in layout.alt_depths.iter().enumerate() {
                let d_in = if level == 0 { e } else { h };
                let prefix = format!("enc.{name}.l{}", level + 1);
                part.push(DtGruCellParams::declare(sink, &prefix, d_in, h, depth, ln)?);
            }
        }
        let [fwd, bwd] = parts;
        let width = config.annotation_width();
        let uni = (0..layout.uni_levels)
            .map(|k| DtGruCellParams::declare(sink, &format!("enc.uni.l{}", k + 1), width, width, 1, ln))
            .collect::<Result<_>>()?;
        Ok(Self { emb, fwd, bwd, uni })
    }
}

/// Runs one recurrence over the sequence, carrying the state through masked
/// positions. Returns the state at every position, in position order.
fn run_direction<T: Real>(
    g: &mut Graph<T>,
    cell: &DtGruCellParams<Var>,
    inputs: &[Var],
    src: &Padded,
    reverse: bool,
    width: usize,
) -> Result<Vec<Var>> {
    let n = inputs.len();
    let mut h = g.zeros(&[src.batch(), width]);
    let mut out = alloc::vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for i in order {
        let next = cell.step(g, Some(inputs[i]), h)?;
        h = if src.column_full(i) {
            next
        } else {
            g.select_rows(&src.column_mask(i), next, h)?
        };
        out[i] = h;
    }
    Ok(out)
}

fn stack_time_major<T: Real>(g: &mut Graph<T>, states: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(states.len());
    for &s in states {
        let shape = g.shape(s).to_vec();
        rows.push(g.reshape(s, &[1, shape[0], shape[1]])?);
    }
    g.concat(&rows, 0)
}

fn embed_source<T: Real>(g: &mut Graph<T>, p: &EncoderParams<Var>, src: &Padded) -> Result<Vec<Var>> {
    (0..src.len()).map(|i| embed(g, p.emb, &src.column(i))).collect()
}

fn finish<T: Real>(g: &mut Graph<T>, states: Vec<Var>, src: &Padded) -> Result<Annotations> {
    Ok(Annotations {
        seq: stack_time_major(g, &states)?,
        mask: src.mask(),
        len: src.len(),
        batch: src.batch(),
    })
}

/// Single-level bidirectional GRU with zero initial states.
pub fn encode_shallow<T: Real>(g: &mut Graph<T>, p: &EncoderParams<Var>, src: &Padded) -> Result<Annotations> {
    let x = embed_source(g, p, src)?;
    let h = g.shape(p.fwd[0].transitions[0].u)[0];
    let fwd = run_direction(g, &p.fwd[0], &x, src, false, h)?;
    let bwd = run_direction(g, &p.bwd[0], &x, src, true, h)?;
    let states = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b], 1))
        .collect::<Result<Vec<_>>>()?;
    finish(g, states, src)
}

/// The general stack: alternating deep-transition levels, then forward-only
/// double-width levels, with residual connections above level 1.
pub fn encode_stack<T: Real>(g: &mut Graph<T>, p: &EncoderParams<Var>, src: &Padded) -> Result<Annotations> {
    let x = embed_source(g, p, src)?;
    let h = g.shape(p.fwd[0].transitions[0].u)[0];
    let mut tops = Vec::with_capacity(2);
    for (part, cells) in [&p.fwd, &p.bwd].into_iter().enumerate() {
        let mut w = x.clone();
        for (level, cell) in cells.iter().enumerate() {
            let reverse = (level % 2 == 1) != (part == 1);
            let states = run_direction(g, cell, &w, src, reverse, h)?;
            w = if level == 0 {
                states
            } else {
                states
                    .iter()
                    .zip(&w)
                    .map(|(&s, &below)| residual_combine(g, s, below))
                    .collect::<Result<_>>()?
            };
        }
        tops.push(w);
    }
    let mut w = tops[0]
        .iter()
        .zip(&tops[1])
        .map(|(&f, &b)| g.concat(&[f, b], 1))
        .collect::<Result<Vec<_>>>()?;
    for cell in &p.uni {
        let states = run_direction(g, cell, &w, src, false, 2 * h)?;
        w = states
            .iter()
            .zip(&w)
            .map(|(&s, &below)| residual_combine(g, s, below))
            .collect::<Result<_>>()?;
    }
    finish(g, w, src)
}

pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &EncoderParams<Var>,
    kind: EncoderKind,
    src: &Padded,
) -> Result<Annotations> {
    match kind {
        EncoderKind::Shallow => encode_shallow(g, p, src),
        _ => encode_stack(g, p, src),
    }
}
