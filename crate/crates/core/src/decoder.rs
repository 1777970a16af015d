//! Attentional decoders.
//!
//! The base level is always a conditional cell: transition 1 reads the
//! previous target embedding, attention reads the resulting state, transition
//! 2 reads the context and transitions 3.. have no input. Higher levels are
//! plain deep-transition cells (`gru`, or `rgru` with the base context
//! appended to the input) or conditional cells (`cgru` with their own
//! attention, `crgru` reusing the base context). Levels above the base are
//! joined by residual connections; the output network reads the top
//! residual, the previous target embedding and the base context.

use alloc::format;
use alloc::vec::Vec;

use crate::cells::{residual_combine, DtGruCellParams, GruTransitionParams};
use crate::config::{CellVariant, DecoderConfig, DecoderKind};
use crate::nn::{AttentionMemory, AttentionParams, Annotations, OutputParams, TanhLayer};
use crate::params::{Init, ParamSink};
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Two input-bearing transitions around an attention read, then input-free
/// transitions.
#[derive(Clone, Debug)]
pub struct ConditionalCellParams<H> {
    pub first: GruTransitionParams<H>,
    /// Absent for crGRU levels, which reuse the base context.
    pub attention: Option<AttentionParams<H>>,
    pub second: GruTransitionParams<H>,
    pub rest: Vec<GruTransitionParams<H>>,
}

impl<H: Copy> ConditionalCellParams<H> {
    #[allow(clippy::too_many_arguments)]
    fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        d_in: usize,
        ann: usize,
        hidden: usize,
        depth: usize,
        attention: bool,
        ln: bool,
    ) -> Result<Self> {
        let first = GruTransitionParams::declare(sink, &format!("{prefix}.t1"), d_in, hidden, ln)?;
        let attention = if attention {
            Some(AttentionParams::declare(sink, &format!("{prefix}.att"), hidden, ann, hidden, ln)?)
        } else {
            None
        };
        let second = GruTransitionParams::declare(sink, &format!("{prefix}.t2"), ann, hidden, ln)?;
        let rest = (3..=depth)
            .map(|t| GruTransitionParams::declare(sink, &format!("{prefix}.t{t}"), 0, hidden, ln))
            .collect::<Result<_>>()?;
        Ok(Self {
            first,
            attention,
            second,
            rest,
        })
    }
}

#[derive(Clone, Debug)]
pub enum LevelParams<H> {
    /// `gru` (`with_context == false`) or `rgru`.
    Plain { cell: DtGruCellParams<H>, with_context: bool },
    /// `cgru` or `crgru`.
    Conditional(ConditionalCellParams<H>),
}

#[derive(Clone, Debug)]
pub struct DecoderParams<H> {
    pub emb: H,
    pub init: TanhLayer<H>,
    pub base: ConditionalCellParams<H>,
    pub higher: Vec<LevelParams<H>>,
    pub output: OutputParams<H>,
    pub kind: DecoderKind,
    pub literal_conditional_state: bool,
}

impl<H: Copy> DecoderParams<H> {
    /// `tied` supplies the source embedding to share, if embeddings are tied.
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        config: &DecoderConfig,
        annotation: usize,
        vocab: usize,
        tied: Option<H>,
        ln: bool,
    ) -> Result<Self> {
        let (e, h) = (config.embedding, config.hidden);
        let emb = match tied {
            Some(t) => t,
            None => sink.tensor("dec.emb", &[vocab, e], Init::Uniform { fan_in: e })?,
        };
        let init = TanhLayer::declare(sink, "dec.init", annotation, h, ln)?;
        let depths = &config.transition_depths;
        if depths[0] < 2 {
            return Err(Error::Config("decoder base level needs transition depth >= 2".into()));
        }
        let base = ConditionalCellParams::declare(sink, "dec.l1", e, annotation, h, depths[0], true, ln)?;
        let mut higher = Vec::with_capacity(depths.len() - 1);
        for (k, &depth) in depths.iter().enumerate().skip(1) {
            let prefix = format!("dec.l{}", k + 1);
            higher.push(match config.variant {
                CellVariant::Gru | CellVariant::Rgru => {
                    let with_context = config.variant == CellVariant::Rgru;
                    let d_in = if with_context { h + annotation } else { h };
                    LevelParams::Plain {
                        cell: DtGruCellParams::declare(sink, &prefix, d_in, h, depth, ln)?,
                        with_context,
                    }
                }
                CellVariant::Cgru | CellVariant::Crgru => {
                    if depth < 2 {
                        return Err(Error::Config(format!(
                            "conditional decoder level {} needs transition depth >= 2",
                            k + 1
                        )));
                    }
                    let attention = config.variant == CellVariant::Cgru;
                    LevelParams::Conditional(ConditionalCellParams::declare(
                        sink, &prefix, h, annotation, h, depth, attention, ln,
                    )?)
                }
            });
        }
        let output = OutputParams::declare(
            sink,
            "dec.out",
            config.output_inputs,
            (h, e, annotation),
            e,
            config.output_depth,
            vocab,
            ln,
        )?;
        Ok(Self {
            emb,
            init,
            base,
            higher,
            output,
            kind: config.kind,
            literal_conditional_state: config.literal_conditional_state,
        })
    }
}

/// Per-sentence attention memories (base level first, then every level with
/// its own attention).
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub annotations: Annotations,
    base: AttentionMemory,
    levels: Vec<Option<AttentionMemory>>,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Carried state of every stack level, base first.
    pub levels: Vec<Var>,
    /// Base context of the last step.
    pub context: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Context per level (the base context for levels without attention).
    pub contexts: Vec<Var>,
    /// Base attention weights `[B×N]`.
    pub weights: Var,
    pub logits: Var,
}

impl DecoderParams<Var> {
    pub fn memory<T: Real>(&self, g: &mut Graph<T>, annotations: Annotations) -> Result<DecoderMemory> {
        let base = self.base.attention.as_ref().expect("base attention").memory(g, &annotations)?;
        let levels = self
            .higher
            .iter()
            .map(|level| match level {
                LevelParams::Conditional(ConditionalCellParams {
                    attention: Some(att), ..
                }) => att.memory(g, &annotations).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(DecoderMemory {
            annotations,
            base,
            levels,
        })
    }

    /// Every level starts from `tanh(LN(mean(C)·W) + b)`, the mean taken over
    /// unmasked positions.
    pub fn init_state<T: Real>(&self, g: &mut Graph<T>, mem: &DecoderMemory) -> Result<DecoderState> {
        let ann = &mem.annotations;
        let mut weights = Vec::with_capacity(ann.batch * ann.len);
        for b in 0..ann.batch {
            let row = &ann.mask[b * ann.len..(b + 1) * ann.len];
            let count = row.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::EmptySequence(b));
            }
            let w = T::one() / T::of(count as f64);
            weights.extend(row.iter().map(|&m| if m { w } else { T::zero() }));
        }
        let weights = g.constant(Tensor::new([ann.batch, ann.len], weights)?);
        let mean = g.time_weighted_sum(weights, ann.seq)?;
        let s0 = self.init.apply(g, mean)?;
        Ok(DecoderState {
            levels: alloc::vec![s0; 1 + self.higher.len()],
            context: None,
        })
    }

    /// Embeddings of the previous target tokens; `None` gives the zero
    /// vector used before the first word.
    pub fn prev_embedding<T: Real>(&self, g: &mut Graph<T>, prev: Option<&[usize]>, batch: usize) -> Result<Var> {
        match prev {
            Some(ids) => crate::nn::embed(g, self.emb, ids),
            None => {
                let e = g.shape(self.emb)[1];
                Ok(g.zeros(&[batch, e]))
            }
        }
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        mem: &DecoderMemory,
        state: &DecoderState,
        y_prev: Var,
    ) -> Result<StepOutput> {
        match self.kind {
            DecoderKind::Baseline => self.step_baseline(g, mem, state, y_prev),
            _ => self.step_deep(g, mem, state, y_prev),
        }
    }

    /// `s₁ = GRU₁(y, s)`, `c = ATT(C, s₁)`, `s₂ = GRU₂(c, s₁)`.
    pub fn step_baseline<T: Real>(
        &self,
        g: &mut Graph<T>,
        mem: &DecoderMemory,
        state: &DecoderState,
        y_prev: Var,
    ) -> Result<StepOutput> {
        let att = self.base.attention.as_ref().expect("base attention");
        let s1 = self.base.first.step(g, Some(y_prev), state.levels[0])?;
        let (c, weights) = att.attend(g, &mem.base, &mem.annotations, s1)?;
        let s2 = self.base.second.step(g, Some(c), s1)?;
        let logits = self.output.logits(g, s2, y_prev, c)?;
        Ok(StepOutput {
            state: DecoderState {
                levels: alloc::vec![s2],
                context: Some(c),
            },
            contexts: alloc::vec![c],
            weights,
            logits,
        })
    }

    /// Deep-transition, stacked and BiDeep decoders.
    pub fn step_deep<T: Real>(
        &self,
        g: &mut Graph<T>,
        mem: &DecoderMemory,
        state: &DecoderState,
        y_prev: Var,
    ) -> Result<StepOutput> {
        let att = self.base.attention.as_ref().expect("base attention");
        let base_first = self.base.first.step(g, Some(y_prev), state.levels[0])?;
        let (c1, weights) = att.attend(g, &mem.base, &mem.annotations, base_first)?;
        let mut s = self.base.second.step(g, Some(c1), base_first)?;
        for t in &self.base.rest {
            s = t.step(g, None, s)?;
        }
        let mut levels = Vec::with_capacity(1 + self.higher.len());
        let mut contexts = Vec::with_capacity(1 + self.higher.len());
        levels.push(s);
        contexts.push(c1);
        let mut r = s;

        for (k, level) in self.higher.iter().enumerate() {
            let prev = state.levels[k + 1];
            let s = match level {
                LevelParams::Plain { cell, with_context } => {
                    let input = if *with_context { g.concat(&[r, c1], 1)? } else { r };
                    contexts.push(c1);
                    cell.step(g, Some(input), prev)?
                }
                LevelParams::Conditional(cell) => {
                    let first = cell.first.step(g, Some(r), prev)?;
                    let c = match (&cell.attention, &mem.levels[k]) {
                        (Some(att), Some(m)) => att.attend(g, m, &mem.annotations, first)?.0,
                        _ => c1,
                    };
                    contexts.push(c);
                    let from = if self.literal_conditional_state { base_first } else { first };
                    let mut s = cell.second.step(g, Some(c), from)?;
                    for t in &cell.rest {
                        s = t.step(g, None, s)?;
                    }
                    s
                }
            };
            levels.push(s);
            r = residual_combine(g, s, r)?;
        }

        let logits = self.output.logits(g, r, y_prev, c1)?;
        Ok(StepOutput {
            state: DecoderState {
                levels,
                context: Some(c1),
            },
            contexts,
            weights,
            logits,
        })
    }
}
