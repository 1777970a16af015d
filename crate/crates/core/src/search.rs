//! Greedy and beam decoding.
//!
//! Hypotheses are ranked by length-normalized log-probability (total divided
//! by token count, end-of-sequence included). Ties go to the higher raw
//! log-probability, then to the lexicographically smaller token sequence.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::Padded;
use crate::decoder::{DecoderMemory, DecoderState};
use crate::model::{self, Bound};
use crate::{Error, Graph, ModelConfig, ParameterSet, Real, Result, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Log-probability per token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len() as f64
    }
}

/// Best-first order: higher normalized score, then higher raw log-prob, then
/// smaller token sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Session<'a, T: Real> {
    g: Graph<T>,
    config: &'a ModelConfig,
    bound: Bound,
    mem: DecoderMemory,
}

impl<'a, T: Real> Session<'a, T> {
    fn new(params: &ParameterSet<T>, config: &'a ModelConfig, source: &[usize]) -> Result<(Self, DecoderState)> {
        let mut g = Graph::new();
        let bound = model::bind(&mut g, config, params, false)?;
        let src = Padded::new(&[source])?;
        let (mem, state) = model::start(&mut g, config, &bound, &src)?;
        Ok((Self { g, config, bound, mem }, state))
    }

    /// Log-probabilities of the next token and the resulting state.
    fn advance(&mut self, state: &DecoderState, prev: Option<usize>) -> Result<(Vec<f64>, DecoderState)> {
        let dec = &self.bound.params.decoder;
        let y = dec.prev_embedding(&mut self.g, prev.as_ref().map(core::slice::from_ref), 1)?;
        let out = dec.step(&mut self.g, &self.mem, state, y)?;
        let lp = self.g.log_softmax(out.logits);
        let values = self.g.values(lp).iter().map(|v| v.as_f64()).collect();
        debug_assert_eq!(self.config.tgt_vocab, self.g.values(lp).len());
        Ok((values, out.state))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check(beam: usize, max_len: usize) -> Result<()> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Invalid("beam size and max length must be at least 1".into()));
    }
    Ok(())
}

/// Argmax at every step (lowest id on ties) until EOS or `max_len` tokens.
pub fn greedy<T: Real>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    source: &[usize],
    max_len: usize,
) -> Result<Hypothesis> {
    check(1, max_len)?;
    let (mut s, mut state) = Session::new(params, config, source)?;
    greedy_in(&mut s, &mut state, max_len)
}

fn greedy_in<T: Real>(s: &mut Session<'_, T>, state: &mut DecoderState, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while hyp.tokens.len() < max_len {
        let (lp, next) = s.advance(state, hyp.tokens.last().copied())?;
        let y = argmax(&lp);
        hyp.tokens.push(y);
        hyp.log_prob += lp[y];
        *state = next;
        if y == EOS {
            break;
        }
    }
    Ok(hyp)
}

struct Live {
    hyp: Hypothesis,
    state: DecoderState,
}

/// Beam search. The greedy hypothesis is always among the candidates, so the
/// result never scores below it.
pub fn beam_search<T: Real>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    source: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    check(beam, max_len)?;
    let (mut s, init) = Session::new(params, config, source)?;
    let mut finished = Vec::new();
    if beam > 1 {
        finished.push(greedy_in(&mut s, &mut init.clone(), max_len)?);
    }
    let mut live = alloc::vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        },
        state: init,
    }];
    for t in 0..max_len {
        let mut candidates = Vec::new();
        for (parent, l) in live.iter().enumerate() {
            let (lp, next) = s.advance(&l.state, l.hyp.tokens.last().copied())?;
            for (y, &p) in lp.iter().enumerate() {
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(y);
                candidates.push((
                    Hypothesis {
                        tokens,
                        log_prob: l.hyp.log_prob + p,
                    },
                    parent,
                    next.clone(),
                ));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(beam);
        let mut next_live = Vec::with_capacity(beam);
        for (hyp, _, state) in candidates {
            if hyp.tokens.last() == Some(&EOS) || t + 1 == max_len {
                finished.push(hyp);
            } else {
                next_live.push(Live { hyp, state });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    Ok(finished.swap_remove(0))
}

/// Beam size 1 is greedy decoding.
pub fn decode<T: Real>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    source: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 1 {
        greedy(params, config, source, max_len)
    } else {
        beam_search(params, config, source, beam, max_len)
    }
}
