//! Training loop: Adam on length-bucketed batches, global-norm clipping,
//! periodic validation and early stopping on validation cross-entropy.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Batch, SyntheticTask};
use crate::model::{self, Gradients};
use crate::optim::{clip_global_norm, Adam, AdamHyper};
use crate::{Error, Graph, ModelConfig, ParameterSet, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub adam: AdamHyper,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    /// Steps before the divergence check applies.
    pub warmup: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            adam: AdamHyper::default(),
            clip_norm: 1.0,
            batch_size: 32,
            eval_every: 500,
            patience: 10,
            max_steps: 5000,
            warmup: 100,
            train_size: 10_000,
            valid_size: 500,
            seed: 1,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    /// Token-weighted training cross-entropy since the previous record.
    pub train_ce: f64,
    pub valid_ce: f64,
    pub tokens_per_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxSteps,
    Requested,
}

/// Host services for [`train`]: a clock, and optionally a parallel gradient
/// implementation. Gradients must be summed in example order so results do
/// not depend on the worker count.
pub trait TrainHooks<T: Real> {
    /// Monotonic seconds.
    fn seconds(&mut self) -> f64;

    /// Summed NLL and its gradient over `batch`.
    fn gradients(&mut self, params: &ParameterSet<T>, config: &ModelConfig, batch: &Batch) -> Result<Gradients<T>> {
        model::nll_gradients(params, config, batch)
    }

    /// Called after each validation; returning [`Control::Stop`] ends
    /// training after this evaluation.
    fn on_evaluation(&mut self, _record: &LogRecord, _params: &ParameterSet<T>) -> Control {
        Control::Continue
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T = f64> {
    pub step: usize,
    pub adam: Adam<T>,
    pub best_valid_ce: Option<f64>,
    /// Consecutive evaluations without improvement.
    pub bad_evals: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f64> {
    /// Parameters at the best validation cross-entropy.
    pub best: ParameterSet<T>,
    pub best_valid_ce: f64,
    /// Parameters after the last step.
    pub last: ParameterSet<T>,
    pub log: Vec<LogRecord>,
    /// Training cross-entropy of every step's batch.
    pub step_losses: Vec<T>,
    pub stop: StopReason,
    pub state: TrainState<T>,
}

/// Training and validation data from disjoint streams of one seed.
pub fn task_data(task: &SyntheticTask, hyper: &TrainHyper) -> (Vec<crate::data::Pair>, Vec<crate::data::Pair>) {
    let mut train_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    train_rng.set_stream(1);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    valid_rng.set_stream(2);
    (
        task.generate_with(hyper.train_size, &mut train_rng),
        task.generate_with(hyper.valid_size, &mut valid_rng),
    )
}

/// Token-weighted cross-entropy of `params` over `batches`.
pub fn cross_entropy<T: Real>(params: &ParameterSet<T>, config: &ModelConfig, batches: &[Batch]) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut g = Graph::new();
        let bound = model::bind(&mut g, config, params, false)?;
        let v = model::nll_sum(&mut g, config, &bound, b)?;
        nll += g.values(v)[0].as_f64();
        tokens += b.target.tokens();
    }
    Ok(nll / tokens as f64)
}

pub fn train<T: Real>(
    config: &ModelConfig,
    init: ParameterSet<T>,
    task: &SyntheticTask,
    hyper: &TrainHyper,
    hooks: &mut impl TrainHooks<T>,
) -> Result<TrainOutcome<T>> {
    task.validate()?;
    if hyper.batch_size == 0 || hyper.eval_every == 0 || hyper.max_steps == 0 {
        return Err(Error::Config("batch_size, eval_every and max_steps must be positive".into()));
    }
    if task.vocab > config.src_vocab || task.vocab > config.tgt_vocab {
        return Err(Error::Config("task vocabulary exceeds the model vocabulary".into()));
    }
    let (train_pairs, valid_pairs) = task_data(task, hyper);
    let train_batches = make_batches(&train_pairs, hyper.batch_size)?;
    let valid_batches = make_batches(&valid_pairs, hyper.batch_size)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    order_rng.set_stream(3);
    let limit = 10.0 * libm_ln(config.tgt_vocab as f64);

    let mut params = init;
    let mut state = TrainState {
        step: 0,
        adam: Adam::new(&params),
        best_valid_ce: None,
        bad_evals: 0,
        seed: hyper.seed,
    };
    let mut best = params.clone();
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(hyper.max_steps);
    let mut order: Vec<usize> = Vec::new();
    let (mut interval_nll, mut interval_tokens) = (0.0f64, 0usize);
    let mut interval_start = hooks.seconds();

    let stop = loop {
        if order.is_empty() {
            order = (0..train_batches.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let batch = &train_batches[order.pop().expect("nonempty")];
        let mut grads = hooks.gradients(&params, config, batch)?;
        let tokens = T::of(grads.tokens as f64);
        let ce = grads.nll / tokens;
        state.step += 1;
        step_losses.push(ce);
        if state.step > hyper.warmup && (ce.as_f64().is_nan() || ce.as_f64() > limit) {
            return Err(Error::Diverged {
                step: state.step,
                ce: ce.as_f64(),
                limit,
            });
        }
        interval_nll += grads.nll.as_f64();
        interval_tokens += grads.tokens;
        grads.grads.iter_mut().flatten().for_each(|g| *g = *g / tokens);
        clip_global_norm(&mut grads.grads, hyper.clip_norm);
        state.adam.update(&mut params, &grads.grads, &hyper.adam)?;

        let last_step = state.step >= hyper.max_steps;
        if state.step % hyper.eval_every == 0 || last_step {
            let valid_ce = cross_entropy(&params, config, &valid_batches)?;
            let now = hooks.seconds();
            let elapsed = (now - interval_start).max(1e-9);
            let record = LogRecord {
                step: state.step,
                train_ce: interval_nll / interval_tokens as f64,
                valid_ce,
                tokens_per_s: interval_tokens as f64 / elapsed,
            };
            log.push(record);
            (interval_nll, interval_tokens) = (0.0, 0);
            if state.step > hyper.warmup && (valid_ce.is_nan() || valid_ce > limit) {
                return Err(Error::Diverged {
                    step: state.step,
                    ce: valid_ce,
                    limit,
                });
            }
            match state.best_valid_ce {
                Some(b) if valid_ce >= b => state.bad_evals += 1,
                _ => {
                    state.best_valid_ce = Some(valid_ce);
                    state.bad_evals = 0;
                    best = params.clone();
                }
            }
            let requested = hooks.on_evaluation(&record, &params) == Control::Stop;
            if state.bad_evals > hyper.patience {
                break StopReason::Patience;
            }
            if requested {
                break StopReason::Requested;
            }
            if last_step {
                break StopReason::MaxSteps;
            }
            interval_start = hooks.seconds();
        }
    };

    Ok(TrainOutcome {
        best,
        best_valid_ce: state.best_valid_ce.expect("at least one evaluation"),
        last: params,
        log,
        step_losses,
        stop,
        state,
    })
}

fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_streams_are_disjoint_and_deterministic() {
        let task = SyntheticTask::copy(20, 10);
        let hyper = TrainHyper {
            train_size: 50,
            valid_size: 50,
            ..TrainHyper::default()
        };
        let (a, b) = task_data(&task, &hyper);
        assert_ne!(a, b);
        assert_eq!(task_data(&task, &hyper), (a, b));
    }
}
