//! Subcommand implementations, independent of argument parsing.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use anyhow::{Context, Result};
use deep_rnmt_core::autodiff::Fault;
use deep_rnmt_core::data::{Batch, SyntheticTask};
use deep_rnmt_core::eval::{bucket_label, prefers_reference, ContrastiveItem, DistanceBucketReport};
use deep_rnmt_core::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use deep_rnmt_core::model::{nll_gradients, score_sequence, Gradients};
use deep_rnmt_core::params::{count_params, init_params};
use deep_rnmt_core::search::{decode, Hypothesis};
use deep_rnmt_core::train::{train, Control, LogRecord, TrainHooks, TrainOutcome};
use deep_rnmt_core::{ModelConfig, ParameterSet};
use rayon::prelude::*;

use crate::files::write_checkpoint;
use crate::run_config::{ConfigError, RunConfig};

/// A rayon pool capped at `workers` threads.
pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("starting worker threads")
}

/// Summed NLL gradient of `batch`. One worker uses the batched graph; more
/// workers compute per-example gradients and add them in example order, so
/// the result is the same for every worker count above one.
pub fn batch_gradients(params: &ParameterSet, config: &ModelConfig, batch: &Batch, pool: Option<&rayon::ThreadPool>) -> deep_rnmt_core::Result<Gradients> {
    let Some(pool) = pool else {
        return nll_gradients(params, config, batch);
    };
    let examples: Vec<Batch> = (0..batch.size())
        .map(|r| {
            let s = &batch.source.row(r)[..batch.source.lengths()[r]];
            let t = &batch.target.row(r)[..batch.target.lengths()[r]];
            Batch::new(&[s], &[t])
        })
        .collect::<deep_rnmt_core::Result<_>>()?;
    let parts: Vec<Gradients> = pool.install(|| {
        examples
            .par_iter()
            .map(|b| nll_gradients(params, config, b))
            .collect::<deep_rnmt_core::Result<_>>()
    })?;
    let mut total = Gradients::zeros(params);
    for p in &parts {
        total.accumulate(p);
    }
    Ok(total)
}

struct CliHooks<W: Write> {
    start: Instant,
    pool: Option<rayon::ThreadPool>,
    log: W,
    io_error: Option<std::io::Error>,
}

impl<W: Write> TrainHooks<f64> for CliHooks<W> {
    fn seconds(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn gradients(&mut self, params: &ParameterSet, config: &ModelConfig, batch: &Batch) -> deep_rnmt_core::Result<Gradients> {
        batch_gradients(params, config, batch, self.pool.as_ref())
    }

    fn on_evaluation(&mut self, r: &LogRecord, _: &ParameterSet) -> Control {
        log::info!("step {} train_ce {:.4} valid_ce {:.4} tokens/s {:.0}", r.step, r.train_ce, r.valid_ce, r.tokens_per_s);
        let line = format!("{}\t{}\t{}\t{}\n", r.step, r.train_ce, r.valid_ce, r.tokens_per_s);
        match self.log.write_all(line.as_bytes()).and_then(|_| self.log.flush()) {
            Ok(()) => Control::Continue,
            Err(e) => {
                self.io_error = Some(e);
                Control::Stop
            }
        }
    }
}

/// Trains on the configured task, writing the training log as it goes and
/// the best checkpoint at the end.
pub fn run_train(config: &RunConfig, workers: usize) -> Result<TrainOutcome> {
    log::info!("effective configuration:\n{}", config.to_text());
    let log_file = File::create(&config.paths.log).with_context(|| format!("creating {}", config.paths.log.display()))?;
    let mut hooks = CliHooks {
        start: Instant::now(),
        pool: if workers > 1 { Some(pool(workers)?) } else { None },
        log: BufWriter::new(log_file),
        io_error: None,
    };
    let init = init_params(&config.model, config.model.seed)?;
    let outcome = train(&config.model, init, &config.task, &config.train, &mut hooks)?;
    if let Some(e) = hooks.io_error {
        return Err(e).with_context(|| format!("writing {}", config.paths.log.display()));
    }
    write_checkpoint(&config.paths.checkpoint, &outcome.best, &config.model)?;
    log::info!(
        "stopped ({:?}) after {} steps; best valid_ce {:.4}; checkpoint {}",
        outcome.stop,
        outcome.state.step,
        outcome.best_valid_ce,
        config.paths.checkpoint.display()
    );
    Ok(outcome)
}

/// Decodes every source, in input order.
pub fn translate(
    params: &ParameterSet,
    config: &ModelConfig,
    sources: &[Vec<usize>],
    beam: usize,
    max_len: Option<usize>,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Hypothesis>> {
    pool.install(|| {
        sources
            .par_iter()
            .map(|s| {
                let limit = max_len.unwrap_or(2 * s.len() + 10);
                Ok(decode(params, config, s, beam, limit)?)
            })
            .collect()
    })
}

/// Total log-probability of each (source, target) pair.
pub fn score(params: &ParameterSet, config: &ModelConfig, pairs: &[(Vec<usize>, Vec<usize>)], pool: &rayon::ThreadPool) -> Result<Vec<f64>> {
    pool.install(|| {
        pairs
            .par_iter()
            .map(|(s, t)| Ok(score_sequence(params, config, s, t)?.0))
            .collect()
    })
}

/// Contrastive decisions computed in parallel and merged in item order.
pub fn contrast_eval(
    params: &ParameterSet,
    config: &ModelConfig,
    items: &[ContrastiveItem],
    pool: &rayon::ThreadPool,
) -> Result<DistanceBucketReport> {
    anyhow::ensure!(!items.is_empty(), "no contrastive items");
    let decisions: Vec<bool> = pool.install(|| {
        items
            .par_iter()
            .map(|item| prefers_reference(params, config, item))
            .collect::<deep_rnmt_core::Result<_>>()
    })?;
    Ok(DistanceBucketReport::from_decisions(items, &decisions))
}

/// Human-readable bucket table.
pub fn bucket_table(report: &DistanceBucketReport) -> String {
    let mut out = String::from("distance\tn\taccuracy\n");
    for (&k, b) in &report.buckets {
        let _ = writeln!(out, "{}\t{}\t{:.4}", bucket_label(k), b.count, b.accuracy());
    }
    let all = report.overall();
    let _ = writeln!(out, "all\t{}\t{:.4}", all.count, all.accuracy());
    out
}

/// Two numeric columns, distance and accuracy; the last bucket is keyed by
/// its lower bound.
pub fn plot_data(report: &DistanceBucketReport) -> String {
    let mut out = String::new();
    for (&k, b) in &report.buckets {
        let _ = writeln!(out, "{k}\t{}", b.accuracy());
    }
    out
}

pub fn params_report(config: &ModelConfig) -> String {
    let count = count_params(config);
    let mut out = String::new();
    for (name, n) in &count.components {
        let _ = writeln!(out, "{name}\t{n}");
    }
    let _ = writeln!(out, "total\t{}", count.total);
    out
}

/// Every architecture shape, at the dimensions and vocabularies of `base`.
pub fn matrix_configs(base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>, ConfigError> {
    type Shape<'a> = (&'a str, &'a [(&'a str, &'a str)]);
    let enc: &[Shape] = &[
        ("shallow", &[("encoder.kind", "shallow")]),
        ("deep_transition(L=4)", &[("encoder.kind", "deep_transition"), ("encoder.depths", "4")]),
        ("alternating(D=4)", &[("encoder.kind", "alternating"), ("encoder.depth", "4")]),
        ("biunidirectional(D=4)", &[("encoder.kind", "biunidirectional"), ("encoder.depth", "4")]),
        ("mixed(2+2)", &[("encoder.kind", "mixed"), ("encoder.depth", "4"), ("encoder.alt_layers", "2"), ("encoder.uni_layers", "2")]),
        ("bideep(2,2)", &[("encoder.kind", "bideep"), ("encoder.depths", "2,2")]),
        ("bideep(4,4)", &[("encoder.kind", "bideep"), ("encoder.depths", "4,4")]),
    ];
    let dec: &[Shape] = &[
        ("baseline", &[("decoder.kind", "baseline")]),
        ("deep_transition(L=8)", &[("decoder.kind", "deep_transition"), ("decoder.depths", "8")]),
        ("stacked gru(D=4)", &[("decoder.kind", "stacked"), ("decoder.variant", "gru"), ("decoder.depth", "4")]),
        ("stacked rgru(D=4)", &[("decoder.kind", "stacked"), ("decoder.variant", "rgru"), ("decoder.depth", "4")]),
        ("stacked crgru(D=4)", &[("decoder.kind", "stacked"), ("decoder.variant", "crgru"), ("decoder.depth", "4")]),
        ("stacked cgru(D=4)", &[("decoder.kind", "stacked"), ("decoder.variant", "cgru"), ("decoder.depth", "4")]),
        ("bideep(4/2)", &[("decoder.kind", "bideep"), ("decoder.depths", "4,2")]),
        ("bideep(4/2/2/2)", &[("decoder.kind", "bideep"), ("decoder.depths", "4,2,2,2")]),
    ];
    let mut rows: Vec<(Shape, Shape)> = Vec::new();
    for &e in enc {
        rows.push((e, dec[0]));
    }
    for &d in &dec[1..] {
        rows.push((enc[0], d));
    }
    rows.extend([(enc[1], dec[1]), (enc[5], dec[6]), (enc[6], dec[7])]);
    rows.into_iter()
        .map(|((en, e), (dn, d))| {
            let mut c = base.clone();
            c.encoder = deep_rnmt_core::EncoderConfig {
                hidden: base.encoder.hidden,
                embedding: base.encoder.embedding,
                ..Default::default()
            };
            c.decoder = deep_rnmt_core::DecoderConfig {
                hidden: base.decoder.hidden,
                embedding: base.decoder.embedding,
                ..Default::default()
            };
            for (k, v) in e.iter().chain(d.iter()) {
                c.set(k, v)?;
            }
            Ok((format!("{en}\t{dn}"), c.validate()?))
        })
        .collect()
}

pub fn matrix_report(base: &ModelConfig) -> Result<String, ConfigError> {
    let mut out = String::from("encoder\tdecoder\tparameters\n");
    for (label, c) in matrix_configs(base)? {
        let _ = writeln!(out, "{label}\t{}", count_params(&c).total);
    }
    Ok(out)
}

/// Finite-difference check of the configured architecture at tiny
/// dimensions (hidden 5, embedding 4, vocabulary 7).
pub fn run_gradcheck(config: &ModelConfig, inject_fault: bool) -> Result<GradcheckReport> {
    let mut tiny = config.clone();
    for (k, v) in [
        ("encoder.hidden", "5"),
        ("encoder.embedding", "4"),
        ("decoder.hidden", "5"),
        ("decoder.embedding", "4"),
        ("model.src_vocab", "7"),
        ("model.tgt_vocab", "7"),
    ] {
        tiny.set(k, v)?;
    }
    let tiny = tiny.validate()?;
    let mut params = init_params::<f64>(&tiny, tiny.seed)?;
    // Move biases and gains off their initial constants so every path carries
    // a gradient.
    for (i, t) in params.tensors_mut().enumerate() {
        for (k, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.05 * (((i * 31 + k * 17) % 13) as f64 - 6.0) / 6.0;
        }
    }
    let pairs = SyntheticTask::copy(7, 3).generate(2, tiny.seed);
    let batch = Batch::framed(&pairs)?;
    let options = GradcheckOptions {
        fault: inject_fault.then_some(Fault::ScaleTanhGrad(1.5)),
        ..GradcheckOptions::default()
    };
    Ok(gradcheck(&tiny, &params, &batch, &options)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_covers_every_kind() {
        use deep_rnmt_core::{CellVariant, DecoderKind, EncoderKind};
        let rows = matrix_configs(&ModelConfig::default()).unwrap();
        for k in EncoderKind::ALL {
            assert!(rows.iter().any(|(_, c)| c.encoder.kind == *k), "{k}");
        }
        for k in DecoderKind::ALL {
            assert!(rows.iter().any(|(_, c)| c.decoder.kind == *k), "{k}");
        }
        for v in CellVariant::ALL {
            assert!(rows.iter().any(|(_, c)| c.decoder.kind == DecoderKind::Stacked && c.decoder.variant == *v), "{v}");
        }
    }

    #[test]
    fn worker_counts_agree() {
        let c = RunConfig::load(None, &["encoder.hidden=6".into(), "decoder.hidden=6".into()]).unwrap().model;
        let p = init_params::<f64>(&c, 1).unwrap();
        let batch = Batch::framed(&SyntheticTask::copy(20, 6).generate(7, 2)).unwrap();
        let two = batch_gradients(&p, &c, &batch, Some(&pool(2).unwrap())).unwrap();
        let three = batch_gradients(&p, &c, &batch, Some(&pool(3).unwrap())).unwrap();
        assert_eq!(two, three);
        let one = batch_gradients(&p, &c, &batch, None).unwrap();
        assert_eq!(one.tokens, two.tokens);
        assert!((one.nll - two.nll).abs() < 1e-9);
        for (a, b) in one.grads.iter().flatten().zip(two.grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn plot_data_is_numeric() {
        use deep_rnmt_core::eval::ContrastiveItem;
        let item = |d| ContrastiveItem {
            source: vec![2, 0],
            reference: vec![3, 0],
            contrastive: vec![4, 0],
            distance: d,
            category: "x".into(),
        };
        let items = [item(1), item(1), item(20)];
        let report = DistanceBucketReport::from_decisions(&items, &[true, false, true]);
        assert_eq!(plot_data(&report), "1\t0.5\n16\t1\n");
        assert!(bucket_table(&report).contains(">=16\t1\t1.0000"));
    }
}
