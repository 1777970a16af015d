//! `RunConfig`: the model configuration plus task, optimizer and path
//! settings, in the same flat `section.key = value` text form.

use std::fmt::{self, Write};
use std::path::PathBuf;

use deep_rnmt_core::config::parse_lines;
use deep_rnmt_core::data::{SyntheticTask, TaskKind};
use deep_rnmt_core::train::TrainHyper;
use deep_rnmt_core::ModelConfig;

/// An invalid configuration or override. Reported with exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<deep_rnmt_core::Error> for ConfigError {
    fn from(e: deep_rnmt_core::Error) -> Self {
        match e {
            deep_rnmt_core::Error::Config(m) => ConfigError(m),
            other => ConfigError(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Word list, one entry per line; line `i` is token id `i`.
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub train: TrainHyper,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: SyntheticTask {
                kind: TaskKind::Copy,
                vocab: 20,
                min_len: 1,
                max_len: 10,
                lemmas: 4,
                max_distance: 16,
                max_trailing: 2,
            },
            train: TrainHyper::default(),
            paths: Paths {
                checkpoint: "model.ckpt".into(),
                log: "train.log".into(),
                vocab: None,
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then `text`, then each override in order, then validation.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        if let Some(text) = text {
            for (k, v) in parse_lines(text)? {
                config.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override `{o}` is not key=value")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |e: &dyn fmt::Display| ConfigError(format!("{key} = {value}: {e}"));
        let num = || value.parse::<usize>().map_err(|e| bad(&e));
        let real = || value.parse::<f64>().map_err(|e| bad(&e));
        if ModelConfig::owns_key(key) {
            self.model.set(key, value)?;
            return Ok(());
        }
        let (t, h) = (&mut self.task, &mut self.train);
        match key {
            "task.kind" => t.kind = TaskKind::parse(value).ok_or_else(|| bad(&"expected copy, reverse or agreement"))?,
            "task.vocab" => t.vocab = num()?,
            "task.min_len" => t.min_len = num()?,
            "task.max_len" => t.max_len = num()?,
            "task.lemmas" => t.lemmas = num()?,
            "task.max_distance" => t.max_distance = num()?,
            "task.max_trailing" => t.max_trailing = num()?,
            "train.lr" => h.adam.lr = real()?,
            "train.beta1" => h.adam.beta1 = real()?,
            "train.beta2" => h.adam.beta2 = real()?,
            "train.eps" => h.adam.eps = real()?,
            "train.clip_norm" => h.clip_norm = real()?,
            "train.batch_size" => h.batch_size = num()?,
            "train.eval_every" => h.eval_every = num()?,
            "train.patience" => h.patience = num()?,
            "train.max_steps" => h.max_steps = num()?,
            "train.warmup" => h.warmup = num()?,
            "train.train_size" => h.train_size = num()?,
            "train.valid_size" => h.valid_size = num()?,
            "paths.checkpoint" => self.paths.checkpoint = value.into(),
            "paths.log" => self.paths.log = value.into(),
            "paths.vocab" => self.paths.vocab = (!value.is_empty()).then(|| value.into()),
            _ => return Err(ConfigError(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(mut self) -> Result<Self, ConfigError> {
        self.model = self.model.validate()?;
        self.train.seed = self.model.seed;
        self.task.validate()?;
        let h = &self.train;
        if h.batch_size == 0 || h.eval_every == 0 || h.max_steps == 0 || h.train_size == 0 || h.valid_size == 0 {
            return Err(ConfigError("train sizes, steps and intervals must be positive".into()));
        }
        if !(h.adam.lr > 0.0 && h.clip_norm > 0.0 && h.adam.eps > 0.0) {
            return Err(ConfigError("train.lr, train.eps and train.clip_norm must be positive".into()));
        }
        if !((0.0..1.0).contains(&h.adam.beta1) && (0.0..1.0).contains(&h.adam.beta2)) {
            return Err(ConfigError("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.task.vocab > self.model.src_vocab || self.task.vocab > self.model.tgt_vocab {
            return Err(ConfigError(format!(
                "task.vocab {} exceeds the model vocabularies ({}, {})",
                self.task.vocab, self.model.src_vocab, self.model.tgt_vocab
            )));
        }
        Ok(self)
    }

    /// Canonical text; [`RunConfig::load`] of it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        let (t, h) = (&self.task, &self.train);
        let mut line = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("task.kind", &t.kind.as_str());
        line("task.vocab", &t.vocab);
        line("task.min_len", &t.min_len);
        line("task.max_len", &t.max_len);
        line("task.lemmas", &t.lemmas);
        line("task.max_distance", &t.max_distance);
        line("task.max_trailing", &t.max_trailing);
        line("train.lr", &h.adam.lr);
        line("train.beta1", &h.adam.beta1);
        line("train.beta2", &h.adam.beta2);
        line("train.eps", &h.adam.eps);
        line("train.clip_norm", &h.clip_norm);
        line("train.batch_size", &h.batch_size);
        line("train.eval_every", &h.eval_every);
        line("train.patience", &h.patience);
        line("train.max_steps", &h.max_steps);
        line("train.warmup", &h.warmup);
        line("train.train_size", &h.train_size);
        line("train.valid_size", &h.valid_size);
        line("paths.checkpoint", &self.paths.checkpoint.display());
        line("paths.log", &self.paths.log.display());
        let vocab = self.paths.vocab.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        line("paths.vocab", &vocab);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_apply_left_to_right() {
        let c = RunConfig::load(Some("seed = 3\ntrain.lr = 0.01"), &strings(&["seed=4", "train.lr = 0.5", "seed=9"])).unwrap();
        assert_eq!(c.model.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.adam.lr, 0.5);
    }

    #[test]
    fn text_round_trips() {
        let c = RunConfig::load(
            None,
            &strings(&[
                "decoder.kind=bideep",
                "decoder.depths=4,2",
                "task.kind=agreement",
                "task.max_distance=20",
                "train.lr=0.0003",
                "paths.vocab=words.txt",
            ]),
        )
        .unwrap();
        let back = RunConfig::load(Some(&c.to_text()), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn unknown_and_invalid_settings_are_rejected() {
        assert!(RunConfig::load(Some("train.momentum = 0.9"), &[]).is_err());
        assert!(RunConfig::load(None, &strings(&["seed"])).is_err());
        assert!(RunConfig::load(None, &strings(&["task.vocab=50"])).is_err());
        assert!(RunConfig::load(None, &strings(&["train.beta1=1.5"])).is_err());
        assert!(RunConfig::load(None, &strings(&["decoder.kind=deep_transition", "decoder.depths=1"])).is_err());
    }
}
