//! On-disk formats: checkpoints, word lists, sentence files and the
//! contrastive TSV.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use deep_rnmt_core::checkpoint::{from_bytes, to_bytes};
use deep_rnmt_core::data::frame;
use deep_rnmt_core::eval::ContrastiveItem;
use deep_rnmt_core::{ModelConfig, ParameterSet, EOS, UNK};

pub fn write_checkpoint(path: &Path, params: &ParameterSet, config: &ModelConfig) -> Result<()> {
    // Write beside the target and rename, so a reader never sees a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(params, config)).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParameterSet, ModelConfig)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// What to do with a token that is neither a known word nor a valid id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum UnkPolicy {
    Error,
    Unk,
}

/// Maps text tokens to ids. Tokens are looked up as words first (when a
/// word list is loaded), then read as numeric ids.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vocab_size: usize,
    unk: UnkPolicy,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, unk: UnkPolicy) -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
            vocab_size,
            unk,
        }
    }

    pub fn with_words(path: &Path, vocab_size: usize, unk: UnkPolicy) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if words.len() > vocab_size {
            bail!("{} lists {} words but the model vocabulary has {vocab_size}", path.display(), words.len());
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if !w.is_empty() && index.insert(w.clone(), i).is_some() {
                bail!("{}: word `{w}` listed twice", path.display());
            }
        }
        Ok(Self { words, index, vocab_size, unk })
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        if let Some(&i) = self.index.get(token) {
            return Ok(i);
        }
        match token.parse::<usize>() {
            Ok(i) if i < self.vocab_size => Ok(i),
            _ => match self.unk {
                UnkPolicy::Unk => Ok(UNK),
                UnkPolicy::Error => bail!("unknown token `{token}`"),
            },
        }
    }

    /// Space-separated tokens, without end-of-sequence.
    pub fn encode(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Output text for ids, dropping a trailing end-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> String {
        let ids = match ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => ids,
        };
        ids.iter()
            .map(|&i| self.words.get(i).filter(|w| !w.is_empty()).cloned().unwrap_or_else(|| i.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Columns: source, reference, contrastive, distance, category.
pub fn parse_contrastive(text: &str, tokens: &Tokenizer) -> Result<Vec<ContrastiveItem>> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_row(line, tokens).with_context(|| format!("line {}", n + 1))?;
        items.push(item);
    }
    Ok(items)
}

fn parse_row(line: &str, tokens: &Tokenizer) -> Result<ContrastiveItem> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        bail!("expected 5 tab-separated columns, found {}", cols.len());
    }
    let sentence = |i: usize, what: &str| -> Result<Vec<usize>> {
        let ids = tokens.encode(cols[i]).with_context(|| format!("{what} column"))?;
        if ids.is_empty() {
            bail!("{what} column is empty");
        }
        Ok(frame(&ids))
    };
    let item = ContrastiveItem {
        source: sentence(0, "source")?,
        reference: sentence(1, "reference")?,
        contrastive: sentence(2, "contrastive")?,
        distance: cols[3].trim().parse().with_context(|| format!("distance `{}`", cols[3]))?,
        category: cols[4].trim().to_string(),
    };
    item.validate()?;
    Ok(item)
}
