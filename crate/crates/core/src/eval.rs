//! Evaluation: contrastive-pair accuracy by distance, token accuracy and a
//! lightweight corpus BLEU.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::score_sequence;
use crate::{Error, ModelConfig, ParameterSet, Real, Result};

/// Distances at or above this share one bucket.
pub const LAST_BUCKET: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveItem {
    pub source: Vec<usize>,
    pub reference: Vec<usize>,
    pub contrastive: Vec<usize>,
    pub distance: usize,
    pub category: String,
}

impl ContrastiveItem {
    pub fn validate(&self) -> Result<()> {
        if self.reference == self.contrastive {
            return Err(Error::Invalid("reference and contrastive target are identical".into()));
        }
        if self.distance == 0 {
            return Err(Error::Invalid("distance must be at least 1".into()));
        }
        Ok(())
    }
}

/// Bucket key: the distance itself below [`LAST_BUCKET`], else `LAST_BUCKET`.
pub fn bucket(distance: usize) -> usize {
    distance.min(LAST_BUCKET)
}

pub fn bucket_label(key: usize) -> String {
    if key >= LAST_BUCKET {
        alloc::format!(">={LAST_BUCKET}")
    } else {
        alloc::format!("{key}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BucketCount {
    pub correct: usize,
    pub count: usize,
}

impl BucketCount {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Per-bucket accuracy, keyed by [`bucket`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DistanceBucketReport {
    pub buckets: BTreeMap<usize, BucketCount>,
}

impl DistanceBucketReport {
    pub fn from_decisions(items: &[ContrastiveItem], correct: &[bool]) -> Self {
        let mut buckets = BTreeMap::new();
        for (item, &ok) in items.iter().zip(correct) {
            let b: &mut BucketCount = buckets.entry(bucket(item.distance)).or_default();
            b.count += 1;
            b.correct += usize::from(ok);
        }
        Self { buckets }
    }

    pub fn overall(&self) -> BucketCount {
        self.buckets.values().fold(BucketCount::default(), |a, b| BucketCount {
            correct: a.correct + b.correct,
            count: a.count + b.count,
        })
    }

    pub fn get(&self, key: usize) -> BucketCount {
        self.buckets.get(&key).copied().unwrap_or_default()
    }
}

/// Whether the model strictly prefers the reference. Ties are wrong.
pub fn prefers_reference<T: Real>(params: &ParameterSet<T>, config: &ModelConfig, item: &ContrastiveItem) -> Result<bool> {
    item.validate()?;
    let (good, _) = score_sequence(params, config, &item.source, &item.reference)?;
    let (bad, _) = score_sequence(params, config, &item.source, &item.contrastive)?;
    Ok(good > bad)
}

pub fn contrastive_eval<T: Real>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    items: &[ContrastiveItem],
) -> Result<DistanceBucketReport> {
    if items.is_empty() {
        return Err(Error::Invalid("no contrastive items".into()));
    }
    let decisions = items
        .iter()
        .map(|item| prefers_reference(params, config, item))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceBucketReport::from_decisions(items, &decisions))
}

/// Fraction of reference positions whose token the hypothesis reproduces at
/// the same position.
pub fn token_accuracy(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid("hypothesis and reference counts differ".into()));
    }
    let total: usize = references.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Invalid("references contain no tokens".into()));
    }
    let hits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: clipped n-gram precisions for n = 1..=max_n (add-one
/// smoothing for n ≥ 2), geometric mean, brevity penalty.
pub fn corpus_bleu_lite(hypotheses: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    use num_traits::Float;
    if hypotheses.is_empty() || hypotheses.len() != references.len() || max_n == 0 {
        return Err(Error::Invalid("BLEU needs equally many nonempty hypotheses and references".into()));
    }
    let mut matches = alloc::vec![0usize; max_n];
    let mut totals = alloc::vec![0usize; max_n];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if n == 0 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        };
        if m == 0.0 {
            return Ok(0.0);
        }
        log_sum += Float::ln(m / t);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        Float::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(bp * Float::exp(log_sum / max_n as f64))
}
