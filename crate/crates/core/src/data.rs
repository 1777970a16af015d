//! Synthetic tasks, framing and padded batches.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, EOS};

/// Appends the end-of-sequence token.
pub fn frame(tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.extend_from_slice(tokens);
    out.push(EOS);
    out
}

/// Right-padded token rows with their lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    rows: Vec<Vec<usize>>,
    lengths: Vec<usize>,
}

impl Padded {
    /// Pads with [`EOS`] to the longest row. Empty rows are rejected.
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if let Some(row) = lengths.iter().position(|&n| n == 0) {
            return Err(Error::EmptySequence(row));
        }
        let width = *lengths.iter().max().expect("nonempty");
        let rows = seqs
            .iter()
            .map(|s| {
                let mut r = s.as_ref().to_vec();
                r.resize(width, EOS);
                r
            })
            .collect();
        Ok(Self { rows, lengths })
    }

    /// Rows of equal width whose first `lengths[r]` tokens are real; the
    /// remaining tokens are arbitrary padding.
    pub fn from_rows(rows: Vec<Vec<usize>>, lengths: Vec<usize>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.len() != lengths.len() || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Invalid("padded rows must be nonempty and of equal width".into()));
        }
        if let Some(row) = lengths.iter().position(|&n| n == 0) {
            return Err(Error::EmptySequence(row));
        }
        if lengths.iter().any(|&n| n > width) {
            return Err(Error::Invalid("length exceeds padded width".into()));
        }
        Ok(Self { rows, lengths })
    }

    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    /// Padded length.
    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Unpadded row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r][..self.lengths[r]]
    }

    pub fn column(&self, i: usize) -> Vec<usize> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    pub fn column_mask(&self, i: usize) -> Vec<bool> {
        self.lengths.iter().map(|&n| i < n).collect()
    }

    pub fn column_full(&self, i: usize) -> bool {
        self.lengths.iter().all(|&n| i < n)
    }

    /// Row-major `[B×N]` mask, true at real tokens.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.len();
        self.lengths.iter().flat_map(|&len| (0..n).map(move |i| i < len)).collect()
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// A padded source/target batch. Sequences are used exactly as given.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Padded,
    pub target: Padded,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(sources: &[S], targets: &[S]) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::Invalid("source and target counts differ".into()));
        }
        Ok(Self {
            source: Padded::new(sources)?,
            target: Padded::new(targets)?,
        })
    }

    /// Frames both sides of every pair with [`EOS`].
    pub fn framed(pairs: &[Pair]) -> Result<Self> {
        let sources: Vec<_> = pairs.iter().map(|p| frame(&p.source)).collect();
        let targets: Vec<_> = pairs.iter().map(|p| frame(&p.target)).collect();
        Self::new(&sources, &targets)
    }

    pub fn size(&self) -> usize {
        self.source.batch()
    }
}

/// An unframed sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Length-sorted bucketing: pairs are sorted by (target, source) length, cut
/// into consecutive batches, and framed. Every pair lands in exactly one batch.
pub fn make_batches(pairs: &[Pair], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len(), i));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let group: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            Batch::framed(&group)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Agreement,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(Self::Copy),
            "reverse" => Some(Self::Reverse),
            "agreement" => Some(Self::Agreement),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Agreement => "agreement",
        }
    }
}

/// Token layout of the agreement task.
///
/// Sentences start with a subject marker (singular or plural), followed by
/// `d − 1` filler tokens and a verb lemma, then a few trailing fillers. The
/// target copies the source except that the lemma becomes the verb form
/// agreeing with the subject, exactly `d` positions after it.
pub mod agreement {
    pub const SUBJ_SG: usize = 2;
    pub const SUBJ_PL: usize = 3;
    pub const FIRST_LEMMA: usize = 4;

    pub fn lemma(i: usize) -> usize {
        FIRST_LEMMA + 3 * i
    }

    pub fn singular(i: usize) -> usize {
        lemma(i) + 1
    }

    pub fn plural(i: usize) -> usize {
        lemma(i) + 2
    }

    pub fn first_filler(lemmas: usize) -> usize {
        FIRST_LEMMA + 3 * lemmas
    }

    /// The other number's verb form, if `token` is a verb form.
    pub fn flip(token: usize, lemmas: usize) -> Option<usize> {
        if token < FIRST_LEMMA || token >= first_filler(lemmas) {
            return None;
        }
        match (token - FIRST_LEMMA) % 3 {
            1 => Some(token + 1),
            2 => Some(token - 1),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Shared source/target vocabulary size, including EOS and UNK.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Agreement: number of verb lemmas.
    pub lemmas: usize,
    /// Agreement: subject-verb distance is uniform in `1..=max_distance`.
    pub max_distance: usize,
    /// Agreement: trailing fillers are uniform in `0..=max_trailing`.
    pub max_trailing: usize,
}

impl SyntheticTask {
    pub fn copy(vocab: usize, max_len: usize) -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab,
            min_len: 1,
            max_len,
            lemmas: 0,
            max_distance: 0,
            max_trailing: 0,
        }
    }

    pub fn reverse(vocab: usize, max_len: usize) -> Self {
        Self {
            kind: TaskKind::Reverse,
            ..Self::copy(vocab, max_len)
        }
    }

    pub fn agreement(lemmas: usize, fillers: usize, max_distance: usize) -> Self {
        Self {
            kind: TaskKind::Agreement,
            vocab: agreement::first_filler(lemmas) + fillers,
            min_len: 1,
            max_len: max_distance + 3,
            lemmas,
            max_distance,
            max_trailing: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                if self.vocab < 3 {
                    return bad("task vocab must be at least 3");
                }
                if self.min_len == 0 || self.min_len > self.max_len {
                    return bad("task length range must satisfy 1 <= min_len <= max_len");
                }
            }
            TaskKind::Agreement => {
                if self.lemmas == 0 || self.max_distance == 0 {
                    return bad("agreement task needs lemmas >= 1 and max_distance >= 1");
                }
                if self.vocab <= agreement::first_filler(self.lemmas) {
                    return bad("agreement task needs at least one filler token");
                }
            }
        }
        Ok(())
    }

    fn agreement_example(&self, distance: usize, rng: &mut ChaCha8Rng) -> (Pair, usize) {
        use agreement::*;
        let first = first_filler(self.lemmas);
        let mut source = Vec::with_capacity(distance + 1 + self.max_trailing);
        let plural_subject = rng.gen_bool(0.5);
        source.push(if plural_subject { SUBJ_PL } else { SUBJ_SG });
        for _ in 1..distance {
            source.push(rng.gen_range(first..self.vocab));
        }
        let lemma_idx = rng.gen_range(0..self.lemmas);
        let verb_pos = source.len();
        source.push(lemma(lemma_idx));
        let trailing = rng.gen_range(0..=self.max_trailing);
        for _ in 0..trailing {
            source.push(rng.gen_range(first..self.vocab));
        }
        let mut target = source.clone();
        target[verb_pos] = if plural_subject {
            plural(lemma_idx)
        } else {
            singular(lemma_idx)
        };
        (Pair { source, target }, verb_pos)
    }

    /// `n` pairs, fully determined by `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate_with(n, &mut rng)
    }

    pub fn generate_with(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Pair> {
        (0..n)
            .map(|_| match self.kind {
                TaskKind::Copy | TaskKind::Reverse => {
                    let len = rng.gen_range(self.min_len..=self.max_len);
                    let source: Vec<usize> = (0..len).map(|_| rng.gen_range(2..self.vocab)).collect();
                    let mut target = source.clone();
                    if self.kind == TaskKind::Reverse {
                        target.reverse();
                    }
                    Pair { source, target }
                }
                TaskKind::Agreement => {
                    let d = rng.gen_range(1..=self.max_distance);
                    self.agreement_example(d, rng).0
                }
            })
            .collect()
    }

    /// Agreement pair at a fixed distance, with its verb position.
    pub fn agreement_at(&self, distance: usize, rng: &mut ChaCha8Rng) -> (Pair, usize) {
        self.agreement_example(distance, rng)
    }

    /// Contrastive items for the agreement task, distances uniform in
    /// `1..=max_distance`.
    pub fn contrastive_items(&self, n: usize, seed: u64) -> Vec<crate::eval::ContrastiveItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::with_capacity(n);
        let mut distances: Vec<usize> = (0..n).map(|i| 1 + i % self.max_distance).collect();
        distances.shuffle(&mut rng);
        for d in distances {
            let (pair, verb) = self.agreement_example(d, &mut rng);
            let mut contrastive = pair.target.clone();
            contrastive[verb] = agreement::flip(contrastive[verb], self.lemmas).expect("verb form");
            items.push(crate::eval::ContrastiveItem {
                source: frame(&pair.source),
                reference: frame(&pair.target),
                contrastive: frame(&contrastive),
                distance: d,
                category: "subject-verb agreement".into(),
            });
        }
        items
    }
}
