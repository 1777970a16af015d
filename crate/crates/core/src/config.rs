//! Architecture configuration, validation and the canonical text form.
//!
//! The text form is a flat list of `section.key = value` lines. It is what
//! checkpoints embed, so every value must survive a round trip unchanged.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($name)
                    ))),
                }
            }
        }

        impl core::fmt::Display for $name {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(
    /// Encoder topology.
    EncoderKind {
        Shallow => "shallow",
        DeepTransition => "deep_transition",
        Alternating => "alternating",
        Biunidirectional => "biunidirectional",
        Bideep => "bideep" | "bideep_alternating",
        Mixed => "mixed",
    }
);

keyword_enum!(
    /// Decoder topology.
    DecoderKind {
        Baseline => "baseline",
        DeepTransition => "deep_transition",
        Stacked => "stacked",
        Bideep => "bideep",
    }
);

keyword_enum!(
    /// Cell used by the higher levels of a stacked or BiDeep decoder.
    CellVariant {
        Gru => "gru",
        Rgru => "rgru",
        Cgru => "cgru",
        Crgru => "crgru",
    }
);

keyword_enum!(
    /// What the first output layer consumes.
    OutputInputs {
        Full => "full",
        StateOnly => "state_only",
    }
);

impl CellVariant {
    /// Whether the higher levels are two-transition conditional cells.
    pub fn is_conditional(self) -> bool {
        matches!(self, CellVariant::Cgru | CellVariant::Crgru)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Total stack depth D_s.
    pub stack_depth: usize,
    /// Alternating levels D_sa (mixed only).
    pub alt_layers: usize,
    /// Forward-only levels D_sb (mixed only).
    pub uni_layers: usize,
    /// Transition depth per alternating level; after validation the length
    /// equals the number of alternating levels.
    pub transition_depths: Vec<usize>,
    pub hidden: usize,
    pub embedding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub variant: CellVariant,
    /// Stack depth D_t.
    pub stack_depth: usize,
    /// Transition depth per level, base first (`[4, 2]` = 4 in the base
    /// cell, 2 in the level above). Normalized to length D_t.
    pub transition_depths: Vec<usize>,
    pub output_depth: usize,
    pub output_inputs: OutputInputs,
    pub hidden: usize,
    pub embedding: usize,
    /// Feed the base level's first-transition state into the second
    /// transition of higher cGRU/crGRU levels instead of the level's own.
    pub literal_conditional_state: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub layer_norm: bool,
    pub tied_embeddings: bool,
    pub seed: u64,
}

/// The alternating part and forward-only part of a validated encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayout {
    pub alt_depths: Vec<usize>,
    pub uni_levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Shallow,
            stack_depth: 1,
            alt_layers: 1,
            uni_layers: 0,
            transition_depths: vec![1],
            hidden: 32,
            embedding: 32,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Baseline,
            variant: CellVariant::Gru,
            stack_depth: 1,
            transition_depths: vec![2],
            output_depth: 1,
            output_inputs: OutputInputs::Full,
            hidden: 32,
            embedding: 32,
            literal_conditional_state: false,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            src_vocab: 20,
            tgt_vocab: 20,
            layer_norm: true,
            tied_embeddings: false,
            seed: 1,
        }
    }
}

fn reject(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn expand_uniform(depths: &[usize], levels: usize, value: usize, what: &str) -> Result<Vec<usize>> {
    if depths.iter().any(|&d| d != value) || !(depths.len() == 1 || depths.len() == levels) {
        return Err(reject(format!(
            "{what} requires transition depth {value} at every level, got {depths:?}"
        )));
    }
    Ok(vec![value; levels])
}

impl EncoderConfig {
    fn validate(&mut self) -> Result<()> {
        if self.hidden == 0 || self.embedding == 0 {
            return Err(reject("encoder dimensions must be positive"));
        }
        if self.stack_depth == 0 {
            return Err(reject("encoder.depth must be at least 1"));
        }
        if self.transition_depths.is_empty() || self.transition_depths.contains(&0) {
            return Err(reject("encoder transition depths must be at least 1"));
        }
        let d = self.stack_depth;
        match self.kind {
            EncoderKind::Shallow => {
                if d != 1 {
                    return Err(reject("shallow encoder requires depth 1"));
                }
                self.transition_depths = expand_uniform(&self.transition_depths, 1, 1, "shallow encoder")?;
            }
            EncoderKind::DeepTransition => {
                if d != 1 {
                    return Err(reject("deep_transition encoder requires stack depth 1"));
                }
                if self.transition_depths.len() != 1 {
                    return Err(reject("deep_transition encoder takes a single transition depth"));
                }
            }
            EncoderKind::Alternating | EncoderKind::Biunidirectional => {
                let levels = if self.kind == EncoderKind::Alternating { d } else { 1 };
                self.transition_depths =
                    expand_uniform(&self.transition_depths, levels, 1, "stacked encoder")?;
            }
            EncoderKind::Bideep => {
                let n = self.transition_depths.len();
                if n > d {
                    self.stack_depth = n;
                } else if n == 1 {
                    self.transition_depths = vec![self.transition_depths[0]; d];
                } else if n < d {
                    return Err(reject(format!(
                        "bideep encoder depths {:?} shorter than stack depth {d}",
                        self.transition_depths
                    )));
                }
            }
            EncoderKind::Mixed => {
                if self.alt_layers == 0 || self.uni_layers == 0 {
                    return Err(reject("mixed encoder needs alt_layers >= 1 and uni_layers >= 1"));
                }
                if self.alt_layers + self.uni_layers != d {
                    return Err(reject(format!(
                        "mixed encoder: alt_layers {} + uni_layers {} != depth {d}",
                        self.alt_layers, self.uni_layers
                    )));
                }
                self.transition_depths =
                    expand_uniform(&self.transition_depths, self.alt_layers, 1, "mixed encoder")?;
            }
        }
        if self.kind != EncoderKind::Mixed {
            let layout = self.layout();
            self.alt_layers = layout.alt_depths.len();
            self.uni_layers = layout.uni_levels;
        }
        Ok(())
    }

    /// Alternating levels (with their transition depths) below forward-only
    /// double-width levels.
    pub fn layout(&self) -> EncoderLayout {
        match self.kind {
            EncoderKind::Shallow => EncoderLayout {
                alt_depths: vec![1],
                uni_levels: 0,
            },
            EncoderKind::DeepTransition => EncoderLayout {
                alt_depths: vec![self.transition_depths[0]],
                uni_levels: 0,
            },
            EncoderKind::Alternating => EncoderLayout {
                alt_depths: vec![1; self.stack_depth],
                uni_levels: 0,
            },
            EncoderKind::Biunidirectional => EncoderLayout {
                alt_depths: vec![1],
                uni_levels: self.stack_depth - 1,
            },
            EncoderKind::Bideep => EncoderLayout {
                alt_depths: self.transition_depths.clone(),
                uni_levels: 0,
            },
            EncoderKind::Mixed => EncoderLayout {
                alt_depths: vec![1; self.alt_layers],
                uni_levels: self.uni_layers,
            },
        }
    }

    /// Width of one annotation vector.
    pub fn annotation_width(&self) -> usize {
        2 * self.hidden
    }
}

impl DecoderConfig {
    fn validate(&mut self) -> Result<()> {
        if self.hidden == 0 || self.embedding == 0 {
            return Err(reject("decoder dimensions must be positive"));
        }
        if self.output_depth == 0 {
            return Err(reject("decoder.output_depth must be at least 1"));
        }
        if self.stack_depth == 0 {
            return Err(reject("decoder.depth must be at least 1"));
        }
        if self.transition_depths.is_empty() || self.transition_depths.contains(&0) {
            return Err(reject("decoder transition depths must be at least 1"));
        }
        let d = self.stack_depth;
        let higher = if self.variant.is_conditional() { 2 } else { 1 };
        match self.kind {
            DecoderKind::Baseline => {
                if d != 1 {
                    return Err(reject("baseline decoder requires depth 1"));
                }
                self.transition_depths = expand_uniform(&self.transition_depths, 1, 2, "baseline decoder")?;
            }
            DecoderKind::DeepTransition => {
                if d != 1 {
                    return Err(reject("deep_transition decoder requires stack depth 1"));
                }
                if self.transition_depths.len() != 1 || self.transition_depths[0] < 2 {
                    return Err(reject(format!(
                        "deep_transition decoder needs a single transition depth >= 2, got {:?}",
                        self.transition_depths
                    )));
                }
            }
            DecoderKind::Stacked => {
                let mut canonical = vec![higher; d];
                canonical[0] = 2;
                let ok = self.transition_depths == canonical || self.transition_depths == [2];
                if !ok {
                    return Err(reject(format!(
                        "stacked {} decoder has fixed transition depths {canonical:?}, got {:?}",
                        self.variant, self.transition_depths
                    )));
                }
                self.transition_depths = canonical;
            }
            DecoderKind::Bideep => {
                let n = self.transition_depths.len();
                if n < d {
                    return Err(reject(format!(
                        "bideep decoder depths {:?} shorter than stack depth {d}",
                        self.transition_depths
                    )));
                }
                self.stack_depth = n;
                if self.transition_depths[0] < 2 {
                    return Err(reject("bideep decoder base level needs transition depth >= 2"));
                }
                if self.transition_depths[1..].iter().any(|&t| t < higher) {
                    return Err(reject(format!(
                        "bideep {} decoder higher levels need transition depth >= {higher}",
                        self.variant
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Checks every invariant and fills normalized fields. The returned
    /// config is what parameters, checkpoints and the text form use.
    pub fn validate(mut self) -> Result<Self> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.src_vocab < 3 || self.tgt_vocab < 3 {
            return Err(reject("vocabularies need at least 3 entries (eos, unk, one word)"));
        }
        if self.tied_embeddings
            && (self.src_vocab != self.tgt_vocab || self.encoder.embedding != self.decoder.embedding)
        {
            return Err(reject("tied embeddings need equal vocabularies and embedding sizes"));
        }
        Ok(self)
    }

    /// Sets one `section.key` from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |e: &dyn core::fmt::Display| reject(format!("{key} = {value}: {e}"));
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        let flag = |v: &str| v.parse::<bool>().map_err(|e| bad(&e));
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split([',', '/']).map(|p| num(p.trim())).collect()
        };
        let (enc, dec) = (&mut self.encoder, &mut self.decoder);
        match key {
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "model.src_vocab" => self.src_vocab = num(value)?,
            "model.tgt_vocab" => self.tgt_vocab = num(value)?,
            "model.layer_norm" => self.layer_norm = flag(value)?,
            "model.tied_embeddings" => self.tied_embeddings = flag(value)?,
            "encoder.kind" => enc.kind = value.parse()?,
            "encoder.depth" => enc.stack_depth = num(value)?,
            "encoder.alt_layers" => enc.alt_layers = num(value)?,
            "encoder.uni_layers" => enc.uni_layers = num(value)?,
            "encoder.depths" | "encoder.transition_depth" => enc.transition_depths = list(value)?,
            "encoder.hidden" => enc.hidden = num(value)?,
            "encoder.embedding" => enc.embedding = num(value)?,
            "decoder.kind" => dec.kind = value.parse()?,
            "decoder.variant" => dec.variant = value.parse()?,
            "decoder.depth" => dec.stack_depth = num(value)?,
            "decoder.depths" | "decoder.transition_depth" => dec.transition_depths = list(value)?,
            "decoder.output_depth" => dec.output_depth = num(value)?,
            "decoder.output_inputs" => dec.output_inputs = value.parse()?,
            "decoder.hidden" => dec.hidden = num(value)?,
            "decoder.embedding" => dec.embedding = num(value)?,
            "decoder.literal_conditional_state" => dec.literal_conditional_state = flag(value)?,
            _ => return Err(reject(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Keys understood by [`ModelConfig::set`].
    pub fn owns_key(key: &str) -> bool {
        key == "seed" || key.starts_with("model.") || key.starts_with("encoder.") || key.starts_with("decoder.")
    }

    /// Canonical `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let (e, d) = (&self.encoder, &self.decoder);
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn core::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("seed", &self.seed);
        line("model.src_vocab", &self.src_vocab);
        line("model.tgt_vocab", &self.tgt_vocab);
        line("model.layer_norm", &self.layer_norm);
        line("model.tied_embeddings", &self.tied_embeddings);
        line("encoder.kind", &e.kind);
        line("encoder.depth", &e.stack_depth);
        line("encoder.alt_layers", &e.alt_layers);
        line("encoder.uni_layers", &e.uni_layers);
        line("encoder.depths", &list(&e.transition_depths));
        line("encoder.hidden", &e.hidden);
        line("encoder.embedding", &e.embedding);
        line("decoder.kind", &d.kind);
        line("decoder.variant", &d.variant);
        line("decoder.depth", &d.stack_depth);
        line("decoder.depths", &list(&d.transition_depths));
        line("decoder.output_depth", &d.output_depth);
        line("decoder.output_inputs", &d.output_inputs);
        line("decoder.hidden", &d.hidden);
        line("decoder.embedding", &d.embedding);
        line("decoder.literal_conditional_state", &d.literal_conditional_state);
        out
    }

    /// Parses `key = value` lines (with `#` comments) on top of the defaults
    /// and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (key, value) in parse_lines(text)? {
            config.set(&key, &value)?;
        }
        config.validate()
    }
}

/// Splits config text into `(key, value)` pairs, skipping blank lines and
/// `#` comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| reject(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(pairs: &[(&str, &str)]) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()
    }

    #[test]
    fn baseline_validates() {
        let c = ModelConfig::default().validate().unwrap();
        assert_eq!(c.decoder.transition_depths, vec![2]);
        assert_eq!(c.decoder.output_depth, 1);
    }

    #[test]
    fn stacked_encoder_rejects_transition_depth() {
        let err = with(&[("encoder.kind", "alternating"), ("encoder.depth", "4"), ("encoder.depths", "3")]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn deep_transition_decoder_needs_two_transitions() {
        assert!(with(&[("decoder.kind", "deep_transition"), ("decoder.depths", "1")]).is_err());
        assert!(with(&[("decoder.kind", "deep_transition"), ("decoder.depths", "8")]).is_ok());
    }

    #[test]
    fn bideep_depth_list_rules() {
        let c = with(&[("decoder.kind", "bideep"), ("decoder.depths", "4,2")]).unwrap();
        assert_eq!(c.decoder.stack_depth, 2);
        assert_eq!(c.decoder.transition_depths, vec![4, 2]);
        assert!(with(&[("decoder.kind", "bideep"), ("decoder.depth", "4"), ("decoder.depths", "4,2")]).is_err());
        assert!(with(&[
            ("decoder.kind", "bideep"),
            ("decoder.variant", "cgru"),
            ("decoder.depths", "4,1")
        ])
        .is_err());
    }

    #[test]
    fn stacked_decoder_depths_are_normalized() {
        let c = with(&[("decoder.kind", "stacked"), ("decoder.depth", "3")]).unwrap();
        assert_eq!(c.decoder.transition_depths, vec![2, 1, 1]);
        let c = with(&[("decoder.kind", "stacked"), ("decoder.variant", "crgru"), ("decoder.depth", "3")]).unwrap();
        assert_eq!(c.decoder.transition_depths, vec![2, 2, 2]);
    }

    #[test]
    fn text_round_trip() {
        let c = with(&[
            ("encoder.kind", "mixed"),
            ("encoder.depth", "3"),
            ("encoder.alt_layers", "2"),
            ("encoder.uni_layers", "1"),
            ("decoder.kind", "bideep"),
            ("decoder.variant", "rgru"),
            ("decoder.depths", "4/2"),
            ("seed", "99"),
        ])
        .unwrap();
        let text = c.to_text();
        let back = ModelConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ModelConfig::default().set("encoder.colour", "red").is_err());
        assert!(ModelConfig::from_text("encoder.kind shallow").is_err());
    }
}
