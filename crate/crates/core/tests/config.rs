//! Configuration validation and the canonical text form.

use deep_rnmt_core::config::OutputInputs;
use deep_rnmt_core::{CellVariant, DecoderKind, EncoderKind, Error, ModelConfig};
use proptest::prelude::*;

fn with(pairs: &[(&str, &str)]) -> Result<ModelConfig, Error> {
    let mut c = ModelConfig::default();
    for (k, v) in pairs {
        c.set(k, v)?;
    }
    c.validate()
}

fn rejected(pairs: &[(&str, &str)]) {
    assert!(matches!(with(pairs), Err(Error::Config(_))), "{pairs:?} should be rejected");
}

#[test]
fn invalid_shapes_are_rejected() {
    rejected(&[("decoder.kind", "deep_transition"), ("decoder.depths", "1")]);
    rejected(&[("encoder.kind", "alternating"), ("encoder.depth", "2"), ("encoder.depths", "2")]);
    rejected(&[("encoder.kind", "bideep"), ("encoder.depth", "3"), ("encoder.depths", "2,2")]);
    rejected(&[("decoder.kind", "bideep"), ("decoder.depth", "3"), ("decoder.depths", "4,2")]);
    rejected(&[("decoder.kind", "bideep"), ("decoder.depths", "1,1")]);
    rejected(&[("decoder.kind", "bideep"), ("decoder.variant", "cgru"), ("decoder.depths", "2,1")]);
    rejected(&[("encoder.kind", "shallow"), ("encoder.depth", "2")]);
    rejected(&[("encoder.kind", "mixed"), ("encoder.depth", "3"), ("encoder.alt_layers", "1"), ("encoder.uni_layers", "1")]);
    rejected(&[("decoder.kind", "baseline"), ("decoder.depths", "3")]);
    rejected(&[("model.tied_embeddings", "true"), ("model.tgt_vocab", "21")]);
    rejected(&[("encoder.hidden", "0")]);
    rejected(&[("decoder.output_depth", "0")]);
    rejected(&[("model.src_vocab", "2")]);
    assert!(matches!(with(&[("decoder.colour", "red")]), Err(Error::Config(_))));
    assert!(matches!(with(&[("decoder.kind", "sideways")]), Err(Error::Config(_))));
}

#[test]
fn normalization_fills_depth_lists() {
    let c = with(&[("decoder.kind", "stacked"), ("decoder.variant", "crgru"), ("decoder.depth", "3")]).unwrap();
    assert_eq!(c.decoder.transition_depths, vec![2, 2, 2]);
    let c = with(&[("decoder.kind", "stacked"), ("decoder.depth", "3")]).unwrap();
    assert_eq!(c.decoder.transition_depths, vec![2, 1, 1]);
    let c = with(&[("decoder.kind", "bideep"), ("decoder.depths", "4,2")]).unwrap();
    assert_eq!((c.decoder.kind, c.decoder.stack_depth, c.decoder.transition_depths.clone()), (DecoderKind::Bideep, 2, vec![4, 2]));
    let c = with(&[("encoder.kind", "bideep"), ("encoder.depth", "3"), ("encoder.depths", "2")]).unwrap();
    assert_eq!(c.encoder.transition_depths, vec![2, 2, 2]);
    let c = with(&[("encoder.kind", "biunidirectional"), ("encoder.depth", "4")]).unwrap();
    assert_eq!(c.encoder.layout().uni_levels, 3);
    assert_eq!(c.decoder.output_depth, 1);
    assert_eq!(c.decoder.output_inputs, OutputInputs::Full);
}

fn arbitrary_config() -> impl Strategy<Value = ModelConfig> {
    let enc = prop_oneof![
        Just(vec![("encoder.kind", "shallow".to_string())]),
        (1usize..5).prop_map(|l| vec![("encoder.kind", "deep_transition".into()), ("encoder.depths", l.to_string())]),
        (1usize..5).prop_map(|d| vec![("encoder.kind", "alternating".into()), ("encoder.depth", d.to_string())]),
        (1usize..5).prop_map(|d| vec![("encoder.kind", "biunidirectional".into()), ("encoder.depth", d.to_string())]),
        prop::collection::vec(1usize..4, 1..4).prop_map(|v| vec![
            ("encoder.kind", "bideep".into()),
            ("encoder.depths", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
        ]),
    ];
    let dec = prop_oneof![
        Just(vec![("decoder.kind", "baseline".to_string())]),
        (2usize..8).prop_map(|l| vec![("decoder.kind", "deep_transition".into()), ("decoder.depths", l.to_string())]),
        (1usize..5, 0usize..4).prop_map(|(d, v)| vec![
            ("decoder.kind", "stacked".into()),
            ("decoder.variant", CellVariant::ALL[v].to_string()),
            ("decoder.depth", d.to_string()),
        ]),
        (2usize..5, prop::collection::vec(2usize..4, 0..3)).prop_map(|(base, rest)| {
            let mut v = vec![base];
            v.extend(rest);
            vec![
                ("decoder.kind", "bideep".into()),
                ("decoder.depths", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ]
        }),
    ];
    (enc, dec, any::<bool>(), 1usize..9, 3usize..30, any::<u64>()).prop_map(|(e, d, ln, h, v, seed)| {
        let mut c = ModelConfig::default();
        for (k, x) in e.iter().chain(&d) {
            c.set(k, x).unwrap();
        }
        c.set("model.layer_norm", &ln.to_string()).unwrap();
        c.set("encoder.hidden", &h.to_string()).unwrap();
        c.set("model.tgt_vocab", &v.to_string()).unwrap();
        c.set("seed", &seed.to_string()).unwrap();
        c.validate().unwrap()
    })
}

proptest! {
    #[test]
    fn text_form_round_trips(c in arbitrary_config()) {
        let text = c.to_text();
        let back = ModelConfig::from_text(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn text_form_accepts_comments_and_aliases() {
    let c = ModelConfig::from_text("# deep\nencoder.kind = bideep_alternating # alias\n\nencoder.transition_depth = 2/3\n").unwrap();
    assert_eq!(c.encoder.kind, EncoderKind::Bideep);
    assert_eq!(c.encoder.transition_depths, vec![2, 3]);
    assert!(matches!(ModelConfig::from_text("encoder.kind bideep"), Err(Error::Config(_))));
}
