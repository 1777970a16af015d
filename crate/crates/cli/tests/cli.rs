//! End-to-end runs of the `deep-rnmt` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deep_rnmt::files::read_checkpoint;
use deep_rnmt::RunConfig;
use deep_rnmt_core::data::frame;
use deep_rnmt_core::params::{count_params, Layout};
use deep_rnmt_core::search::decode;

const SMALL: &str = "\
# tiny copy model
encoder.hidden = 8
encoder.embedding = 8
decoder.hidden = 8
decoder.embedding = 8
model.src_vocab = 12
model.tgt_vocab = 12
task.vocab = 12
task.max_len = 5
train.max_steps = 20
train.eval_every = 10
train.batch_size = 8
train.train_size = 64
train.valid_size = 16
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deep-rnmt"))
        .args(args)
        .env("DEEP_RNMT_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status, String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small model into `dir` and returns the checkpoint path.
fn trained(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let ckpt = dir.join("model.ckpt");
    let log = dir.join("train.log");
    let mut args = vec!["train", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--log", s(&log), "--set", "seed=7"];
    args.extend(extra);
    ok(bin(&args));
    ckpt
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let (params, config) = read_checkpoint(&ckpt).unwrap();
    assert_eq!(config.seed, 7);
    assert_eq!(params.total_scalars(), count_params(&config).total);
    let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        let cols: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 4);
        assert!(cols[3] > 0.0 && cols[3].is_finite());
    }
}

#[test]
fn training_is_deterministic_for_each_worker_count() {
    for workers in ["1", "2"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = trained(a.path(), &["--workers", workers]);
        let cb = trained(b.path(), &["--workers", workers]);
        assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap(), "workers {workers}");
    }
}

#[test]
fn invalid_configs_exit_with_status_2() {
    for args in [
        vec!["params", "--set", "decoder.kind=deep_transition", "--set", "decoder.depths=1"],
        vec!["params", "--set", "decoder.flavour=cgru"],
        vec!["gradcheck", "--set", "encoder.kind=alternating", "--set", "encoder.depths=3"],
        vec!["train", "--set", "task.vocab=500"],
    ] {
        let o = bin(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
    }
}

#[test]
fn params_prints_the_analytic_count() {
    let out = ok(bin(&["params"]));
    let config = RunConfig::load(None, &[]).unwrap().model;
    assert!(out.contains(&format!("total\t{}", count_params(&config).total)));
    assert_eq!(Layout::of(&config).unwrap().total(), count_params(&config).total);

    let total = |args: &[&str]| -> usize {
        let out = ok(bin(&[&["params"], args].concat()));
        out.lines().find_map(|l| l.strip_prefix("total\t")).unwrap().parse().unwrap()
    };
    let deep = total(&["--set", "encoder.kind=deep_transition", "--set", "encoder.depths=4"]);
    assert!(deep > total(&[]));
    let bideep = total(&["--set", "decoder.kind=bideep", "--set", "decoder.depths=4,2"]);
    let c = RunConfig::load(None, &["decoder.kind=bideep".into(), "decoder.depths=4,2".into()]).unwrap().model;
    assert_eq!(bideep, count_params(&c).total);
    assert_eq!((c.decoder.stack_depth, c.decoder.transition_depths), (2, vec![4, 2]));
}

#[test]
fn params_matrix_covers_every_kind() {
    let out = ok(bin(&["params", "--matrix"]));
    for kind in ["shallow", "deep_transition", "alternating", "biunidirectional", "mixed", "bideep", "baseline", "stacked gru", "stacked rgru", "stacked cgru", "stacked crgru"] {
        assert!(out.contains(kind), "missing {kind}");
    }
    for line in out.lines().skip(1) {
        line.rsplit('\t').next().unwrap().parse::<usize>().unwrap();
    }
}

#[test]
fn translate_matches_the_library_and_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let input = dir.path().join("in.txt");
    fs::write(&input, "3 4 5\n7\n2 2 9 10\n").unwrap();
    let run = || ok(bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--beam", "1", "--max-len", "8"]));
    let out = run();
    assert_eq!(out, run());
    let (params, config) = read_checkpoint(&ckpt).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, src) in lines.iter().zip([vec![3, 4, 5], vec![7], vec![2, 2, 9, 10]]) {
        let mut want = decode(&params, &config, &frame(&src), 1, 8).unwrap().tokens;
        if want.last() == Some(&0) {
            want.pop();
        }
        let got: Vec<usize> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(got, want);
    }
    let beam = ok(bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--beam", "3"]));
    assert_eq!(beam.lines().count(), 3);

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out_path = dir.path().join("out.txt");
    ok(bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&empty), "--output", s(&out_path)]));
    assert_eq!(fs::read_to_string(out_path).unwrap(), "");
}

#[test]
fn translate_vocabulary_misses() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let input = dir.path().join("in.txt");
    fs::write(&input, "3 cat\n").unwrap();
    let o = bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    ok(bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--unk", "unk"]));
    let words = dir.path().join("words.txt");
    fs::write(&words, "</s>\n<unk>\nthe\ncat\n").unwrap();
    ok(bin(&["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--vocab", s(&words)]));
}

#[test]
fn score_lines() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let input = dir.path().join("pairs.tsv");
    fs::write(&input, "3 4\t3 4\n5\t6 6\n").unwrap();
    let out = ok(bin(&["score", "--checkpoint", s(&ckpt), "--input", s(&input)]));
    let scores: Vec<f64> = out.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|&x| x < 0.0));
}

#[test]
fn contrast_eval_buckets_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let tsv = dir.path().join("items.tsv");
    fs::write(&tsv, "2 3\t2 3\t2 4\t1\tagr\n5 6\t5 6\t5 7\t1\tagr\n2 3 4\t2 3 4\t2 3 5\t20\tagr\n").unwrap();
    let plot = dir.path().join("plot.tsv");
    let out = ok(bin(&["contrast-eval", "--checkpoint", s(&ckpt), "--input", s(&tsv), "--output", s(&plot)]));
    assert!(out.lines().any(|l| l.starts_with("1\t2\t")), "{out}");
    assert!(out.lines().any(|l| l.starts_with(">=16\t1\t")), "{out}");
    let rows: Vec<(f64, f64)> = fs::read_to_string(&plot)
        .unwrap()
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1.0, 16.0]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.1)));

    fs::write(&tsv, "2 3\t2 3\t2 4\t1\tagr\n2 3\t2 3\t2 3\t4\tagr\n").unwrap();
    let o = bin(&["contrast-eval", "--checkpoint", s(&ckpt), "--input", s(&tsv)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_backward() {
    let out = ok(bin(&["gradcheck", "--tolerance", "1e-4"]));
    let config = RunConfig::load(None, &[]).unwrap().model;
    let names: Vec<String> = Layout::of(&config).unwrap().specs.into_iter().map(|s| s.name).collect();
    for name in &names {
        assert!(out.lines().any(|l| l.starts_with(&format!("{name}\t"))), "{name} not reported");
    }
    assert!(out.contains("worst\t"));

    ok(bin(&["gradcheck", "--set", "decoder.kind=bideep", "--set", "decoder.depths=4,2"]));

    let o = bin(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("worst\t"));
}
