use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deep_rnmt::commands;
use deep_rnmt::files::{parse_contrastive, read_checkpoint, Tokenizer, UnkPolicy};
use deep_rnmt::{ConfigError, RunConfig};
use deep_rnmt_core::ModelConfig;

/// Deep recurrent encoder-decoder models: training, decoding and evaluation.
#[derive(Parser)]
#[command(name = "deep-rnmt", version)]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducible training.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable, applied left to right.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(RunConfig::load(text.as_deref(), &overrides)?)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Word list mapping line numbers to token ids.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Handling of tokens that are neither known words nor valid ids.
    #[arg(long, value_enum, default_value_t = UnkPolicy::Error)]
    unk: UnkPolicy,
}

impl ModelArgs {
    fn load(&self) -> Result<(deep_rnmt_core::ParameterSet, ModelConfig, Tokenizer)> {
        let (params, config) = read_checkpoint(&self.checkpoint)?;
        let tokens = match &self.vocab {
            Some(p) => Tokenizer::with_words(p, config.src_vocab.max(config.tgt_vocab), self.unk)?,
            None => Tokenizer::new(config.src_vocab.min(config.tgt_vocab), self.unk),
        };
        Ok((params, config, tokens))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured synthetic task.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the best checkpoint (overrides paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write the training log (overrides paths.log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode one sentence per input line.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Defaults to twice the source length plus ten.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Log-probability of each `source<TAB>target` line.
    Score {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Contrastive-pair accuracy by subject-verb distance.
    ContrastEval {
        #[command(flatten)]
        model: ModelArgs,
        /// TSV: source, reference, contrastive, distance, category.
        #[arg(long)]
        input: PathBuf,
        /// Plot data: distance and accuracy per line.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parameter counts of the configured model.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
        /// Count every architecture shape at the configured dimensions.
        #[arg(long)]
        matrix: bool,
    },
    /// Finite-difference gradient check at tiny dimensions.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.workers == 0 {
        bail!(ConfigError("--workers must be at least 1".into()));
    }
    let pool = commands::pool(cli.workers)?;
    match cli.command {
        Command::Train { config, checkpoint, log } => {
            let mut config = config.load()?;
            if let Some(p) = checkpoint {
                config.paths.checkpoint = p;
            }
            if let Some(p) = log {
                config.paths.log = p;
            }
            let outcome = commands::run_train(&config, cli.workers)?;
            println!(
                "steps {}\tbest_valid_ce {}\tstop {:?}",
                outcome.state.step, outcome.best_valid_ce, outcome.stop
            );
        }
        Command::Translate { model, input, output, beam, max_len } => {
            let (params, config, tokens) = model.load()?;
            let sources = read_lines(&input)?
                .iter()
                .enumerate()
                .map(|(n, l)| {
                    let ids = tokens.encode(l).with_context(|| format!("{} line {}", input.display(), n + 1))?;
                    Ok(deep_rnmt_core::data::frame(&ids))
                })
                .collect::<Result<Vec<_>>>()?;
            let hyps = commands::translate(&params, &config, &sources, beam, max_len, &pool)?;
            let text: String = hyps.iter().map(|h| tokens.decode(&h.tokens) + "\n").collect();
            write_output(output.as_deref(), &text)?;
        }
        Command::Score { model, input, output } => {
            let (params, config, tokens) = model.load()?;
            let pairs = read_lines(&input)?
                .iter()
                .enumerate()
                .map(|(n, l)| {
                    let at = || format!("{} line {}", input.display(), n + 1);
                    let (s, t) = l.split_once('\t').with_context(|| format!("{}: expected source<TAB>target", at()))?;
                    let s = tokens.encode(s).with_context(at)?;
                    let t = tokens.encode(t).with_context(at)?;
                    Ok((deep_rnmt_core::data::frame(&s), deep_rnmt_core::data::frame(&t)))
                })
                .collect::<Result<Vec<_>>>()?;
            let scores = commands::score(&params, &config, &pairs, &pool)?;
            let text: String = scores.iter().map(|s| format!("{s}\n")).collect();
            write_output(output.as_deref(), &text)?;
        }
        Command::ContrastEval { model, input, output } => {
            let (params, config, tokens) = model.load()?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let items = parse_contrastive(&text, &tokens).with_context(|| input.display().to_string())?;
            let report = commands::contrast_eval(&params, &config, &items, &pool)?;
            print!("{}", commands::bucket_table(&report));
            if let Some(p) = output {
                fs::write(&p, commands::plot_data(&report)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Params { config, matrix } => {
            let config = config.load()?;
            if matrix {
                print!("{}", commands::matrix_report(&config.model)?);
            } else {
                print!("{}", commands::params_report(&config.model));
            }
        }
        Command::Gradcheck { config, tolerance, inject_fault } => {
            let config = config.load()?;
            let report = commands::run_gradcheck(&config.model, inject_fault)?;
            for t in &report.tensors {
                println!("{}\t{}\t{:.3e}", t.name, t.checked, t.max_rel_error);
            }
            let worst = report.worst().context("model has no parameters")?;
            println!("worst\t{}\t{:.3e}", worst.name, worst.max_rel_error);
            if worst.max_rel_error.is_nan() || worst.max_rel_error >= tolerance {
                eprintln!("gradient check failed: {:.3e} >= tolerance {tolerance:e}", worst.max_rel_error);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEEP_RNMT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                c.downcast_ref::<ConfigError>().is_some()
                    || matches!(c.downcast_ref::<deep_rnmt_core::Error>(), Some(deep_rnmt_core::Error::Config(_)))
            });
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
