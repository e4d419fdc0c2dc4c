use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlcode::backtrans::BackTransMode;
use nlcode::commands::{self, AblationAxis};
use nlcode::config::{Overrides, RunConfig};
use nlcode::data::RegimeKind;

/// Transformer text-to-code translation.
#[derive(Debug, Parser)]
#[command(name = "nlcode", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint directory to evaluate, translate with, or resume from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Sets the data, init, dropout and noise seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mined_limit: Option<usize>,
    #[arg(long, global = true)]
    regime: Option<RegimeKind>,
    #[arg(long, global = true)]
    mode: Option<BackTransMode>,
    /// Back-translation weight, or the Sample weight when no mode is set.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the intent and snippet vocabularies.
    TokenizerTrain,
    /// Train a model; `--checkpoint` resumes.
    Train,
    /// Score a checkpoint on a test file.
    Evaluate {
        /// Test file; defaults to `paths.test`.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Output directory for report.json and examples.jsonl.
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Translate one intent and print the snippet.
    Translate { intent: String },
    /// Train and score one model per setting of an axis.
    Ablation {
        #[arg(long)]
        axis: AblationAxis,
        /// Output table (TSV).
        #[arg(long, default_value = "runs/ablation.tsv")]
        out: PathBuf,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<nlcode::Error> for Failure {
    fn from(e: nlcode::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        mined_limit: common.mined_limit,
        regime: common.regime,
        mode: common.mode,
        alpha: common.alpha,
        beam: common.beam,
        max_steps: common.max_steps,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.run_checkpoints().join(commands::LAST))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    match cli.command {
        Command::TokenizerTrain => {
            let v = commands::tokenizer_train(&cfg)?;
            println!(
                "intent vocabulary: {} pieces\nsnippet vocabulary: {} pieces\nwritten to {}",
                v.intent.len(),
                v.snippet.len(),
                cfg.paths.vocab_dir.display()
            );
        }
        Command::Train => {
            let out = commands::train(&cfg, common.checkpoint.as_deref())?;
            if let Some(r) = &out.last_report {
                println!("step {}: loss {:.4}", r.step, r.total);
            }
            if let Some(e) = &out.last_eval {
                println!("test BLEU {:.2}, token accuracy {:.4}", e.corpus_bleu, e.token_accuracy);
            }
            println!("checkpoint: {}\nmetrics: {}", out.checkpoint.display(), out.metrics.display());
        }
        Command::Evaluate { test, out } => {
            let test = test.or_else(|| cfg.paths.test.clone()).ok_or_else(|| {
                Failure::Validation(anyhow::anyhow!("no test file: pass --test or set paths.test"))
            })?;
            let r = commands::evaluate(&checkpoint_dir(common, &cfg), &test, common.beam, &out)?;
            println!(
                "BLEU {:.2}, token accuracy {:.4}, {} examples ({} with zero BLEU)",
                r.corpus_bleu, r.token_accuracy, r.examples, r.zero_bleu_count
            );
            println!("report: {}", out.join("report.json").display());
        }
        Command::Translate { intent } => {
            println!("{}", commands::translate(&checkpoint_dir(common, &cfg), &intent, common.beam)?);
        }
        Command::Ablation { axis, out } => {
            let table = commands::ablation(&cfg, axis, &out)?;
            print!("{}", table.to_tsv());
            if table.failures() > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "{} of {} cells failed; partial table in {}",
                    table.failures(),
                    table.rows.len(),
                    out.display()
                )));
            }
        }
    }
    Ok(())
}

fn report(e: &anyhow::Error, path: Option<&Path>) {
    match path {
        Some(p) => eprintln!("error: {e:#} (config {})", p.display()),
        None => eprintln!("error: {e:#}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config_path = cli.common.config.clone();
    match run(cli).map_err(|f| match f {
        Failure::Validation(e) => (1, e),
        Failure::Runtime(e) => (2, e),
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            let e = e.context(if code == 1 { "invalid input" } else { "run failed" });
            report(&e, config_path.as_deref());
            ExitCode::from(code)
        }
    }
}
