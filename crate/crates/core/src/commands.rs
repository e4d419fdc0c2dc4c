//! The operations behind each CLI subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backtrans::{BackTransConfig, BackTransMode, DualModel};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{limit_mined, load_annotated, load_mined, tokenizer_corpora, Corpus, EncodedCorpus, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::metrics::{read_metrics, MetricsWriter};
use crate::strategy::{StepInputs, StrategyRegistry};
use crate::tensor::ParamStore;
use crate::tokenizer::{Vocab, Vocabs};
use crate::train::{train_step, LossReport};
use crate::transformer::TransformerConfig;

pub const LAST: &str = "last";

fn load_mined_for(cfg: &RunConfig) -> Result<Option<Corpus>> {
    let Some(path) = &cfg.paths.mined else {
        return Ok(None);
    };
    let limit = if cfg.regime.shuffle_mined { usize::MAX } else { cfg.regime.mined_limit };
    let mined = load_mined(path, limit)?;
    Ok(Some(limit_mined(mined, &cfg.regime, cfg.seeds.data)))
}

/// Trains the intent and snippet vocabularies on the training corpora and
/// writes them to `paths.vocab_dir`.
pub fn tokenizer_train(cfg: &RunConfig) -> Result<Vocabs> {
    let annotated = load_annotated(&cfg.paths.annotated, Split::Train)?;
    let mined = load_mined_for(cfg)?;
    let (intents, snippets) = tokenizer_corpora(std::iter::once(&annotated).chain(mined.as_ref()))?;
    let vocabs = Vocabs {
        intent: Vocab::train(&intents, cfg.tokenizer.intent_vocab_size)?,
        snippet: Vocab::train(&snippets, cfg.tokenizer.snippet_vocab_size)?,
    };
    vocabs.save(&cfg.paths.vocab_dir)?;
    log::info!(
        "vocabularies: {} intent pieces, {} snippet pieces, written to {}",
        vocabs.intent.len(),
        vocabs.snippet.len(),
        cfg.paths.vocab_dir.display()
    );
    Ok(vocabs)
}

/// What a finished training run left behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub last_report: Option<LossReport>,
    pub last_eval: Option<EvalReport>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn same_architecture(a: &TransformerConfig, b: &TransformerConfig) -> bool {
    let strip = |c: &TransformerConfig| TransformerConfig {
        src_vocab: 0,
        tgt_vocab: 0,
        dropout: 0.0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn step_dir(cfg: &RunConfig, step: u64) -> PathBuf {
    cfg.paths.run_checkpoints().join(format!("step-{step}"))
}

/// Trains with the strategy the config selects. With `resume`, parameters,
/// optimizer state and the step counter come from that checkpoint and the
/// metrics log is cut back to its step before appending.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let settings = cfg.strategy_settings();
    let strategy = StrategyRegistry::builtin().create(settings.strategy_name(), &settings)?;
    if !cfg.paths.vocab_dir.join(Vocabs::FILES[0]).exists() {
        return Err(Error::Config(format!(
            "no vocabularies in {}; run tokenizer-train first",
            cfg.paths.vocab_dir.display()
        )));
    }
    let resumed = resume.map(checkpoint::load).transpose()?;
    let (vocabs, mut store, dual, adam, start) = match resumed {
        Some(ck) => {
            if !same_architecture(ck.dual.f.config(), &cfg.model) {
                return Err(Error::Config("checkpoint architecture differs from the run config".into()));
            }
            (ck.vocabs, ck.store, ck.dual, Some(ck.adam), ck.step)
        }
        None => {
            let vocabs = Vocabs::load(&cfg.paths.vocab_dir)?;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
            let dual = DualModel::new(&cfg.model, vocabs.intent.len(), vocabs.snippet.len(), &mut store, &mut rng)?;
            (vocabs, store, dual, None, 0)
        }
    };
    // the run config's dropout applies even when resuming
    let mut dual = dual;
    dual.f.set_dropout(cfg.model.dropout);
    dual.g.set_dropout(cfg.model.dropout);
    for prefix in cfg.backtrans.iter().flat_map(|b| &b.freeze) {
        store.set_trainable_prefix(prefix, false);
    }
    let mut optimizer = cfg.optimizer.build(&store, cfg.model.d_model);
    if let Some(a) = adam {
        optimizer.adam = a;
    }

    let max_len = cfg.model.max_len;
    let annotated_raw = load_annotated(&cfg.paths.annotated, Split::Train)?;
    let annotated = EncodedCorpus::new(&annotated_raw, &vocabs, max_len)?;
    let mined_raw = if strategy.needs_mined() { load_mined_for(cfg)? } else { None };
    let mined = match &mined_raw {
        Some(m) => EncodedCorpus::new(m, &vocabs, max_len)?,
        None => EncodedCorpus::default(),
    };
    let test = cfg.paths.test.as_deref().map(|p| load_annotated(p, Split::Test)).transpose()?;

    let metrics_path = cfg.paths.metrics_file();
    let mut metrics = if start == 0 {
        MetricsWriter::open(&metrics_path, true)?
    } else {
        let kept: Vec<_> = if metrics_path.exists() {
            read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= start).collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &kept {
            let _ = writeln!(text, "{}", serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        }
        if let Some(dir) = metrics_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;
        MetricsWriter::open(&metrics_path, false)?
    };

    log::info!(
        "training `{}` from step {} to {} ({} annotated, {} mined pairs)",
        strategy.name(),
        start + 1,
        cfg.train.max_steps,
        annotated.len(),
        mined.len()
    );
    let inputs = StepInputs {
        dual: &dual,
        annotated: &annotated,
        mined: &mined,
        batch_size: cfg.train.batch_size,
        data_seed: cfg.seeds.data,
        noise_seed: cfg.seeds.noise,
    };
    let mut last_report = None;
    let mut last_eval = None;
    for step in start + 1..=cfg.train.max_steps {
        let report = train_step(&mut store, &mut optimizer, strategy.as_ref(), &inputs, step, cfg.seeds.dropout)?;
        let checkpoint_now = step == cfg.train.max_steps || (cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0);
        let mut eval_pair = None;
        if checkpoint_now {
            if let Some(test) = &test {
                let r = eval::evaluate(&store, &dual.f, test, &vocabs, cfg.train.beam)?;
                log::info!("step {step}: test BLEU {:.2}, token accuracy {:.4}", r.corpus_bleu, r.token_accuracy);
                eval_pair = Some((r.corpus_bleu, r.token_accuracy));
                last_eval = Some(r);
            }
            for dir in [step_dir(cfg, step), cfg.paths.run_checkpoints().join(LAST)] {
                checkpoint::save(&dir, step, cfg, &vocabs, &dual, &store, &optimizer.adam)?;
            }
        }
        if step % 50 == 0 || step == cfg.train.max_steps {
            log::info!("step {step}: loss {:.4}, lr {:.2e}", report.total, report.lr);
        }
        metrics.record(&report, eval_pair)?;
        last_report = Some(report);
    }
    Ok(TrainOutcome {
        final_step: cfg.train.max_steps.max(start),
        last_report,
        last_eval,
        checkpoint: cfg.paths.run_checkpoints().join(LAST),
        metrics: metrics_path,
    })
}

/// Decodes the test file with the checkpoint's text-to-code model and
/// writes `report.json` and `examples.jsonl` into `out_dir`.
pub fn evaluate(checkpoint_dir: &Path, test: &Path, beam: Option<usize>, out_dir: &Path) -> Result<EvalReport> {
    let ck = checkpoint::load(checkpoint_dir)?;
    let corpus = load_annotated(test, Split::Test)?;
    let beam = beam.unwrap_or(ck.config.train.beam);
    let report = eval::evaluate(&ck.store, &ck.dual.f, &corpus, &ck.vocabs, beam)?;
    report.save(&out_dir.join("report.json"), &out_dir.join("examples.jsonl"))?;
    Ok(report)
}

pub fn translate(checkpoint_dir: &Path, intent: &str, beam: Option<usize>) -> Result<String> {
    let ck: Checkpoint = checkpoint::load(checkpoint_dir)?;
    let beam = beam.unwrap_or(ck.config.train.beam);
    eval::translate(&ck.store, &ck.dual.f, &ck.vocabs, intent, beam)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Heads,
    Layers,
    Alpha,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(AblationAxis::Heads),
            "layers" => Ok(AblationAxis::Layers),
            "alpha" => Ok(AblationAxis::Alpha),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (expected heads, layers or alpha)"))),
        }
    }
}

impl AblationAxis {
    pub fn header(self) -> &'static str {
        match self {
            AblationAxis::Heads => "Heads",
            AblationAxis::Layers => "Layers",
            AblationAxis::Alpha => "alpha",
        }
    }

    /// Cell labels, in table order.
    pub fn settings(self) -> Vec<String> {
        match self {
            AblationAxis::Heads => [1, 2, 4, 8, 16].iter().map(|h| h.to_string()).collect(),
            AblationAxis::Layers => [1, 2, 3, 6].iter().map(|l| l.to_string()).collect(),
            AblationAxis::Alpha => [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0].iter().map(|a| format!("{a:.1}")).collect(),
        }
    }

    /// The config for one cell. Heads and layers train on annotated pairs
    /// only; alpha cells train ctc back-translation with that weight.
    fn cell_config(self, base: &RunConfig, setting: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        let bad = || Error::Config(format!("bad {} setting `{setting}`", self.header()));
        match self {
            AblationAxis::Heads | AblationAxis::Layers => {
                let v: usize = setting.parse().map_err(|_| bad())?;
                if self == AblationAxis::Heads {
                    c.model.num_heads = v;
                } else {
                    c.model.num_layers = v;
                    c.model.num_heads = 8;
                }
                c.backtrans = None;
                c.regime.kind = crate::data::RegimeKind::Mix;
                c.paths.mined = None;
            }
            AblationAxis::Alpha => {
                let bt = c.backtrans.get_or_insert_with(BackTransConfig::default);
                bt.mode = BackTransMode::Ctc;
                bt.alpha = setting.parse().map_err(|_| bad())?;
            }
        }
        c.paths.run_id = format!("{}-{}-{setting}", base.paths.run_id, self.header().to_lowercase());
        Ok(c)
    }
}

pub const NON_COMPARABLE: &str =
    "# fixture-scale runs: these numbers are not comparable to results on the full corpus";

/// One row of an ablation table; `result` is `(bleu, token accuracy %)`.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: String,
    pub result: std::result::Result<(f64, f64), String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }

    /// Tab-separated: a comment line, a header, one row per setting. Failed
    /// cells read `failed` and carry their error in a trailing comment.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{NON_COMPARABLE}");
        let _ = writeln!(out, "{}\tBLEU Score\tToken Acc.", self.axis.header());
        for r in &self.rows {
            match &r.result {
                Ok((b, t)) => {
                    let _ = writeln!(out, "{}\t{b:.2}\t{t:.2}", r.setting);
                }
                Err(e) => {
                    let _ = writeln!(out, "{}\tfailed\tfailed\t# {}", r.setting, e.replace(['\n', '\t'], " "));
                }
            }
        }
        out
    }
}

/// Trains and evaluates one model per setting of `axis`, writing the table
/// to `out` after every cell so a failure leaves a partial table behind.
/// Cells are scored on `paths.test`, or on the annotated training file when
/// no test file is configured.
pub fn ablation(base: &RunConfig, axis: AblationAxis, out: &Path) -> Result<AblationTable> {
    base.validate()?;
    let eval_path = base.paths.test.clone().unwrap_or_else(|| base.paths.annotated.clone());
    let eval_corpus = load_annotated(&eval_path, Split::Test)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut table = AblationTable { axis, rows: Vec::new() };
    for setting in axis.settings() {
        let result = (|| {
            let mut c = axis.cell_config(base, &setting)?;
            c.paths.test = None;
            let outcome = train(&c, None)?;
            let ck = checkpoint::load(&outcome.checkpoint)?;
            let r = eval::evaluate(&ck.store, &ck.dual.f, &eval_corpus, &ck.vocabs, c.train.beam)?;
            Ok::<_, Error>((r.corpus_bleu, 100.0 * r.token_accuracy))
        })();
        if let Err(e) = &result {
            log::error!("{} = {setting}: {e}", axis.header());
        }
        table.rows.push(AblationRow {
            setting,
            result: result.map_err(|e| e.to_string()),
        });
        fs::write(out, table.to_tsv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(table)
}
