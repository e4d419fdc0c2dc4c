//! Run configuration: one TOML file with every default filled in, plus
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtrans::{BackTransConfig, BackTransMode};
use crate::data::{RegimeConfig, RegimeKind};
use crate::error::{Error, Result};
use crate::strategy::StrategySettings;
use crate::tensor::{AdamState, LrSchedule, Optimizer, ParamStore};
use crate::transformer::TransformerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 400,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self, store: &ParamStore, d_model: usize) -> Optimizer {
        Optimizer {
            adam: AdamState::new(store, self.beta1, self.beta2, self.epsilon),
            schedule: LrSchedule::with_peak(d_model, self.warmup_steps, self.lr),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Evaluation and checkpoint interval in steps; 0 means only at the end.
    pub eval_every: u64,
    /// Beam width for periodic evaluation and the evaluate/translate commands.
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 2000,
            eval_every: 500,
            beam: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub intent_vocab_size: usize,
    pub snippet_vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            intent_vocab_size: 4000,
            snippet_vocab_size: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub dropout: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            init: 2,
            dropout: 3,
            noise: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub annotated: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mined: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub vocab_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
    pub run_id: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotated: "fixtures/annotated.json".into(),
            mined: Some("fixtures/mined.jsonl".into()),
            test: Some("fixtures/annotated_test.json".into()),
            vocab_dir: "runs/vocab".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            metrics_dir: "runs/metrics".into(),
            run_id: "default".into(),
        }
    }
}

impl Paths {
    pub fn run_checkpoints(&self) -> PathBuf {
        self.checkpoint_dir.join(&self.run_id)
    }

    pub fn metrics_file(&self) -> PathBuf {
        self.metrics_dir.join(&self.run_id).join("metrics.jsonl")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub regime: RegimeConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backtrans: Option<BackTransConfig>,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub tokenizer: TokenizerConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mined_limit: Option<usize>,
    pub regime: Option<RegimeKind>,
    pub mode: Option<BackTransMode>,
    pub alpha: Option<f64>,
    pub beam: Option<usize>,
    pub max_steps: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// `--seed` sets every seed; `--alpha` applies to the back-translation
    /// weight when a mode is active and to the Sample weight otherwise.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = Seeds {
                data: s,
                init: s,
                dropout: s,
                noise: s,
            };
        }
        if let Some(n) = o.mined_limit {
            self.regime.mined_limit = n;
        }
        if let Some(k) = o.regime {
            self.regime.kind = k;
        }
        if let Some(m) = o.mode {
            self.backtrans.get_or_insert_with(BackTransConfig::default).mode = m;
        }
        if let Some(a) = o.alpha {
            match &mut self.backtrans {
                Some(bt) => bt.alpha = a,
                None => self.regime.alpha = a,
            }
        }
        if let Some(b) = o.beam {
            self.train.beam = b;
        }
        if let Some(n) = o.max_steps {
            self.train.max_steps = n;
        }
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.regime.validate()?;
        if let Some(bt) = &self.backtrans {
            bt.validate()?;
            if bt.soft_max_len > self.model.max_len {
                return Err(Error::Config(format!(
                    "soft_max_len {} exceeds model max_len {}",
                    bt.soft_max_len, self.model.max_len
                )));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.warmup_steps == 0 {
            return Err(Error::Config("optimizer lr and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if o.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        if self.train.batch_size == 0 || self.train.beam == 0 {
            return Err(Error::Config("batch_size and beam must be positive".into()));
        }
        if self.paths.run_id.is_empty() || self.paths.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id `{}` must be a plain name", self.paths.run_id)));
        }
        let needs_mined = self.backtrans.is_some() || self.regime.kind != RegimeKind::Mix;
        if needs_mined && self.paths.mined.is_none() {
            return Err(Error::Config(format!(
                "training strategy `{}` needs paths.mined",
                self.strategy_settings().strategy_name()
            )));
        }
        Ok(())
    }

    pub fn strategy_settings(&self) -> StrategySettings {
        StrategySettings {
            regime: self.regime.clone(),
            backtrans: self.backtrans.clone(),
        }
    }
}
