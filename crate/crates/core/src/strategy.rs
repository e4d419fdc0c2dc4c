//! Training strategies: every way of turning one optimizer step's data into
//! a loss sits behind [`TrainingStrategy`] and is looked up by name.

use std::fmt;

use crate::backtrans::{build_backtrans, BackTransConfig, BackTransMode, DualModel};
use crate::data::{EncodedCorpus, RegimeConfig, RegimeKind, RegimeSource};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::transformer::{batch_nll, NllRow, SeqInput};

/// Everything a strategy may read while building a step's loss.
pub struct StepInputs<'a> {
    pub dual: &'a DualModel,
    pub annotated: &'a EncodedCorpus,
    pub mined: &'a EncodedCorpus,
    pub batch_size: usize,
    pub data_seed: u64,
    pub noise_seed: u64,
}

/// A named loss term and its weight in the total.
pub struct LossTerm {
    pub name: &'static str,
    pub value: Var,
    pub weight: f64,
}

pub struct StepLoss {
    pub total: Var,
    pub terms: Vec<LossTerm>,
}

impl StepLoss {
    /// `Σ weight · value` over `terms`.
    pub fn weighted_sum(g: &mut Graph, terms: Vec<LossTerm>) -> Result<StepLoss> {
        let mut total: Option<Var> = None;
        for t in &terms {
            let s = g.scale(t.value, t.weight);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("a step loss needs at least one term"))?;
        Ok(StepLoss { total, terms })
    }
}

pub trait TrainingStrategy {
    /// Registry key, e.g. `"sample"` or `"ctc-noise"`.
    fn name(&self) -> &'static str;

    /// Whether the strategy reads mined examples at all.
    fn needs_mined(&self) -> bool;

    /// Builds the loss for 1-based `step` on a training-mode graph.
    fn loss(&self, g: &mut Graph, inputs: &StepInputs, step: u64) -> Result<StepLoss>;
}

impl fmt::Debug for dyn TrainingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TrainingStrategy({})", self.name())
    }
}

/// Settings a strategy may be built from.
#[derive(Clone, Debug, Default)]
pub struct StrategySettings {
    pub regime: RegimeConfig,
    pub backtrans: Option<BackTransConfig>,
}

impl StrategySettings {
    /// Registry key implied by the settings: the back-translation mode when
    /// one is configured, otherwise the data regime.
    pub fn strategy_name(&self) -> &'static str {
        match &self.backtrans {
            Some(bt) => bt.mode.name(),
            None => match self.regime.kind {
                RegimeKind::Mix => "mix",
                RegimeKind::Sample => "sample",
                RegimeKind::Finetune => "finetune",
            },
        }
    }
}

type Constructor = fn(&StrategySettings) -> Result<Box<dyn TrainingStrategy>>;

pub struct StrategyRegistry {
    entries: Vec<(&'static str, Constructor)>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry { entries: Vec::new() }
    }

    /// Registry with the supervised regimes and all back-translation modes.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("mix", |s| Supervised::boxed(s, RegimeKind::Mix));
        r.register("sample", |s| Supervised::boxed(s, RegimeKind::Sample));
        r.register("finetune", |s| Supervised::boxed(s, RegimeKind::Finetune));
        r.register("ctc", |s| build_backtrans(s, BackTransMode::Ctc));
        r.register("ctc-noise", |s| build_backtrans(s, BackTransMode::CtcNoise));
        r.register("tct", |s| build_backtrans(s, BackTransMode::Tct));
        r.register("cycle", |s| build_backtrans(s, BackTransMode::Cycle));
        r
    }

    /// Adds or replaces the constructor registered under `name`.
    pub fn register(&mut self, name: &'static str, ctor: Constructor) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = ctor,
            None => self.entries.push((name, ctor)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }

    pub fn create(&self, name: &str, settings: &StrategySettings) -> Result<Box<dyn TrainingStrategy>> {
        let (_, ctor) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                let known: Vec<_> = self.names().collect();
                Error::Config(format!("unknown training strategy `{name}` (known: {})", known.join(", ")))
            })?;
        ctor(settings)
    }
}

/// Teacher-forced cross-entropy on the text→code model over batches drawn
/// by a data regime.
pub struct Supervised {
    regime: RegimeConfig,
}

impl Supervised {
    pub fn new(regime: RegimeConfig) -> Result<Self> {
        regime.validate()?;
        Ok(Supervised { regime })
    }

    fn boxed(settings: &StrategySettings, kind: RegimeKind) -> Result<Box<dyn TrainingStrategy>> {
        let regime = RegimeConfig {
            kind,
            ..settings.regime.clone()
        };
        Ok(Box::new(Self::new(regime)?))
    }
}

impl TrainingStrategy for Supervised {
    fn name(&self) -> &'static str {
        match self.regime.kind {
            RegimeKind::Mix => "mix",
            RegimeKind::Sample => "sample",
            RegimeKind::Finetune => "finetune",
        }
    }

    fn needs_mined(&self) -> bool {
        self.regime.kind != RegimeKind::Mix
    }

    fn loss(&self, g: &mut Graph, inputs: &StepInputs, step: u64) -> Result<StepLoss> {
        let source = RegimeSource {
            regime: self.regime.clone(),
            annotated: inputs.annotated,
            mined: inputs.mined,
            batch_size: inputs.batch_size,
            seed: inputs.data_seed,
        };
        let batch = source.batch(step)?;
        let rows: Vec<NllRow> = (0..batch.len())
            .map(|i| NllRow {
                src: SeqInput::Tokens(batch.src_row(i)),
                tgt: batch.tgt_row(i),
                weight: batch.weights[i],
            })
            .collect();
        let nll = batch_nll(g, &inputs.dual.f, &rows)?;
        StepLoss::weighted_sum(
            g,
            vec![LossTerm {
                name: "nll",
                value: nll,
                weight: 1.0,
            }],
        )
    }
}
