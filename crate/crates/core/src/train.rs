//! One optimizer step for any [`TrainingStrategy`].

use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::strategy::{StepInputs, TrainingStrategy};
use crate::tensor::{Graph, Mode, Optimizer, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponent {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub mode: String,
    pub components: Vec<LossComponent>,
    pub total: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// Forward, backward and parameter update for 1-based `step`. Dropout
/// masks are drawn from `dropout_seed` and the step number, so a step is
/// reproducible on its own.
pub fn train_step(
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    strategy: &dyn TrainingStrategy,
    inputs: &StepInputs,
    step: u64,
    dropout_seed: u64,
) -> Result<LossReport> {
    let (components, total, grads) = {
        let mut g = Graph::new(store, Mode::Train, derive_seed(dropout_seed, &[step]));
        let loss = strategy.loss(&mut g, inputs, step)?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(Error::NaN("training loss"));
        }
        let components = loss
            .terms
            .iter()
            .map(|t| LossComponent {
                name: t.name.to_string(),
                value: g.value(t.value).item(),
                weight: t.weight,
            })
            .collect();
        (components, total, g.backward(loss.total)?)
    };
    store.accumulate(&grads);
    let lr = optimizer.step(store)?;
    Ok(LossReport {
        step,
        mode: strategy.name().to_string(),
        components,
        total,
        lr,
    })
}
