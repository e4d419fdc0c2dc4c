//! Dual text→code / code→text models trained through soft intermediate
//! sequences, so reconstruction losses backpropagate into both models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, stream_batch, Batch};
use crate::error::{Error, Result};
use crate::strategy::{LossTerm, StepInputs, StepLoss, StrategySettings, TrainingStrategy};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::tokenizer::{BOS, EOS, PAD};
use crate::transformer::{batch_nll, NllRow, SeqInput, TransformerConfig, TransformerModel};

/// `F` translates text to code, `G` code to text.
#[derive(Clone, Debug)]
pub struct DualModel {
    pub f: TransformerModel,
    pub g: TransformerModel,
}

impl DualModel {
    pub const F_PREFIX: &'static str = "F";
    pub const G_PREFIX: &'static str = "G";

    /// Registers both models in `store`. `base.src_vocab` and
    /// `base.tgt_vocab` are ignored in favour of the two vocabulary sizes.
    pub fn new<R: Rng>(
        base: &TransformerConfig,
        text_vocab: usize,
        code_vocab: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let f_cfg = TransformerConfig {
            src_vocab: text_vocab,
            tgt_vocab: code_vocab,
            ..base.clone()
        };
        let g_cfg = TransformerConfig {
            src_vocab: code_vocab,
            tgt_vocab: text_vocab,
            ..base.clone()
        };
        Ok(DualModel {
            f: TransformerModel::new(f_cfg, store, Self::F_PREFIX, rng)?,
            g: TransformerModel::new(g_cfg, store, Self::G_PREFIX, rng)?,
        })
    }
}

/// Row `j` of `dists` is the model's output distribution at generation step
/// `j`; `logits` holds the matching pre-softmax scores.
#[derive(Clone, Copy, Debug)]
pub struct SoftSequence {
    pub dists: Var,
    pub logits: Var,
    /// Number of rows; the first row whose argmax is eos is included.
    pub stop_length: usize,
}

/// How many soft steps to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftLength {
    /// Stop after the first step whose argmax is eos, or at the cap.
    UntilEos(usize),
    /// Exactly this many steps.
    Fixed(usize),
}

/// Autoregressive decoding where each step feeds the previous step's full
/// output distribution back through the embedding table. The argmax is
/// only used to decide when to stop.
pub fn generate_soft(g: &mut Graph, model: &TransformerModel, src: SeqInput, length: SoftLength) -> Result<SoftSequence> {
    let cap = match length {
        SoftLength::UntilEos(n) | SoftLength::Fixed(n) => n,
    };
    if cap == 0 {
        return Err(Error::invalid("soft generation length must be at least 1"));
    }
    if cap > model.config().max_len {
        return Err(Error::invalid(format!(
            "soft generation length {cap} exceeds max_len {}",
            model.config().max_len
        )));
    }
    let vocab = model.config().tgt_vocab;
    let memory = model.encode(g, src, &[])?;
    let bos = g.constant(Tensor::one_hot_rows(&[BOS], vocab));
    let mut inputs = vec![bos];
    let mut dists = Vec::with_capacity(cap);
    let mut logits = Vec::with_capacity(cap);
    for j in 0..cap {
        let dec_in = if j == 0 { bos } else { g.concat_rows(&inputs)? };
        let hidden = model.decode_hidden(g, SeqInput::Soft(dec_in), memory, &[])?;
        let last = if j == 0 { hidden } else { g.slice_rows(hidden, j, 1)? };
        let l = model.project(g, last)?;
        let p = g.softmax(l)?;
        logits.push(l);
        dists.push(p);
        inputs.push(p);
        if matches!(length, SoftLength::UntilEos(_)) && g.value(l).argmax_rows()[0] == EOS {
            break;
        }
    }
    let stop_length = dists.len();
    let cat = |g: &mut Graph, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat_rows(v) };
    Ok(SoftSequence {
        dists: cat(g, &dists)?,
        logits: cat(g, &logits)?,
        stop_length,
    })
}

const NOISE_EPS: f64 = 1e-9;

/// `softmax(log(p + ε) + n)`, `n ~ N(0, σ²)` per entry. `σ = 0` returns the
/// input unchanged.
pub fn add_noise<R: Rng>(g: &mut Graph, dists: Var, sigma: f64, rng: &mut R) -> Result<Var> {
    if sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(dists);
    }
    let shape = g.shape(dists).to_vec();
    let eps = g.constant(Tensor::full(&shape, NOISE_EPS));
    let shifted = g.add(dists, eps)?;
    let logp = g.log(shifted);
    let n = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let noise = g.constant(Tensor::new(shape, noise)?);
    let z = g.add(logp, noise)?;
    g.softmax(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackTransMode {
    Ctc,
    CtcNoise,
    Tct,
    Cycle,
}

impl BackTransMode {
    pub const ALL: [BackTransMode; 4] = [BackTransMode::Ctc, BackTransMode::CtcNoise, BackTransMode::Tct, BackTransMode::Cycle];

    pub fn name(self) -> &'static str {
        match self {
            BackTransMode::Ctc => "ctc",
            BackTransMode::CtcNoise => "ctc-noise",
            BackTransMode::Tct => "tct",
            BackTransMode::Cycle => "cycle",
        }
    }
}

impl std::str::FromStr for BackTransMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected ctc, ctc-noise, tct or cycle)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackTransConfig {
    pub mode: BackTransMode,
    /// Weight of the code reconstruction loss (and of text reconstruction
    /// under `tct`).
    pub alpha: f64,
    /// Weight of the text reconstruction loss under `cycle`.
    pub alpha_text: f64,
    pub noise_sigma: f64,
    pub soft_max_len: usize,
    /// Parameter-name prefixes excluded from updates, e.g. `["G"]`.
    pub freeze: Vec<String>,
}

impl Default for BackTransConfig {
    fn default() -> Self {
        BackTransConfig {
            mode: BackTransMode::Ctc,
            alpha: 0.1,
            alpha_text: 0.1,
            noise_sigma: 0.05,
            soft_max_len: 32,
            freeze: Vec::new(),
        }
    }
}

impl BackTransConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.alpha_text) {
            return Err(Error::Config("back-translation alphas must be finite and >= 0".into()));
        }
        if !finite_nonneg(self.noise_sigma) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if self.soft_max_len == 0 {
            return Err(Error::Config("soft_max_len must be at least 1".into()));
        }
        for p in &self.freeze {
            if p != DualModel::F_PREFIX && p != DualModel::G_PREFIX {
                return Err(Error::Config(format!("cannot freeze unknown model `{p}` (expected F or G)")));
            }
        }
        Ok(())
    }
}

/// Builds the back-translation strategy for `mode`, taking every other
/// setting from `settings.backtrans` (or its defaults).
pub fn build_backtrans(settings: &StrategySettings, mode: BackTransMode) -> Result<Box<dyn TrainingStrategy>> {
    let cfg = BackTransConfig {
        mode,
        ..settings.backtrans.clone().unwrap_or_default()
    };
    cfg.validate()?;
    Ok(Box::new(BackTranslation { cfg }))
}

const STREAM_ANNOTATED: u64 = 11;
// ctc and tct draw their mined batch from the same stream; cycle adds a
// second, independent one for the text side.
const STREAM_CODE: u64 = 12;
const STREAM_TEXT: u64 = 13;

/// Which model produces the soft intermediate and which reconstructs.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// code → G → soft text → F → code
    CodeTextCode,
    /// text → F → soft code → G → text
    TextCodeText,
}

pub struct BackTranslation {
    cfg: BackTransConfig,
}

impl BackTranslation {
    pub fn config(&self) -> &BackTransConfig {
        &self.cfg
    }

    /// Mined half of the step's examples.
    fn batches(&self, inputs: &StepInputs, stream: u64, step: u64) -> Result<Batch> {
        let n = (inputs.batch_size / 2).max(1);
        stream_batch(inputs.mined, n, inputs.data_seed, stream, step)
    }

    /// Teacher-forced loss of one model on the annotated batch.
    fn supervised(&self, g: &mut Graph, inputs: &StepInputs, batch: &Batch, dir: Direction) -> Result<Var> {
        let flipped: Vec<(Vec<usize>, Vec<usize>)>;
        let rows: Vec<NllRow> = match dir {
            Direction::CodeTextCode => (0..batch.len())
                .map(|i| NllRow {
                    src: SeqInput::Tokens(batch.src_row(i)),
                    tgt: batch.tgt_row(i),
                    weight: 1.0,
                })
                .collect(),
            Direction::TextCodeText => {
                flipped = (0..batch.len()).map(|i| flip(batch, i)).collect();
                flipped
                    .iter()
                    .map(|(s, t)| NllRow {
                        src: SeqInput::Tokens(s),
                        tgt: t,
                        weight: 1.0,
                    })
                    .collect()
            }
        };
        let model = if dir == Direction::CodeTextCode { &inputs.dual.f } else { &inputs.dual.g };
        batch_nll(g, model, &rows)
    }

    /// Reconstruction loss over `batch` in direction `dir`. With
    /// `supervise_intermediate`, the soft intermediate is generated to the
    /// length of the paired ground truth and also scored against it.
    fn reconstruct(
        &self,
        g: &mut Graph,
        inputs: &StepInputs,
        batch: &Batch,
        dir: Direction,
        step: u64,
        supervise_intermediate: bool,
    ) -> Result<(Var, Option<Var>)> {
        let (first, second) = match dir {
            Direction::CodeTextCode => (&inputs.dual.g, &inputs.dual.f),
            Direction::TextCodeText => (&inputs.dual.f, &inputs.dual.g),
        };
        let noise = self.cfg.mode == BackTransMode::CtcNoise;
        let mut soft = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        let mut inter_targets = Vec::new();
        let mut recon_targets = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            // source of the first model, its paired intermediate, target of the second
            let (code, text) = flip(batch, i);
            let (src, inter, tgt) = match dir {
                Direction::CodeTextCode => (code, batch.src_row(i).to_vec(), batch.tgt_row(i).to_vec()),
                Direction::TextCodeText => (batch.src_row(i).to_vec(), code, text),
            };
            let length = if supervise_intermediate {
                SoftLength::Fixed(inter.len())
            } else {
                SoftLength::UntilEos(self.cfg.soft_max_len)
            };
            let seq = generate_soft(g, first, SeqInput::Tokens(&src), length)?;
            let mut dists = seq.dists;
            if noise {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(inputs.noise_seed, &[step, i as u64]));
                dists = add_noise(g, dists, self.cfg.noise_sigma, &mut rng)?;
            }
            soft.push(dists);
            if supervise_intermediate {
                logits.push(seq.logits);
                inter_targets.extend(inter);
            }
            recon_targets.push(tgt);
        }
        let rows: Vec<NllRow> = soft
            .iter()
            .zip(&recon_targets)
            .map(|(&d, t)| NllRow {
                src: SeqInput::Soft(d),
                tgt: t,
                weight: 1.0,
            })
            .collect();
        let rec = batch_nll(g, second, &rows)?;
        let inter = if supervise_intermediate {
            let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
            Some(g.cross_entropy(all, &inter_targets, PAD)?)
        } else {
            None
        };
        Ok((rec, inter))
    }
}

/// Row `i` with code as the source and text as the (bos-framed) target.
fn flip(batch: &Batch, i: usize) -> (Vec<usize>, Vec<usize>) {
    let code = batch.tgt_row(i)[1..].to_vec();
    let mut text = Vec::with_capacity(batch.src_lens[i] + 1);
    text.push(BOS);
    text.extend_from_slice(batch.src_row(i));
    (code, text)
}

impl TrainingStrategy for BackTranslation {
    fn name(&self) -> &'static str {
        self.cfg.mode.name()
    }

    fn needs_mined(&self) -> bool {
        true
    }

    fn loss(&self, g: &mut Graph, inputs: &StepInputs, step: u64) -> Result<StepLoss> {
        if inputs.mined.is_empty() {
            return Err(Error::invalid(format!("{} training needs mined examples", self.name())));
        }
        let half = inputs.batch_size.div_ceil(2);
        let annotated = stream_batch(inputs.annotated, half, inputs.data_seed, STREAM_ANNOTATED, step)?;
        let alpha = self.cfg.alpha;
        let terms = match self.cfg.mode {
            BackTransMode::Ctc | BackTransMode::CtcNoise => {
                let sup = self.supervised(g, inputs, &annotated, Direction::CodeTextCode)?;
                let code = self.batches(inputs, STREAM_CODE, step)?;
                let (rec, _) = self.reconstruct(g, inputs, &code, Direction::CodeTextCode, step, false)?;
                vec![term("sup", sup, 1.0), term("rec", rec, alpha)]
            }
            BackTransMode::Tct => {
                let sup = self.supervised(g, inputs, &annotated, Direction::TextCodeText)?;
                let text = self.batches(inputs, STREAM_CODE, step)?;
                let (rec, _) = self.reconstruct(g, inputs, &text, Direction::TextCodeText, step, false)?;
                vec![term("sup", sup, 1.0), term("rec", rec, alpha)]
            }
            BackTransMode::Cycle => {
                let code = self.batches(inputs, STREAM_CODE, step)?;
                let text = self.batches(inputs, STREAM_TEXT, step)?;
                let (rec_code, inter_text) = self.reconstruct(g, inputs, &code, Direction::CodeTextCode, step, true)?;
                let (rec_text, inter_code) = self.reconstruct(g, inputs, &text, Direction::TextCodeText, step, true)?;
                let sup_f = self.supervised(g, inputs, &annotated, Direction::CodeTextCode)?;
                let sup_g = self.supervised(g, inputs, &annotated, Direction::TextCodeText)?;
                let inter_code = inter_code.expect("requested above");
                let inter_text = inter_text.expect("requested above");
                let sup_code = g.add(sup_f, inter_code)?;
                let sup_text = g.add(sup_g, inter_text)?;
                vec![
                    term("rec_code", rec_code, alpha),
                    term("rec_text", rec_text, self.cfg.alpha_text),
                    term("sup_code", sup_code, 1.0),
                    term("sup_text", sup_text, 1.0),
                ]
            }
        };
        StepLoss::weighted_sum(g, terms)
    }
}

fn term(name: &'static str, value: Var, weight: f64) -> LossTerm {
    LossTerm { name, value, weight }
}
