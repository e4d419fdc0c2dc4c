//! Beam search over any next-token scorer.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Graph, ParamStore, Tensor};
use crate::transformer::{SeqInput, TransformerModel};

pub const LENGTH_PENALTY: f64 = 0.6;

/// Next-token log-probabilities given a bos-rooted prefix.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Bos-rooted; ends with eos when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of generated tokens (bos excluded).
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// `logprob / generated^0.6`.
    pub fn score(&self) -> f64 {
        normalized(self.logprob, self.generated())
    }

    /// Generated tokens without bos and the final eos.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

pub fn normalized(logprob: f64, len: usize) -> f64 {
    logprob / (len.max(1) as f64).powf(LENGTH_PENALTY)
}

/// Higher score first; equal scores fall back to the token sequence so that
/// lower token ids win.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > f64::NEG_INFINITY).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keeps the `beam` best expansions (by cumulative log-probability) of the
/// live hypotheses at every step. Expansions that emit eos are set aside
/// as finished and compared by length-normalized score; generation stops
/// when no live hypothesis can still beat the best finished one, or after
/// `max_len` generated tokens. Returns the best finished hypothesis, or the
/// best live one when nothing finished.
pub fn beam_search(scorer: &dyn StepScorer, bos: usize, eos: usize, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![bos], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 1..=max_len {
        let mut cands = Vec::new();
        for (tokens, lp) in &live {
            let scores = scorer.log_probs(tokens)?;
            for tok in top_k(&scores, beam) {
                let mut next = tokens.clone();
                next.push(tok);
                cands.push((next, lp + scores[tok]));
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam);
        live.clear();
        for (tokens, lp) in cands {
            if *tokens.last().expect("non-empty") == eos {
                finished.push(Hypothesis { tokens, logprob: lp, finished: true });
            } else {
                live.push((tokens, lp));
            }
        }
        if live.is_empty() || t == max_len {
            break;
        }
        // Extensions can only lower the log-probability, so the best score a
        // live hypothesis can still reach is its logprob over max_len^0.6.
        let best_done = finished.iter().map(Hypothesis::score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|(_, lp)| normalized(*lp, max_len)).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_live {
            break;
        }
    }
    if finished.is_empty() {
        let (tokens, logprob) = live.into_iter().next().ok_or_else(|| Error::invalid("scorer produced no candidates"))?;
        return Ok(Hypothesis { tokens, logprob, finished: false });
    }
    let mut best = finished.swap_remove(0);
    for h in finished {
        let (a, b) = (h.score(), best.score());
        if a > b || (a == b && h.tokens < best.tokens) {
            best = h;
        }
    }
    Ok(best)
}

/// Argmax decoding; stops at eos or after `max_len` tokens.
pub fn greedy(scorer: &dyn StepScorer, bos: usize, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = vec![bos];
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let scores = scorer.log_probs(&tokens)?;
        let tok = top_k(&scores, 1)[0];
        logprob += scores[tok];
        tokens.push(tok);
        if tok == eos {
            return Ok(Hypothesis { tokens, logprob, finished: true });
        }
    }
    Ok(Hypothesis { tokens, logprob, finished: false })
}

/// Scores prefixes with a trained model in eval mode; the source is encoded
/// once.
pub struct ModelScorer<'a> {
    store: &'a ParamStore,
    model: &'a TransformerModel,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(store: &'a ParamStore, model: &'a TransformerModel, src: &[usize]) -> Result<Self> {
        let mut g = Graph::eval(store);
        let m = model.encode(&mut g, SeqInput::Tokens(src), &[])?;
        Ok(ModelScorer {
            store,
            model,
            memory: g.value(m).clone(),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::eval(self.store);
        let memory = g.constant(self.memory.clone());
        let hidden = self.model.decode_hidden(&mut g, SeqInput::Tokens(prefix), memory, &[])?;
        let last = if prefix.len() == 1 { hidden } else { g.slice_rows(hidden, prefix.len() - 1, 1)? };
        let logits = self.model.project(&mut g, last)?;
        Ok(log_softmax_rows(g.value(logits)).into_data())
    }
}
