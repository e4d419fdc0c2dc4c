//! Corpus BLEU, token accuracy and test-set evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{encode_source, Corpus};
use crate::decode::{beam_search, ModelScorer};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::tokenizer::{Vocabs, BOS, EOS};
use crate::transformer::TransformerModel;

pub const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_pair_lists(refs: usize, hyps: usize) -> Result<()> {
    if refs != hyps {
        return Err(Error::invalid(format!("{refs} references but {hyps} hypotheses")));
    }
    if refs == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(())
}

/// Clipped n-gram matches and hypothesis n-gram totals for `n = 1..=4`,
/// summed over the corpus.
fn match_stats(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for (r, h) in references.iter().zip(hypotheses) {
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    (matches, totals)
}

/// Corpus-level BLEU-4 on a 0–100 scale.
///
/// Precision for `n >= 2` is add-one smoothed (`(m+1)/(t+1)`) when its
/// clipped match count `m` is zero. No unigram match, or an empty
/// hypothesis side, scores 0. The brevity penalty is `exp(1 - r/c)` when
/// the total hypothesis length `c` is below the reference length `r`.
pub fn corpus_bleu(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64> {
    check_pair_lists(references.len(), hypotheses.len())?;
    let (matches, totals) = match_stats(references, hypotheses);
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..MAX_ORDER {
        let p = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / MAX_ORDER as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}

pub fn sentence_bleu(reference: &[usize], hypothesis: &[usize]) -> f64 {
    corpus_bleu(&[reference.to_vec()], &[hypothesis.to_vec()]).expect("one pair")
}

/// Corpus-level clipped unigram precision in `[0, 1]`.
pub fn token_accuracy(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64> {
    check_pair_lists(references.len(), hypotheses.len())?;
    let (matches, totals) = match_stats(references, hypotheses);
    if totals[0] == 0 {
        log::warn!("token accuracy over {} empty hypotheses is reported as 0", hypotheses.len());
        return Ok(0.0);
    }
    Ok(matches[0] as f64 / totals[0] as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub hypothesis: String,
    pub reference: String,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub token_accuracy: f64,
    pub examples: usize,
    pub zero_bleu_count: usize,
    /// What BLEU n-grams are counted over.
    pub tokenization: String,
    pub beam: usize,
    #[serde(skip)]
    pub per_example: Vec<ExampleScore>,
}

impl EvalReport {
    /// Writes the summary as pretty JSON and the per-example scores as one
    /// JSON object per line.
    pub fn save(&self, report_path: &Path, examples_path: &Path) -> Result<()> {
        for p in [report_path, examples_path] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(report_path, json + "\n").map_err(|e| Error::io(report_path, e))?;
        let mut f = fs::File::create(examples_path).map_err(|e| Error::io(examples_path, e))?;
        for ex in &self.per_example {
            let line = serde_json::to_string(ex).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(examples_path, e))?;
        }
        Ok(())
    }
}

/// Beam-decodes one intent and returns the detokenized snippet.
pub fn translate(
    store: &ParamStore,
    model: &TransformerModel,
    vocabs: &Vocabs,
    intent: &str,
    beam: usize,
) -> Result<String> {
    let max_len = model.config().max_len;
    let (src, _) = encode_source(&vocabs.intent, intent, max_len);
    let scorer = ModelScorer::new(store, model, &src)?;
    let hyp = beam_search(&scorer, BOS, EOS, beam, max_len - 1)?;
    vocabs.snippet.decode(hyp.content())
}

/// Translates every example's effective intent and scores the snippets.
/// Hypothesis and reference are both re-tokenized with the snippet
/// vocabulary before counting n-grams.
pub fn evaluate(
    store: &ParamStore,
    model: &TransformerModel,
    corpus: &Corpus,
    vocabs: &Vocabs,
    beam: usize,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty corpus"));
    }
    let mut refs = Vec::with_capacity(corpus.len());
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut per_example = Vec::with_capacity(corpus.len());
    for ex in &corpus.examples {
        let hyp_text = translate(store, model, vocabs, ex.effective_intent(), beam)?;
        let h = vocabs.snippet.encode(&hyp_text, false);
        let r = vocabs.snippet.encode(&ex.snippet, false);
        per_example.push(ExampleScore {
            hypothesis: hyp_text,
            reference: ex.snippet.clone(),
            bleu: sentence_bleu(&r, &h),
        });
        refs.push(r);
        hyps.push(h);
    }
    Ok(EvalReport {
        corpus_bleu: corpus_bleu(&refs, &hyps)?,
        token_accuracy: token_accuracy(&refs, &hyps)?,
        examples: corpus.len(),
        zero_bleu_count: per_example.iter().filter(|e| e.bleu == 0.0).count(),
        tokenization: "snippet subword pieces".to_string(),
        beam,
        per_example,
    })
}
