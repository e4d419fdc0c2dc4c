//! Corpus loading, encoding, batching and the annotated/mined mixing
//! regimes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, Vocabs, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Annotated,
    Mined,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub intent: String,
    pub rewritten_intent: Option<String>,
    pub snippet: String,
    pub source: Source,
    pub question_id: Option<i64>,
}

impl Example {
    /// The rewritten intent when there is one, else the raw intent.
    pub fn effective_intent(&self) -> &str {
        self.rewritten_intent.as_deref().unwrap_or(&self.intent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn record_err(index: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Record {
        index,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn required_str(obj: &serde_json::Map<String, Value>, index: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        None => Err(record_err(index, field, "missing")),
        Some(Value::String(s)) if s.is_empty() => Err(record_err(index, field, "empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(record_err(index, field, format!("expected a string, found {other}"))),
    }
}

fn parse_record(v: &Value, index: usize, source: Source) -> Result<Example> {
    let obj = v
        .as_object()
        .ok_or_else(|| record_err(index, "<record>", "expected an object"))?;
    let intent = required_str(obj, index, "intent")?;
    let snippet = required_str(obj, index, "snippet")?;
    let (rewritten_intent, question_id) = match source {
        Source::Mined => (None, None),
        Source::Annotated => {
            let rewritten = match obj.get("rewritten_intent") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) if s.is_empty() => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(other) => {
                    return Err(record_err(index, "rewritten_intent", format!("expected string or null, found {other}")))
                }
            };
            let qid = match obj.get("question_id") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    v.as_i64()
                        .ok_or_else(|| record_err(index, "question_id", format!("expected an integer, found {v}")))?,
                ),
            };
            (rewritten, qid)
        }
    };
    Ok(Example {
        intent,
        rewritten_intent,
        snippet,
        source,
        question_id,
    })
}

/// Reads a JSON array of annotated records.
pub fn load_annotated(path: &Path, split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{}: expected a JSON array of records", path.display())))?;
    let examples = items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_record(v, i, Source::Annotated))
        .collect::<Result<_>>()?;
    Ok(Corpus { examples, split })
}

/// Reads the first `limit` records of a newline-delimited mined file, in
/// file order. Blank lines are skipped and do not count as records.
pub fn load_mined(path: &Path, limit: usize) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if examples.len() == limit {
            break;
        }
        let index = examples.len();
        let v: Value = serde_json::from_str(line).map_err(|e| record_err(index, "<record>", e.to_string()))?;
        examples.push(parse_record(&v, index, Source::Mined)?);
    }
    Ok(Corpus {
        examples,
        split: Split::Train,
    })
}

/// Mixes a base seed with stream-specific counters (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Source sequence: intent pieces followed by eos.
pub fn encode_source(vocab: &Vocab, text: &str, max_len: usize) -> (Vec<usize>, bool) {
    let mut ids = vocab.encode(text, false);
    let cut = ids.len() + 1 > max_len;
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    (ids, cut)
}

/// Target sequence: bos, snippet pieces, eos.
pub fn encode_target(vocab: &Vocab, text: &str, max_len: usize) -> (Vec<usize>, bool) {
    let mut pieces = vocab.encode(text, false);
    let cut = pieces.len() + 2 > max_len;
    pieces.truncate(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(pieces.len() + 2);
    ids.push(BOS);
    ids.extend(pieces);
    ids.push(EOS);
    (ids, cut)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    /// Intent ids framed as a source (no bos, trailing eos).
    pub text: Vec<usize>,
    /// Snippet ids framed as a target (bos ... eos).
    pub code: Vec<usize>,
    pub source: Source,
}

impl EncodedPair {
    /// Snippet framed as a source sequence.
    pub fn code_as_source(&self) -> &[usize] {
        &self.code[1..]
    }

    /// The same pair with the roles of text and code exchanged.
    pub fn swapped(&self) -> EncodedPair {
        EncodedPair {
            text: self.code_as_source().to_vec(),
            code: self.text_as_target(),
            source: self.source,
        }
    }

    /// Intent framed as a target sequence.
    pub fn text_as_target(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.text.len() + 1);
        t.push(BOS);
        t.extend_from_slice(&self.text);
        t
    }
}

#[derive(Clone, Debug, Default)]
pub struct EncodedCorpus {
    pub pairs: Vec<EncodedPair>,
    pub truncated: usize,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, vocabs: &Vocabs, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::invalid(format!("max_len {max_len} leaves no room for tokens")));
        }
        let mut truncated = 0;
        let pairs = corpus
            .examples
            .iter()
            .map(|ex| {
                let (text, a) = encode_source(&vocabs.intent, ex.effective_intent(), max_len);
                let (code, b) = encode_target(&vocabs.snippet, &ex.snippet, max_len);
                truncated += usize::from(a || b);
                EncodedPair {
                    text,
                    code,
                    source: ex.source,
                }
            })
            .collect();
        if truncated > 0 {
            log::info!("truncated {truncated} of {} examples to max_len {max_len}", corpus.len());
        }
        Ok(EncodedCorpus { pairs, truncated })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Padded batch. Row `i` of `src` holds `src_lens[i]` real tokens followed
/// by pad; likewise for `tgt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub sources: Vec<Source>,
    /// Per-row loss weight.
    pub weights: Vec<f64>,
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let width = lens.iter().copied().max().unwrap_or(0);
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (rows, lens)
}

impl Batch {
    /// Builds a batch from `(pair, weight)` rows.
    pub fn from_pairs<'a>(rows: impl IntoIterator<Item = (&'a EncodedPair, f64)>) -> Batch {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        for (p, w) in rows {
            src.push(p.text.clone());
            tgt.push(p.code.clone());
            sources.push(p.source);
            weights.push(w);
        }
        let (src, src_lens) = pad_rows(src);
        let (tgt, tgt_lens) = pad_rows(tgt);
        Batch {
            src,
            tgt,
            src_lens,
            tgt_lens,
            sources,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_row(&self, i: usize) -> &[usize] {
        &self.src[i][..self.src_lens[i]]
    }

    pub fn tgt_row(&self, i: usize) -> &[usize] {
        &self.tgt[i][..self.tgt_lens[i]]
    }

    pub fn src_pad_mask(&self, i: usize) -> Vec<bool> {
        (0..self.src[i].len()).map(|j| j >= self.src_lens[i]).collect()
    }

    pub fn tgt_pad_mask(&self, i: usize) -> Vec<bool> {
        (0..self.tgt[i].len()).map(|j| j >= self.tgt_lens[i]).collect()
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

/// Seeded permutation of `0..n` for one pass over a data stream.
fn epoch_order(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream, epoch]));
    idx.shuffle(&mut rng);
    idx
}

/// One shuffled epoch of `corpus` cut into batches of at most `batch_size`
/// rows; the last batch holds the remainder.
pub fn make_batches(corpus: &EncodedCorpus, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let order = epoch_order(corpus.len(), seed, 0, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch::from_pairs(c.iter().map(|&i| (&corpus.pairs[i], 1.0))))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    Mix,
    Sample,
    Finetune,
}

impl std::str::FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix" => Ok(RegimeKind::Mix),
            "sample" => Ok(RegimeKind::Sample),
            "finetune" => Ok(RegimeKind::Finetune),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected mix, sample or finetune)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub kind: RegimeKind,
    /// Loss weight of mined rows under `Sample`.
    pub alpha: f64,
    /// Number of mined-only steps under `Finetune`.
    pub pretrain_steps: u64,
    pub mined_limit: usize,
    /// Shuffle the mined file before applying `mined_limit`.
    pub shuffle_mined: bool,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            kind: RegimeKind::Mix,
            alpha: 1.0,
            pretrain_steps: 1000,
            mined_limit: 100_000,
            shuffle_mined: false,
        }
    }
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("regime alpha {} must be a finite value >= 0", self.alpha)));
        }
        if self.kind == RegimeKind::Finetune && self.pretrain_steps == 0 {
            return Err(Error::Config("finetune needs pretrain_steps > 0".into()));
        }
        Ok(())
    }
}

/// Applies `mined_limit` (and the optional pre-limit shuffle) to a loaded
/// mined corpus.
pub fn limit_mined(mut mined: Corpus, cfg: &RegimeConfig, seed: u64) -> Corpus {
    if cfg.shuffle_mined {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
        mined.examples.shuffle(&mut rng);
    }
    mined.examples.truncate(cfg.mined_limit);
    mined
}

const STREAM_UNION: u64 = 1;
const STREAM_ANNOTATED: u64 = 2;
const STREAM_MINED: u64 = 3;

/// Produces the batch for any optimizer step as a pure function of
/// `(seed, step)`, so runs are replayable and resumable.
pub struct RegimeSource<'a> {
    pub regime: RegimeConfig,
    pub annotated: &'a EncodedCorpus,
    pub mined: &'a EncodedCorpus,
    pub batch_size: usize,
    pub seed: u64,
}

impl RegimeSource<'_> {
    /// Batch and per-row weights for 1-based `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        if step == 0 {
            return Err(Error::invalid("steps are counted from 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let b = self.batch_size;
        match self.regime.kind {
            RegimeKind::Mix => {
                let n_a = self.annotated.len();
                let total = n_a + self.mined.len();
                if total == 0 {
                    return Err(Error::invalid("mix regime needs at least one example"));
                }
                let idx = epoch_aligned(total, b, self.seed, STREAM_UNION, step - 1);
                Ok(Batch::from_pairs(idx.into_iter().map(|i| {
                    let p = if i < n_a { &self.annotated.pairs[i] } else { &self.mined.pairs[i - n_a] };
                    (p, 1.0)
                })))
            }
            RegimeKind::Sample => {
                let (half_a, half_m) = (b.div_ceil(2), b / 2);
                if self.annotated.is_empty() || (half_m > 0 && self.mined.is_empty()) {
                    return Err(Error::invalid("sample regime needs both annotated and mined examples"));
                }
                let a = continuous(self.annotated.len(), half_a, self.seed, STREAM_ANNOTATED, step - 1);
                let m = continuous(self.mined.len(), half_m, self.seed, STREAM_MINED, step - 1);
                let alpha = self.regime.alpha;
                Ok(Batch::from_pairs(
                    a.into_iter()
                        .map(|i| (&self.annotated.pairs[i], 1.0))
                        .chain(m.into_iter().map(|i| (&self.mined.pairs[i], alpha))),
                ))
            }
            RegimeKind::Finetune => {
                let (corpus, stream, k) = if step <= self.regime.pretrain_steps {
                    (self.mined, STREAM_MINED, step - 1)
                } else {
                    (self.annotated, STREAM_ANNOTATED, step - 1 - self.regime.pretrain_steps)
                };
                if corpus.is_empty() {
                    return Err(Error::invalid(format!("finetune phase at step {step} has no examples")));
                }
                let idx = epoch_aligned(corpus.len(), b, self.seed, stream, k);
                Ok(Batch::from_pairs(idx.into_iter().map(|i| (&corpus.pairs[i], 1.0))))
            }
        }
    }
}

/// Batch for 1-based `step` of an epoch-aligned stream over one corpus.
/// Distinct `stream` ids give independent shuffles of the same corpus.
pub fn stream_batch(corpus: &EncodedCorpus, batch_size: usize, seed: u64, stream: u64, step: u64) -> Result<Batch> {
    if step == 0 || batch_size == 0 {
        return Err(Error::invalid("step and batch_size must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot draw a batch from an empty corpus"));
    }
    let idx = epoch_aligned(corpus.len(), batch_size, seed, stream, step - 1);
    Ok(Batch::from_pairs(idx.into_iter().map(|i| (&corpus.pairs[i], 1.0))))
}

/// Index set of batch `k` when each epoch over `n` items is cut into
/// `⌈n/b⌉` batches.
fn epoch_aligned(n: usize, b: usize, seed: u64, stream: u64, k: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(b) as u64;
    let (epoch, j) = (k / per_epoch, (k % per_epoch) as usize);
    let order = epoch_order(n, seed, stream, epoch);
    order[j * b..((j + 1) * b).min(n)].to_vec()
}

/// Items `k·take .. (k+1)·take` of an endless stream of shuffled epochs.
fn continuous(n: usize, take: usize, seed: u64, stream: u64, k: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(take);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for t in 0..take as u64 {
        let pos = k * take as u64 + t;
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_order(n, seed, stream, epoch)));
        }
        let order = &cached.as_ref().expect("filled above").1;
        out.push(order[(pos % n as u64) as usize]);
    }
    out
}

/// Training texts for the two vocabularies: effective intents and snippets
/// of every supplied training corpus.
pub fn tokenizer_corpora<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Result<(Vec<&'a str>, Vec<&'a str>)> {
    let mut intents = Vec::new();
    let mut snippets = Vec::new();
    for c in corpora {
        if c.split == Split::Test {
            return Err(Error::invalid("vocabularies must not be trained on the test split"));
        }
        for ex in &c.examples {
            intents.push(ex.effective_intent());
            snippets.push(ex.snippet.as_str());
        }
    }
    Ok((intents, snippets))
}
