//! Byte-pair-encoding subword vocabulary.
//!
//! Text is split into words at space characters; each space is replaced by
//! the marker `▁`, which starts the following word. Every other character,
//! including code punctuation, is an ordinary base symbol. Merges are learnt
//! greedily by pair frequency with lexicographic tie-breaking.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["pad", "bos", "eos", "unk"];

/// Marks a space; it is the first symbol of every word that followed one.
pub const WORD_MARKER: char = '\u{2581}';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_piece: Vec<String>,
    piece_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
}

/// Splits text into words of single-character symbols.
fn pretokenize(text: &str) -> Vec<Vec<String>> {
    let mut words = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for ch in text.chars() {
        if ch == ' ' {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            cur.push(WORD_MARKER.to_string());
        } else {
            cur.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Highest count first; among equal counts the lexicographically smallest
    // (left, right) pair wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    symbols: Vec<String>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<(u32, u32), u64>,
    pair_words: HashMap<(u32, u32), BTreeSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Trainer {
    fn push_candidate(&mut self, pair: (u32, u32)) {
        let count = self.pair_counts.get(&pair).copied().unwrap_or(0);
        if count > 0 {
            self.heap.push(Candidate {
                count,
                left: self.symbols[pair.0 as usize].clone(),
                right: self.symbols[pair.1 as usize].clone(),
                pair,
            });
        }
    }

    fn count_word(&mut self, w: usize, sign: i64) -> Vec<(u32, u32)> {
        let (syms, freq) = &self.words[w];
        let mut touched = Vec::with_capacity(syms.len());
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            let c = self.pair_counts.entry(pair).or_insert(0);
            if sign > 0 {
                *c += freq;
                self.pair_words.entry(pair).or_default().insert(w);
            } else {
                *c -= freq;
            }
            touched.push(pair);
        }
        touched
    }

    fn pop_best(&mut self) -> Option<(u32, u32)> {
        while let Some(c) = self.heap.pop() {
            if self.pair_counts.get(&c.pair).copied() == Some(c.count) && c.count > 0 {
                return Some(c.pair);
            }
        }
        None
    }

    fn apply_merge(&mut self, pair: (u32, u32), new_sym: u32) {
        let words: Vec<usize> = self
            .pair_words
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        let mut touched = Vec::new();
        for w in words {
            if !self.words[w].0.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            touched.extend(self.count_word(w, -1));
            let old = std::mem::take(&mut self.words[w].0);
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    merged.push(new_sym);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            self.words[w].0 = merged;
            touched.extend(self.count_word(w, 1));
        }
        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            if p != pair {
                self.push_candidate(p);
            }
        }
        self.pair_counts.remove(&pair);
    }
}

impl Vocab {
    /// Learns a vocabulary of at most `vocab_size` pieces from `corpus`.
    ///
    /// Training stops early when no adjacent pair is left to merge, so small
    /// corpora yield fewer than `vocab_size` pieces.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
        }
        let mut word_freq: HashMap<Vec<String>, u64> = HashMap::new();
        for text in corpus {
            for w in pretokenize(text.as_ref()) {
                *word_freq.entry(w).or_insert(0) += 1;
            }
        }
        let alphabet: BTreeSet<String> = word_freq.keys().flatten().cloned().collect();
        if vocab_size <= alphabet.len() + NUM_SPECIALS {
            return Err(Error::invalid(format!(
                "vocab size {vocab_size} must exceed the {} base symbols plus {NUM_SPECIALS} specials",
                alphabet.len()
            )));
        }

        let symbols: Vec<String> = alphabet.into_iter().collect();
        let sym_id: HashMap<&str, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        // sort words so that training is independent of hash order
        let mut words: Vec<(Vec<u32>, u64)> = word_freq
            .into_iter()
            .map(|(w, f)| (w.iter().map(|s| sym_id[s.as_str()]).collect(), f))
            .collect();
        words.sort();

        let mut vocab = Vocab::from_parts(
            SPECIAL_PIECES
                .iter()
                .map(|s| s.to_string())
                .chain(symbols.iter().cloned())
                .collect(),
            Vec::new(),
        )?;

        let mut tr = Trainer {
            symbols,
            words,
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
            heap: BinaryHeap::new(),
        };
        for w in 0..tr.words.len() {
            tr.count_word(w, 1);
        }
        let pairs: Vec<(u32, u32)> = tr.pair_counts.keys().copied().collect();
        for p in pairs {
            tr.push_candidate(p);
        }

        while vocab.len() < vocab_size {
            let Some(pair) = tr.pop_best() else { break };
            let left = tr.symbols[pair.0 as usize].clone();
            let right = tr.symbols[pair.1 as usize].clone();
            let piece = format!("{left}{right}");
            let new_sym = match tr.symbols.iter().position(|s| *s == piece) {
                Some(i) => i as u32,
                None => {
                    tr.symbols.push(piece.clone());
                    (tr.symbols.len() - 1) as u32
                }
            };
            vocab.push_merge(left, right);
            tr.apply_merge(pair, new_sym);
        }
        Ok(vocab)
    }

    fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Vocab> {
        let mut v = Vocab {
            id_to_piece: Vec::new(),
            piece_to_id: HashMap::new(),
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        for p in pieces {
            if v.piece_to_id.insert(p.clone(), v.id_to_piece.len()).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary piece `{p}`")));
            }
            v.id_to_piece.push(p);
        }
        for (l, r) in merges {
            v.merge_ranks.insert((l.clone(), r.clone()), v.merges.len());
            v.merges.push((l, r));
        }
        Ok(v)
    }

    fn push_merge(&mut self, left: String, right: String) {
        let piece = format!("{left}{right}");
        if !self.piece_to_id.contains_key(&piece) {
            self.piece_to_id.insert(piece.clone(), self.id_to_piece.len());
            self.id_to_piece.push(piece);
        }
        self.merge_ranks
            .insert((left.clone(), right.clone()), self.merges.len());
        self.merges.push((left, right));
    }

    pub fn len(&self) -> usize {
        self.id_to_piece.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_piece.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.id_to_piece.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.piece_to_id.get(piece).copied()
    }

    fn encode_word(&self, mut syms: Vec<String>, out: &mut Vec<usize>) {
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.merge_ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == *l && syms[i + 1] == *r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    /// Segments `text` into piece ids, optionally framed by bos/eos.
    pub fn encode(&self, text: &str, add_bos_eos: bool) -> Vec<usize> {
        let mut ids = Vec::new();
        if add_bos_eos {
            ids.push(BOS);
        }
        for w in pretokenize(text) {
            self.encode_word(w, &mut ids);
        }
        if add_bos_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Concatenates pieces, restoring spaces and dropping special ids.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or_else(|| {
                Error::invalid(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            if id >= NUM_SPECIALS {
                s.push_str(piece);
            }
        }
        Ok(s.replace(WORD_MARKER, " "))
    }

    /// Vocabulary file: a four-line special-token header followed by one
    /// escaped piece per line in id order.
    pub fn to_vocab_file(&self) -> String {
        let mut s = String::new();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "#{name} {i} {}", SPECIAL_PIECES[i]);
        }
        for p in &self.id_to_piece {
            let _ = writeln!(s, "{}", escape(p));
        }
        s
    }

    /// Merges file: one `left right` pair per line in application order.
    pub fn to_merges_file(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(l), escape(r));
        }
        s
    }

    pub fn from_files(vocab_text: &str, merges_text: &str) -> Result<Vocab> {
        let mut lines = vocab_text.lines();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let want = format!("#{name} {i} {}", SPECIAL_PIECES[i]);
            match lines.next() {
                Some(l) if l == want => {}
                other => {
                    return Err(Error::Parse(format!(
                        "vocabulary header line {}: expected `{want}`, found {other:?}",
                        i + 1
                    )))
                }
            }
        }
        let pieces: Vec<String> = lines.map(unescape).collect::<Result<_>>()?;
        if pieces.len() < NUM_SPECIALS || pieces[..NUM_SPECIALS] != SPECIAL_PIECES {
            return Err(Error::Parse("vocabulary must start with the special pieces".into()));
        }
        let mut merges = Vec::new();
        for (n, line) in merges_text.lines().enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("merges line {}: expected `left right`", n + 1)))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        let v = Vocab::from_parts(pieces, merges)?;
        for (l, r) in &v.merges {
            if v.id(&format!("{l}{r}")).is_none() {
                return Err(Error::Parse(format!("merge `{l} {r}` yields a piece missing from the vocabulary")));
            }
        }
        Ok(v)
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        fs::write(vocab_path, self.to_vocab_file()).map_err(|e| Error::io(vocab_path, e))?;
        fs::write(merges_path, self.to_merges_file()).map_err(|e| Error::io(merges_path, e))
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Vocab> {
        let v = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let m = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_files(&v, &m)
    }
}

fn escape(piece: &str) -> String {
    let mut s = String::with_capacity(piece.len());
    for c in piece.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            ' ' => s.push_str("\\s"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => return Err(Error::Parse(format!("bad escape `\\{other:?}` in `{s}`"))),
        }
    }
    Ok(out)
}

/// The intent-side and snippet-side vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub intent: Vocab,
    pub snippet: Vocab,
}

impl Vocabs {
    pub const FILES: [&'static str; 4] = ["intent.vocab", "intent.merges", "snippet.vocab", "snippet.merges"];

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let [iv, im, sv, sm] = Self::FILES.map(|f| dir.join(f));
        self.intent.save(&iv, &im)?;
        self.snippet.save(&sv, &sm)
    }

    pub fn load(dir: &Path) -> Result<Vocabs> {
        let [iv, im, sv, sm] = Self::FILES.map(|f| dir.join(f));
        Ok(Vocabs {
            intent: Vocab::load(&iv, &im)?,
            snippet: Vocab::load(&sv, &sm)?,
        })
    }
}
