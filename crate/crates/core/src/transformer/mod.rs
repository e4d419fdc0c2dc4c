//! Encoder-decoder transformer over hard token ids or soft token
//! distributions.

mod attention;

pub use attention::{multi_head_attention, AttentionMask, AttentionOutput, AttentionParams, MaskKind};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 1,
            num_heads: 8,
            d_model: 128,
            d_ff: 512,
            dropout: 0.2,
            src_vocab: 4000,
            tgt_vocab: 4000,
            max_len: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        self.validate_dims()
    }

    fn validate_dims(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.src_vocab <= PAD || self.tgt_vocab <= PAD {
            return bad("vocabulary sizes must be positive".into());
        }
        Ok(())
    }

    /// Number of learned scalars:
    ///
    /// ```text
    /// (V_src + V_tgt)·d                         embeddings
    /// + L · (4d² + 2·d·f + f + d + 4d)          encoder layers
    /// + L · (8d² + 2·d·f + f + d + 6d)          decoder layers
    /// + d·V_tgt + V_tgt                         output projection
    /// ```
    pub fn parameter_count(&self) -> usize {
        let (d, f, l) = (self.d_model, self.d_ff, self.num_layers);
        let ff = 2 * d * f + f + d;
        (self.src_vocab + self.tgt_vocab) * d
            + l * (4 * d * d + ff + 4 * d)
            + l * (8 * d * d + ff + 6 * d)
            + d * self.tgt_vocab
            + self.tgt_vocab
    }
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut t = Tensor::zeros(&[max_len, d_model]);
    let data = t.data_mut();
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(t)
}

/// Expected embedding of each distribution row: `dist · table`.
pub fn soft_embed(g: &mut Graph, dist: Var, table: Var) -> Result<Var> {
    let d = g.value(dist);
    for r in 0..d.rows() {
        let row = d.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!("soft input row {r} is not a distribution (sum {s})")));
        }
    }
    g.matmul(dist, table)
}

/// Decoder or encoder input: discrete ids or a `L×V` matrix of
/// distributions over the vocabulary.
#[derive(Clone, Copy, Debug)]
pub enum SeqInput<'a> {
    Tokens(&'a [usize]),
    Soft(Var),
}

impl SeqInput<'_> {
    pub fn len(&self, g: &Graph) -> usize {
        match self {
            SeqInput::Tokens(ids) => ids.len(),
            SeqInput::Soft(v) => g.shape(*v)[0],
        }
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }
}

#[derive(Clone, Debug)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: AttentionParams,
    norm1: NormParams,
    ff: FeedForward,
    norm2: NormParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttentionParams,
    norm1: NormParams,
    cross_attn: AttentionParams,
    norm2: NormParams,
    ff: FeedForward,
    norm3: NormParams,
}

/// Parameter handles of one encoder-decoder; the weights themselves live in
/// a [`ParamStore`] under names starting with `prefix`.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: TransformerConfig,
    prefix: String,
    src_embed: ParamId,
    tgt_embed: ParamId,
    pe: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
    bound: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn uniform(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        let b = self.bound;
        let data = (0..n).map(|_| self.rng.random_range(-b..b)).collect();
        self.store
            .add(format!("{}.{name}", self.prefix), Tensor::new(shape.to_vec(), data)?)
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store
            .add(format!("{}.{name}", self.prefix), Tensor::full(shape, v))
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: self.uniform(&format!("{name}.wq"), &[d, d])?,
            wk: self.uniform(&format!("{name}.wk"), &[d, d])?,
            wv: self.uniform(&format!("{name}.wv"), &[d, d])?,
            wo: self.uniform(&format!("{name}.wo"), &[d, d])?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<NormParams> {
        Ok(NormParams {
            gamma: self.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: self.constant(&format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.uniform(&format!("{name}.w1"), &[d, f])?,
            b1: self.constant(&format!("{name}.b1"), &[f], 0.0)?,
            w2: self.uniform(&format!("{name}.w2"), &[f, d])?,
            b2: self.constant(&format!("{name}.b2"), &[d], 0.0)?,
        })
    }
}

impl TransformerModel {
    /// Registers a freshly initialised model in `store`. Matrices and
    /// embeddings are uniform in `±1/√d_model`; norm gains are 1 and all
    /// biases 0.
    pub fn new<R: Rng>(
        config: TransformerConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate_dims()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut b = Builder {
            store,
            rng,
            prefix: prefix.to_string(),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let src_embed = b.uniform("src_embed", &[config.src_vocab, d])?;
        let tgt_embed = b.uniform("tgt_embed", &[config.tgt_vocab, d])?;
        let mut encoder = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = format!("enc.layer{l}");
            encoder.push(EncoderLayer {
                self_attn: b.attention(&format!("{n}.self_attn"), d)?,
                norm1: b.norm(&format!("{n}.norm1"), d)?,
                ff: b.ff(&format!("{n}.ff"), d, f)?,
                norm2: b.norm(&format!("{n}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = format!("dec.layer{l}");
            decoder.push(DecoderLayer {
                self_attn: b.attention(&format!("{n}.self_attn"), d)?,
                norm1: b.norm(&format!("{n}.norm1"), d)?,
                cross_attn: b.attention(&format!("{n}.cross_attn"), d)?,
                norm2: b.norm(&format!("{n}.norm2"), d)?,
                ff: b.ff(&format!("{n}.ff"), d, f)?,
                norm3: b.norm(&format!("{n}.norm3"), d)?,
            });
        }
        let out_w = b.uniform("out.w", &[d, config.tgt_vocab])?;
        let out_b = b.constant("out.b", &[config.tgt_vocab], 0.0)?;
        Ok(TransformerModel {
            pe: positional_encoding(config.max_len, d)?,
            config,
            prefix: prefix.to_string(),
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Changes the dropout rate used in training-mode passes.
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout = p;
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn src_embedding(&self) -> ParamId {
        self.src_embed
    }

    pub fn tgt_embedding(&self) -> ParamId {
        self.tgt_embed
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_b
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid(format!("empty {what} sequence")));
        }
        if len > self.config.max_len {
            return Err(Error::invalid(format!(
                "{what} length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `embedding · √d + PE`, followed by dropout.
    fn embed(&self, g: &mut Graph, table: ParamId, input: SeqInput) -> Result<Var> {
        let len = input.len(g);
        let t = g.param(table);
        let e = match input {
            SeqInput::Tokens(ids) => g.gather_rows(t, ids)?,
            SeqInput::Soft(dist) => soft_embed(g, dist, t)?,
        };
        let d = self.config.d_model;
        let e = g.scale(e, (d as f64).sqrt());
        let pe = Tensor::new(vec![len, d], self.pe.data()[..len * d].to_vec())?;
        let pe = g.constant(pe);
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, self.config.dropout))
    }

    fn residual_norm(&self, g: &mut Graph, x: Var, sub: Var, n: &NormParams) -> Result<Var> {
        let sub = g.dropout(sub, self.config.dropout);
        let s = g.add(x, sub)?;
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(s, gamma, beta, LN_EPS)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: &FeedForward) -> Result<Var> {
        let w1 = g.param(ff.w1);
        let b1 = g.param(ff.b1);
        let w2 = g.param(ff.w2);
        let b2 = g.param(ff.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }

    /// Encoder stack. `src_pad[i] == true` hides source position `i` from
    /// attention; an empty slice means no padding.
    pub fn encode(&self, g: &mut Graph, src: SeqInput, src_pad: &[bool]) -> Result<Var> {
        let len = src.len(g);
        self.check_len(len, "source")?;
        let mask = self.key_mask(len, len, src_pad)?;
        let mut x = self.embed(g, self.src_embed, src)?;
        let h = self.config.num_heads;
        for layer in &self.encoder {
            let a = multi_head_attention(g, &layer.self_attn, x, x, &mask, h)?.output;
            x = self.residual_norm(g, x, a, &layer.norm1)?;
            let f = self.feed_forward(g, x, &layer.ff)?;
            x = self.residual_norm(g, x, f, &layer.norm2)?;
        }
        Ok(x)
    }

    fn key_mask(&self, queries: usize, keys: usize, pad: &[bool]) -> Result<AttentionMask> {
        if pad.is_empty() {
            return Ok(AttentionMask::none(queries, keys));
        }
        if pad.len() != keys {
            return Err(Error::ShapeMismatch {
                op: "padding mask",
                lhs: vec![keys],
                rhs: vec![pad.len()],
            });
        }
        Ok(AttentionMask::padding(queries, pad))
    }

    /// Decoder stack without the output projection: `Tt×d_model`.
    pub fn decode_hidden(
        &self,
        g: &mut Graph,
        tgt: SeqInput,
        memory: Var,
        memory_pad: &[bool],
    ) -> Result<Var> {
        let len = tgt.len(g);
        self.check_len(len, "target")?;
        let mshape = g.shape(memory).to_vec();
        if mshape.len() != 2 || mshape[1] != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "decoder memory",
                lhs: vec![mshape.first().copied().unwrap_or(0), self.config.d_model],
                rhs: mshape,
            });
        }
        let causal = AttentionMask::causal(len);
        let cross = self.key_mask(len, mshape[0], memory_pad)?;
        let mut x = self.embed(g, self.tgt_embed, tgt)?;
        let h = self.config.num_heads;
        for layer in &self.decoder {
            let a = multi_head_attention(g, &layer.self_attn, x, x, &causal, h)?.output;
            x = self.residual_norm(g, x, a, &layer.norm1)?;
            let c = multi_head_attention(g, &layer.cross_attn, x, memory, &cross, h)?.output;
            x = self.residual_norm(g, x, c, &layer.norm2)?;
            let f = self.feed_forward(g, x, &layer.ff)?;
            x = self.residual_norm(g, x, f, &layer.norm3)?;
        }
        Ok(x)
    }

    /// Linear map from decoder states to target-vocabulary logits.
    pub fn project(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let l = g.matmul(hidden, w)?;
        g.add(l, b)
    }

    /// Logits for every target position given a bos-framed target; row `j`
    /// depends only on `tgt[..=j]` and the memory.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        tgt: SeqInput,
        memory: Var,
        memory_pad: &[bool],
    ) -> Result<Var> {
        let h = self.decode_hidden(g, tgt, memory, memory_pad)?;
        self.project(g, h)
    }

    /// Logits predicting `tgt[1..]` from `tgt[..len-1]`, plus the shifted
    /// targets they are scored against.
    pub fn shifted_logits(&self, g: &mut Graph, src: SeqInput, tgt: &[usize]) -> Result<(Var, Vec<usize>)> {
        if tgt.len() < 2 {
            return Err(Error::invalid("target needs at least bos and one token"));
        }
        let memory = self.encode(g, src, &[])?;
        let logits = self.decode_teacher_forced(g, SeqInput::Tokens(&tgt[..tgt.len() - 1]), memory, &[])?;
        Ok((logits, tgt[1..].to_vec()))
    }

    /// Mean next-token cross-entropy of a framed target given a source.
    pub fn forward_nll(&self, g: &mut Graph, src: SeqInput, tgt: &[usize]) -> Result<Var> {
        let (logits, targets) = self.shifted_logits(g, src, tgt)?;
        g.cross_entropy(logits, &targets, PAD)
    }
}

/// One weighted training pair for [`batch_nll`].
pub struct NllRow<'a> {
    pub src: SeqInput<'a>,
    pub tgt: &'a [usize],
    pub weight: f64,
}

/// Token-level cross-entropy over a batch of pairs:
/// `Σ_rows w · Σ_tokens nll / Σ_rows tokens`.
pub fn batch_nll(g: &mut Graph, model: &TransformerModel, rows: &[NllRow]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut logits = Vec::with_capacity(rows.len());
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for r in rows {
        let (l, t) = model.shifted_logits(g, r.src, r.tgt)?;
        logits.push(l);
        weights.extend(t.iter().map(|&id| if id == PAD { 0.0 } else { r.weight }));
        targets.extend(t);
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::invalid("batch has no target tokens"));
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    g.weighted_cross_entropy(all, &targets, &weights, count as f64)
}

#[cfg(test)]
mod tests;
