use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Padding,
    Causal,
    Combined,
}

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn none(queries: usize, keys: usize) -> Self {
        AttentionMask {
            kind: MaskKind::None,
            rows: queries,
            cols: keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Hides keys flagged `true` in `key_is_pad` from every query.
    pub fn padding(queries: usize, key_is_pad: &[bool]) -> Self {
        let cols = key_is_pad.len();
        let allowed = (0..queries * cols).map(|i| !key_is_pad[i % cols]).collect();
        AttentionMask {
            kind: MaskKind::Padding,
            rows: queries,
            cols,
            allowed,
        }
    }

    /// Query `q` may see key `k` iff `k <= q`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|i| i % len <= i / len).collect();
        AttentionMask {
            kind: MaskKind::Causal,
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn combine(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch {
                op: "mask combine",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        Ok(AttentionMask {
            kind: MaskKind::Combined,
            rows: self.rows,
            cols: self.cols,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    /// Additive score bias: 0 where allowed, −∞ where masked. `None` when
    /// nothing is masked.
    fn bias(&self) -> Result<Option<Tensor>> {
        if self.allowed.iter().all(|&a| a) {
            return Ok(None);
        }
        for q in 0..self.rows {
            if !(0..self.cols).any(|k| self.allows(q, k)) {
                return Err(Error::invalid(format!("attention query {q} has no attendable key")));
            }
        }
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Ok(Some(Tensor::new(vec![self.rows, self.cols], data)?))
    }
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Output of an attention block together with the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` slices of the projected
/// queries, keys and values; heads are concatenated then projected by `W_o`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    mask: &AttentionMask,
    heads: usize,
) -> Result<AttentionOutput> {
    let tq = g.shape(q_in)[0];
    let tk = g.shape(kv_in)[0];
    if mask.dims() != (tq, tk) {
        return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: vec![tq, tk],
            rhs: vec![mask.rows, mask.cols],
        });
    }
    let d_model = g.shape(q_in)[1];
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide d_model {d_model}")));
    }
    let dh = d_model / heads;
    let bias = mask.bias()?.map(|b| g.constant(b));

    let wq = g.param(p.wq);
    let wk = g.param(p.wk);
    let wv = g.param(p.wv);
    let wo = g.param(p.wo);
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(b) = bias {
            scores = g.add(scores, b)?;
        }
        let w = g.softmax(scores)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(AttentionOutput {
        output: g.matmul(cat, wo)?,
        weights,
    })
}
