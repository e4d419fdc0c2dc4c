use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, Layout};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Dropout is the identity.
    Eval,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        norm: f64,
        probs: Tensor,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass: one entry per trainable
/// parameter and per gradient-tracking input reached from the loss.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }
}

/// Computation graph for a single forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(store: &'p ParamStore) -> Self {
        Self::new(store, Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// Elementwise sum. A 1-D `b` whose length equals the last axis of `a`
    /// is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(data, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.last() == sb.first() {
            let mut out = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(bias.len()) {
                for (x, y) in row.iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(out, Op::AddRow(a, b), rg));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NaN("softmax input"));
        }
        let out = super::softmax_rows(x);
        if out.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NaN("softmax (row with no finite entry)"));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Per-position layer normalization over the last axis followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for (v, name) in [(gamma, "layer_norm gamma"), (beta, "layer_norm beta")] {
            if self.shape(v) != [d] {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (hrow, orow) in xhat
            .data_mut()
            .chunks_mut(d)
            .zip(out.data_mut().chunks_mut(d))
        {
            let mean = hrow.iter().sum::<f64>() / d as f64;
            let var = hrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..d {
                hrow[i] = (hrow[i] - mean) * is;
                orow[i] = g[i] * hrow[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits: T×V` against `targets`, skipping
    /// positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if t == pad_id { 0.0 } else { 1.0 })
            .collect();
        let count = weights.iter().sum::<f64>();
        if count == 0.0 {
            return Err(Error::invalid("cross_entropy over an all-pad target sequence"));
        }
        self.weighted_cross_entropy(logits, targets, &weights, count)
    }

    /// `Σ_t w_t · −log softmax(logits_t)[target_t] / normalizer`. Positions
    /// with zero weight are ignored entirely, including their target id.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        normalizer: f64,
    ) -> Result<Var> {
        let (t, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t || weights.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy targets",
                lhs: vec![t, v],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if normalizer <= 0.0 {
            return Err(Error::invalid("cross_entropy normalizer must be positive"));
        }
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, row) in probs.data_mut().chunks_mut(v).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let target = targets[r];
            if target >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy target {target} out of range for vocabulary {v}"
                )));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += weights[r] * (lse - row[target]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        if loss.is_nan() {
            return Err(Error::NaN("cross_entropy"));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / normalizer),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm: normalizer,
                probs,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("token id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::invalid(format!("slice_cols {start}+{width} of {c} columns")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::invalid(format!("slice_rows {start}+{count} of {r} rows")));
        }
        let out = self.value(x).data()[start * c..(start + count) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![count, c], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, t: Tensor| {
                if self.nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).as_matrix();
                    let n = self.value(*b).cols();
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        let bv = self.value(*b).data();
                        gemm(m, n, k, g.data(), Layout::Normal, bv, Layout::Transposed, 0.0, &mut da);
                        send(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        let av = self.value(*a).data();
                        gemm(k, m, n, av, Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut db);
                        send(*b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = self.value(*a).as_matrix();
                    let n = self.value(*b).rows();
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        let bv = self.value(*b).data();
                        gemm(m, n, k, g.data(), Layout::Normal, bv, Layout::Normal, 0.0, &mut da);
                        send(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; n * k];
                        let av = self.value(*a).data();
                        gemm(n, m, k, g.data(), Layout::Transposed, av, Layout::Normal, 0.0, &mut db);
                        send(*b, Tensor::new(vec![n, k], db)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, b) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    send(*b, Tensor::vector(db));
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, zip_map(&g, self.value(*b), |x, y| x * y));
                    send(*b, zip_map(&g, self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::Relu(a) => {
                    send(*a, zip_map(&g, self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }))
                }
                Op::Exp(a) => send(*a, zip_map(&g, self.value(Var(i)), |gx, y| gx * y)),
                Op::Log(a) => send(*a, zip_map(&g, self.value(*a), |gx, x| gx / x)),
                Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.item())),
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let c = y.cols();
                    let mut dx = g;
                    for (grow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for (gx, yx) in grow.iter_mut().zip(yrow) {
                            *gx = yx * (*gx - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = xhat.cols();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (r, ((grow, hrow), dxrow)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.data().chunks(d))
                        .zip(dx.data_mut().chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dgamma[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            dxrow[j] = inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    send(*x, dx);
                    send(*gamma, Tensor::vector(dgamma));
                    send(*beta, Tensor::vector(dbeta));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    norm,
                    probs,
                } => {
                    let v = probs.cols();
                    let scale = g.item() / norm;
                    let mut dl = Tensor::zeros(probs.shape());
                    for (r, (drow, prow)) in dl
                        .data_mut()
                        .chunks_mut(v)
                        .zip(probs.data().chunks(v))
                        .enumerate()
                    {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let w = weights[r] * scale;
                        for (d, p) in drow.iter_mut().zip(prow) {
                            *d = w * p;
                        }
                        drow[targets[r]] -= w;
                    }
                    send(*logits, dl);
                }
                Op::GatherRows { table, ids } => {
                    let tshape = self.shape(*table).to_vec();
                    let d = tshape[1];
                    let mut dt = Tensor::zeros(&tshape);
                    let dtd = dt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dtd[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    send(*table, dt);
                }
                Op::SliceCols { x, start } => {
                    let xs = self.shape(*x).to_vec();
                    let w = g.cols();
                    let mut dx = Tensor::zeros(&xs);
                    for (r, row) in dx.data_mut().chunks_mut(xs[1]).enumerate() {
                        row[*start..start + w].copy_from_slice(g.row(r));
                    }
                    send(*x, dx);
                }
                Op::SliceRows { x, start } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    let c = xs[1];
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        send(p, Tensor::new(vec![r, w], dp)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let rows = n / c;
                        let dp = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        send(p, Tensor::new(vec![rows, c], dp)?);
                    }
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    send(*x, dx);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}
