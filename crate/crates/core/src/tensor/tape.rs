//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output (and whatever it needs for the
//! vector-Jacobian product). `backward` walks the tape in reverse.

use std::collections::HashMap;

use super::{shape_err, ParamStore, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(rows * cols, allowed.len(), "mask size");
        Self { rows, cols, allowed }
    }

    pub fn full(n: usize) -> Self {
        Self::new(n, n, vec![true; n * n])
    }

    /// Rows `0..n_support` are support, the rest query. Support rows see
    /// support rows; query rows see support rows and themselves.
    pub fn split(n_support: usize, n_query: usize) -> Self {
        let n = n_support + n_query;
        let allowed = (0..n * n).map(|ij| {
            let (i, j) = (ij / n, ij % n);
            j < n_support || i == j
        });
        Self::new(n, n, allowed.collect())
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<Vec<(usize, f64)>> },
    Embedding { table: Var, indices: Vec<usize> },
    SliceRows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, n_valid: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor, TensorError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFiniteValue(op))
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::NoTape)
        }
    }

    /// A constant input (no gradient flows into any store).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(finite(out, "matmul")?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; the shape of a linear layer with weights stored `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(finite(out, "matmul_nt")?, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(finite(out, "add")?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(finite(out, "mul")?, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, x: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        require_matrix(tx, op)?;
        if tb.len() != tx.cols() {
            return Err(shape_err(op, format!("{:?} with row {:?}", tx.shape(), tb.shape())));
        }
        Ok(())
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, b, "add_row")?;
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % c]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(finite(out, "add_row")?, Op::AddRow(x, b)))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, g, "mul_row")?;
        let (tx, tg) = (self.value(x), self.value(g));
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v * tg.data()[i % c]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(finite(out, "mul_row")?, Op::MulRow(x, g)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * s);
        Ok(self.push(finite(out, "scale")?, Op::Scale(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(x)))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        require_matrix(tx, "layer_norm")?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                normalized[i * c + j] = (row[j] - mean) * is;
            }
        }
        let out = finite(Tensor::matrix(r, c, normalized.clone()), "layer_norm")?;
        Ok(self.push(out, Op::LayerNorm { x, normalized, inv_std }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        require_matrix(tx, "softmax")?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(tx.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let out = finite(Tensor::matrix(r, c, out), "softmax")?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `n × d`
    /// with `d` split evenly into `n_heads` column blocks. Masked keys get
    /// exactly zero weight and are skipped in the weighted sum.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, n_heads: usize) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        require_matrix(tq, "attention")?;
        require_matrix(tk, "attention")?;
        require_matrix(tv, "attention")?;
        let (nq, d) = (tq.rows(), tq.cols());
        let nk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != nk || n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?} heads {n_heads}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if mask.rows != nq || mask.cols != nk {
            return Err(shape_err("attention", format!("mask {}x{} for {nq}x{nk}", mask.rows, mask.cols)));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(n_heads * nq);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let qi = &tq.row(i)[cols.clone()];
                let mut scored: Vec<(usize, f64)> = (0..nk)
                    .filter(|&j| mask.allowed(i, j))
                    .map(|j| {
                        let kj = &tk.row(j)[cols.clone()];
                        (j, qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                    })
                    .collect();
                if scored.is_empty() {
                    return Err(TensorError::AllMasked(i));
                }
                let max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scored.iter_mut() {
                    s.1 = (s.1 - max).exp();
                    total += s.1;
                }
                for s in scored.iter_mut() {
                    s.1 /= total;
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for &(j, p) in &scored {
                    let vj = &tv.row(j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                probs.push(scored);
            }
        }
        let out = finite(Tensor::matrix(nq, d, out), "attention")?;
        Ok(self.push(out, Op::Attention { q, k, v, n_heads, probs }))
    }

    /// Rows of `table` selected by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        require_matrix(tt, "embedding")?;
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(shape_err("embedding", format!("index {ix} >= vocabulary {v}")));
            }
            out.extend_from_slice(tt.row(ix));
        }
        let out = Tensor::matrix(indices.len(), d, out);
        Ok(self.push(out, Op::Embedding { table, indices: indices.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        require_matrix(tx, "slice_rows")?;
        if start + len > tx.rows() {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {}", tx.rows())));
        }
        let c = tx.cols();
        let out = Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Mean over rows of `-log softmax(logits[.., ..n_valid])[target]`. Slots
    /// at or beyond `n_valid` are treated as masked to -inf.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], n_valid: usize) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        require_matrix(tl, "cross_entropy")?;
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r || r == 0 || n_valid == 0 || n_valid > c {
            return Err(shape_err("cross_entropy", format!("{r}x{c} logits, {} targets, {n_valid} valid", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n_valid) {
            return Err(shape_err("cross_entropy", format!("target {t} outside {n_valid} valid slots")));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let p = &mut probs[i * c..i * c + n_valid];
            softmax_into(&tl.row(i)[..n_valid], p);
            loss -= p[targets[i]].ln();
        }
        let out = finite(Tensor::scalar(loss / r as f64), "cross_entropy")?;
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, n_valid }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(finite(Tensor::scalar(s), "sum")?, Op::Sum(x)))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward pass and writes gradients for every parameter bound
    /// on this tape into `store`. Frozen parameters end with zero gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_nt(tb).expect("matmul grad"));
                acc(*b, ta.matmul_tn(g).expect("matmul grad"));
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(tb).expect("matmul_nt grad"));
                acc(*b, g.matmul_tn(ta).expect("matmul_nt grad"));
            }
            Op::Transpose(a) => acc(*a, g.transpose().expect("transpose grad")),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(ta.shape().to_vec(), g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                let gb = Tensor::new(tb.shape().to_vec(), g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                acc(*a, ga.expect("mul grad"));
                acc(*b, gb.expect("mul grad"));
            }
            Op::AddRow(x, b) => {
                let tb = self.value(*b);
                let c = tb.len();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(tb.shape().to_vec(), gb).expect("add_row grad"));
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c = tw.len();
                let mut gw = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (i, v) in g.data().iter().enumerate() {
                    gw[i % c] += v * tx.data()[i];
                    gx[i] = v * tw.data()[i % c];
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), gx).expect("mul_row grad"));
                acc(*w, Tensor::new(tw.shape().to_vec(), gw).expect("mul_row grad"));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = g.data().iter().zip(tx.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                acc(*x, Tensor::new(tx.shape().to_vec(), data).expect("relu grad"));
            }
            Op::LayerNorm { x, normalized, inv_std } => {
                let c = g.cols();
                let r = g.rows();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gy = g.row(i);
                    let xh = &normalized[i * c..(i + 1) * c];
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gy[j] - mean_g - xh[j] * mean_gx);
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx));
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = (tq.rows(), tq.cols());
                let nk = tk.rows();
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * d];
                for h in 0..*n_heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let row_probs = &probs[h * nq + i];
                        let go = &g.row(i)[off..off + dh];
                        // dP_ij = go · v_j ; dS_ij = p_ij (dP_ij - Σ p dP)
                        let dp: Vec<f64> = row_probs
                            .iter()
                            .map(|&(j, _)| go.iter().zip(&tv.row(j)[off..off + dh]).map(|(a, b)| a * b).sum())
                            .collect();
                        let weighted: f64 = row_probs.iter().zip(&dp).map(|(&(_, p), d)| p * d).sum();
                        let qi = &tq.row(i)[off..off + dh];
                        for (&(j, p), dpj) in row_probs.iter().zip(&dp) {
                            for t in 0..dh {
                                gv[j * d + off + t] += p * go[t];
                            }
                            let ds = p * (dpj - weighted) * scale;
                            let kj = &tk.row(j)[off..off + dh];
                            for t in 0..dh {
                                gq[i * d + off + t] += ds * kj[t];
                                gk[j * d + off + t] += ds * qi[t];
                            }
                        }
                    }
                }
                acc(*q, Tensor::matrix(nq, d, gq));
                acc(*k, Tensor::matrix(nk, d, gk));
                acc(*v, Tensor::matrix(nk, d, gv));
            }
            Op::Embedding { table, indices } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut gt = vec![0.0; tt.len()];
                for (r, &ix) in indices.iter().enumerate() {
                    for t in 0..d {
                        gt[ix * d + t] += g.data()[r * d + t];
                    }
                }
                acc(*table, Tensor::new(tt.shape().to_vec(), gt).expect("embedding grad"));
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, Tensor::matrix(tx.rows(), c, gx));
            }
            Op::CrossEntropy { logits, targets, probs, n_valid } => {
                let tl = self.value(*logits);
                let (r, c) = (tl.rows(), tl.cols());
                let upstream = g.item() / r as f64;
                let mut gl = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*n_valid {
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] = upstream * (probs[i * c + j] - ind);
                    }
                }
                acc(*logits, Tensor::matrix(r, c, gl));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                acc(*x, Tensor::filled(tx.shape(), g.item()));
            }
        }
    }
}

/// Numerically stable softmax of `x` written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
