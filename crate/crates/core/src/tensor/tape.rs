//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation records its
//! inputs (which always precede it) and whatever activations its backward rule
//! needs. [`Graph::backward`] walks the list in reverse creation order and sums
//! the gradient contributions of every consumer into each node.

use super::Tensor;
use crate::error::{config_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// elementwise factor, either full-size or one per column
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// `out[i] = x[index[i]]`
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node does not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor {
                shape: shape.clone(),
                data: g.to_vec(),
            },
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        }),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data.len() == value.shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients (a trainable parameter or a probed input).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Moves a node's value out of a graph that is no longer needed.
    pub fn take(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_t")?;
        let (n, k2) = dims2(tb, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulT(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `cols` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tb.data.len() != c {
            return Err(shape_err("add_row", ta, tb));
        }
        let data = ta.data.iter().enumerate().map(|(i, x)| x + tb.data[i % c]).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    ///
    /// `keep` has either one flag per element or one flag per column; in the
    /// latter case the same column mask applies to every row.
    pub fn dropout(&mut self, a: Var, keep: &[bool], p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err(format!("dropout probability {p} not in [0, 1)")));
        }
        let ta = self.value(a);
        if keep.len() != ta.len() && keep.len() != ta.cols() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: ta.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let s = 1.0 / (1.0 - p);
        let factor: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let n = factor.len();
        let data = ta.data.iter().enumerate().map(|(i, x)| x * factor[i % n]).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, factor), rg))
    }

    /// Softmax over the last axis. Masked entries (`false`) come out exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: ta.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let xs = &ta.data[r * c..(r + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in xs.iter().enumerate() {
                if keep(j) && x > max {
                    max = x;
                }
            }
            if !(0..c).any(keep) {
                return Err(Error::EmptyContext { row: r });
            }
            if max == f64::NEG_INFINITY {
                // every kept energy is NaN or -inf; let it surface as NaN
                max = f64::NAN;
            }
            let ys = &mut out[r * c..(r + 1) * c];
            let mut total = 0.0;
            for (j, (y, &x)) in ys.iter_mut().zip(xs).enumerate() {
                if keep(j) {
                    *y = (x - max).exp();
                    total += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= total;
            }
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain·x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 || eps <= 0.0 {
            return Err(config_err(format!(
                "layer_norm needs dim >= 2 and eps > 0 (dim {d}, eps {eps})"
            )));
        }
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let xs = &tx.data[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (xs[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data[j] * h + tb.data[j];
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Generic re-indexing: `out.flat[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if index.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.len()) {
            return Err(Error::Input(format!("gather index {bad} out of range {}", ta.len())));
        }
        let data = index.iter().map(|&i| ta.data[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Gather(a, index), rg))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(config_err(format!("column slice {start}+{len} out of {n}")));
        }
        let index = (0..m)
            .flat_map(|i| (start..start + len).map(move |j| i * n + j))
            .collect();
        self.gather(a, index, vec![m, len])
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(config_err(format!("row slice {start}+{len} out of {m}")));
        }
        self.gather(a, (start * n..(start + len) * n).collect(), vec![len, n])
    }

    /// Selects rows of a `[V×D]` table by id (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row id {bad} out of range {v}")));
        }
        let index = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(table, index, vec![ids.len(), d])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (m, _) = dims2(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", first, self.value(p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Summed token cross-entropy of `logits: [M×V]` against `targets`.
    ///
    /// `None` targets are ignored (padding). With `smoothing = ε` the reference
    /// distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = dims2(tl, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(config_err(format!("label smoothing {smoothing} not in [0, 1)")));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Input(format!("target id {t} out of vocabulary {v}")));
            }
            let xs = &tl.data[r * v..(r + 1) * v];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut row_loss = -(1.0 - smoothing) * (xs[t] - lse);
            if smoothing > 0.0 {
                let mean_logp = xs.iter().map(|x| x - lse).sum::<f64>() / v as f64;
                row_loss -= smoothing * mean_logp;
            }
            loss += row_loss;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(xs) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every node.
    ///
    /// Nodes that do not influence the loss get no gradient; the walk is
    /// deterministic so repeated calls return bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accumulate(grads, *a, |ga| gemm_nt(g, &tb.data, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(&ta.data, g, gb, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                self.accumulate(grads, *a, |ga| gemm_nn(g, &tb.data, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(g, &ta.data, gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = out.cols();
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += y * w;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c));
            }
            Op::MulConst(a, factor) => {
                let n = factor.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * factor[i % n];
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&ta.data) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let tg = self.value(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for (gy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, (gx, (gy, h))) in gx.chunks_mut(d).zip(g.chunks(d).zip(xhat.chunks(d))).enumerate() {
                        for j in 0..d {
                            dh[j] = gy[j] * tg.data[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let s = rstd[r] / d as f64;
                        for j in 0..d {
                            gx[j] += s * (d as f64 * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |ga| {
                    for (&i, y) in index.iter().zip(g) {
                        ga[i] += y;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            for j in 0..w {
                                dst[j] += src[offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let s = g[0];
                let v = self.value(*logits).cols();
                let uniform = smoothing / v as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (k, x) in row.iter_mut().enumerate() {
                            let q = if k == t { 1.0 - smoothing + uniform } else { uniform };
                            *x += s * (probs[r * v + k] - q);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs() + 1e-12)
    }

    /// Relative error, except for entries below the central-difference noise
    /// floor (~1e-11 at h = 1e-5), where the absolute error is scaled onto the
    /// same 1e-4 budget.
    fn fd_err(a: f64, fd: f64) -> f64 {
        if a.abs() + fd.abs() < 1e-6 {
            (a - fd).abs() / 1e-9 * 1e-4
        } else {
            rel_err(a, fd)
        }
    }

    /// Central finite differences of `f` at every entry of every input, compared
    /// against the tape gradient. Returns the worst relative error.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).data[0]
        };
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.tensor(vars[k]);
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max(fd_err(analytic.data[i], fd));
            }
        }
        worst
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Weighted sum so that gradients are not all-equal.
    fn weighted(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.value(v).shape(), 1.0, &mut rng);
        let w = g.constant(w);
        let p = g.mul(v, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(super::super::matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(super::super::matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let err = super::super::matmul(&b, &b).unwrap_err();
        assert!(err.to_string().contains("[2, 1]"), "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng)];
        let e = check_grad(&inputs, |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c)
        });
        assert!(e < 1e-6, "{e}");
        let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[6, 4], &mut rng)];
        let e = check_grad(&inputs, |g, v| {
            let c = g.matmul_t(v[0], v[1]).unwrap();
            weighted(g, c, 3)
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn softmax_examples() {
        let s = super::super::softmax_rows(&Tensor::vector(&[0.0, 0.0, 0.0]), None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = super::super::softmax_rows(&Tensor::vector(&[0.0, 3f64.ln()]), None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let s = super::super::softmax_rows(&Tensor::vector(&[5.0, 5.0, 5.0]), Some(&[true, true, false])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.0]);
        let err = super::super::softmax_rows(&Tensor::vector(&[1.0, 2.0]), Some(&[false, false]));
        assert!(matches!(err, Err(Error::EmptyContext { row: 0 })));
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask: Vec<bool> = (0..20).map(|i| i % 5 != 3).collect();
        let e = check_grad(&[rand_t(&[4, 5], &mut rng)], |g, v| {
            let s = g.softmax_rows(v[0], Some(&mask)).unwrap();
            weighted(g, s, 4)
        });
        assert!(e < 1e-6, "{e}");
        let inputs = [
            rand_t(&[3, 6], &mut rng),
            rand_t(&[6], &mut rng),
            rand_t(&[6], &mut rng),
        ];
        let e = check_grad(&inputs, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
            weighted(g, y, 5)
        });
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = super::super::layer_norm(&Tensor::full(&[2, 4], 3.5), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = super::super::layer_norm(
            &Tensor::vector(&[1.0, 3.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-15,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[5, 5], &mut rng).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let e = check_grad(&[x], |g, v| {
            let y = g.relu(v[0]);
            weighted(g, y, 6)
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn remaining_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            rand_t(&[3, 4], &mut rng),
            rand_t(&[4], &mut rng),
            rand_t(&[3, 4], &mut rng),
        ];
        let e = check_grad(&inputs, |g, v| {
            let a = g.add_row(v[0], v[1]).unwrap();
            let b = g.mul(a, v[2]).unwrap();
            let c = g.scale(b, -1.7);
            let d = g.dropout(c, &[true, false, true, true], 0.25).unwrap();
            let l = g.slice_cols(d, 1, 3).unwrap();
            let r = g.slice_rows(v[2], 0, 3).unwrap();
            let r = g.slice_cols(r, 0, 2).unwrap();
            let cat = g.concat_cols(&[l, r]).unwrap();
            let rows = g.gather_rows(cat, &[2, 0, 2]).unwrap();
            let sum = g.add(rows, rows).unwrap();
            weighted(g, sum, 7)
        });
        assert!(e < 1e-6, "{e}");
        let targets = [Some(1), None, Some(4)];
        for smoothing in [0.0, 0.1] {
            let e = check_grad(&[rand_t(&[3, 5], &mut rng)], |g, v| {
                g.cross_entropy(v[0], &targets, smoothing).unwrap()
            });
            assert!(e < 1e-6, "{e}");
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(&[1.0, -2.0, 3.0]));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[2.0, -4.0, 6.0]);
        assert!(matches!(g.backward(sq), Err(Error::NotScalar(_))));
        // unreachable leaf
        let y = g.input(Tensor::vector(&[1.0]));
        assert_eq!(g.backward(l).unwrap().tensor(y).data(), &[0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let a = g.input(rand_t(&[4, 4], &mut rng));
        let b = g.matmul(a, a).unwrap();
        let c = g.softmax_rows(b, None).unwrap();
        let l = weighted(&mut g, c, 9);
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let a = super::super::softmax_rows(&Tensor::vector(&row), None).unwrap();
            proptest::prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            let b = super::super::softmax_rows(&Tensor::vector(&shifted), None).unwrap();
            proptest::prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn random_op_gradients_match_finite_differences(
            seed in 0u64..1000,
            m in 1usize..6,
            k in 2usize..6,
            n in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [rand_t(&[m, k], &mut rng), rand_t(&[k, n], &mut rng), rand_t(&[k], &mut rng), rand_t(&[k], &mut rng)];
            let e = check_grad(&inputs, |g, v| {
                let ln = g.layer_norm(v[0], v[2], v[3], 1e-5).unwrap();
                let p = g.matmul(ln, v[1]).unwrap();
                let s = g.softmax_rows(p, None).unwrap();
                weighted(g, s, seed)
            });
            proptest::prop_assert!(e <= 1e-4, "rel err {}", e);
        }
    }
}
