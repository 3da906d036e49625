//! Multi-head dot-product attention with absolute (content-only) or relative
//! energies.
//!
//! Relative self-attention scores a query `i` against a key `j` as
//!
//! ```text
//! (q_i·k_j + q_i·r_{i-j} + u·k_j + v·r_{i-j}) / sqrt(d_h)
//! ```
//!
//! with `q = H·W_Q`, `k = H·W_K` and `r_t = P_t·W_R` for the sinusoidal distance
//! encoding `P_t`. The fast path evaluates the two distance terms for all
//! `2K-1` distances with one product per head and then re-indexes the
//! `K×(2K-1)` result into the `K×K` layout ([`relative_shift`]).

use crate::error::{config_err, Error, Result};
use crate::position::{PositionMode, SinusoidalTable};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Energy assigned to masked query/key pairs before normalization.
pub const MASKED_ENERGY: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeParams {
    /// `D×D` projection of the distance encodings.
    pub w_r: Tensor,
    /// Global content bias, `D` entries split across heads.
    pub u: Tensor,
    /// Global distance bias, `D` entries split across heads.
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub relative: Option<RelativeParams>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn random(dim: usize, heads: usize, mode: PositionMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        let std = (1.0 / dim as f64).sqrt();
        let mut w = || Tensor::randn(&[dim, dim], std, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let relative = match mode {
            PositionMode::Absolute => None,
            PositionMode::Relative => Some(RelativeParams {
                w_r: Tensor::randn(&[dim, dim], std, rng),
                u: Tensor::randn(&[dim], std, rng),
                v: Tensor::randn(&[dim], std, rng),
            }),
        };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            relative,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn mode(&self) -> PositionMode {
        if self.relative.is_some() {
            PositionMode::Relative
        } else {
            PositionMode::Absolute
        }
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind(&self, g: &mut Graph) -> AttnVars {
        AttnVars {
            w_q: g.constant(self.w_q.clone()),
            w_k: g.constant(self.w_k.clone()),
            w_v: g.constant(self.w_v.clone()),
            w_o: g.constant(self.w_o.clone()),
            relative: self.relative.as_ref().map(|r| RelVars {
                w_r: g.constant(r.w_r.clone()),
                u: g.constant(r.u.clone()),
                v: g.constant(r.v.clone()),
            }),
            heads: self.heads,
        }
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(config_err(format!(
            "model dimension {dim} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct RelVars {
    pub w_r: Var,
    pub u: Var,
    pub v: Var,
}

/// Attention parameters living on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub relative: Option<RelVars>,
    pub heads: usize,
}

/// Which query/key pairs may interact. `true` = attend allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|x| x % n <= x / n).collect();
        Self {
            queries: n,
            keys: n,
            allowed,
        }
    }

    /// Hides keys at index `valid_keys` and beyond.
    pub fn with_key_limit(mut self, valid_keys: usize) -> Self {
        for (idx, a) in self.allowed.iter_mut().enumerate() {
            if idx % self.keys >= valid_keys {
                *a = false;
            }
        }
        self
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..queries * keys).map(|x| f(x / keys, x % keys)).collect();
        Self { queries, keys, allowed }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }
}

/// Post-softmax dropout on attention weights.
pub struct WeightDropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Splits `x·w` column-wise into `heads` matrices of width `D/heads`.
pub fn project_heads_var(g: &mut Graph, x: Var, w: Var, heads: usize) -> Result<Vec<Var>> {
    let projected = g.matmul(x, w)?;
    split_heads_var(g, projected, heads)
}

pub fn split_heads_var(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let d = g.value(x).cols();
    check_heads(d, heads)?;
    let dh = d / heads;
    if g.value(x).rank() == 1 {
        return (0..heads)
            .map(|h| g.gather(x, (h * dh..(h + 1) * dh).collect(), vec![dh]))
            .collect();
    }
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

/// Re-indexes `b: [K×(2K-1)]` (columns ordered by distance `K-1 .. -(K-1)`) so
/// that `out[i][j] = b[i][col(i-j)]`.
pub fn relative_shift_var(g: &mut Graph, b: Var) -> Result<Var> {
    let shape = g.value(b).shape().to_vec();
    let k = shape[0];
    if shape.len() != 2 || shape[1] != 2 * k - 1 {
        return Err(Error::Shape {
            op: "relative_shift",
            lhs: shape,
            rhs: vec![k, 2 * k - 1],
        });
    }
    g.gather(b, shift_index(k, 0), vec![k, k])
}

/// Flat gather indices for one head of the shift, offset by `base`.
fn shift_index(k: usize, base: usize) -> Vec<usize> {
    let width = 2 * k - 1;
    (0..k)
        .flat_map(|i| (0..k).map(move |j| base + i * width + (k - 1 + j - i)))
        .collect()
}

/// Relative energies for one head from already projected operands.
///
/// `q_h`, `k_h`: `[K×d_h]`; `r_h`: `[(2K-1)×d_h]` projected distance rows;
/// `u_h`, `v_h`: `[d_h]`.
#[allow(clippy::too_many_arguments)]
fn relative_head_energies(g: &mut Graph, q_h: Var, k_h: Var, r_h: Var, u_h: Var, v_h: Var, scale: f64) -> Result<Var> {
    let qu = g.add_row(q_h, u_h)?;
    let content = g.matmul_t(qu, k_h)?;
    let qv = g.add_row(q_h, v_h)?;
    let by_distance = g.matmul_t(qv, r_h)?;
    let position = relative_shift_var(g, by_distance)?;
    let sum = g.add(content, position)?;
    Ok(g.scale(sum, scale))
}

/// Per-head scaled energies of a self- or cross-attention.
///
/// `table` must be a relative table when `vars.relative` is set; it is then
/// required that queries and keys are the same sequence.
pub fn energies_var(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    vars: &AttnVars,
    table: Option<&SinusoidalTable>,
) -> Result<Vec<Var>> {
    let d = g.value(x_q).cols();
    check_heads(d, vars.heads)?;
    let scale = 1.0 / ((d / vars.heads) as f64).sqrt();
    let q = project_heads_var(g, x_q, vars.w_q, vars.heads)?;
    let k = project_heads_var(g, x_kv, vars.w_k, vars.heads)?;
    match vars.relative {
        None => q
            .iter()
            .zip(&k)
            .map(|(&qh, &kh)| {
                let e = g.matmul_t(qh, kh)?;
                Ok(g.scale(e, scale))
            })
            .collect(),
        Some(rel) => {
            if x_q != x_kv {
                return Err(config_err("relative energies are only defined for self-attention"));
            }
            let table = table.ok_or_else(|| config_err("relative attention needs a distance table"))?;
            let len = g.value(x_q).rows();
            let dist = g.constant(table.distances_for(len)?);
            let r = project_heads_var(g, dist, rel.w_r, vars.heads)?;
            let u = split_heads_var(g, rel.u, vars.heads)?;
            let v = split_heads_var(g, rel.v, vars.heads)?;
            (0..vars.heads)
                .map(|h| relative_head_energies(g, q[h], k[h], r[h], u[h], v[h], scale))
                .collect()
        }
    }
}

/// Full multi-head attention: masked softmax over energies, weighted values,
/// heads concatenated and projected by `W_O`.
#[allow(clippy::too_many_arguments)]
pub fn attend_var(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    vars: &AttnVars,
    table: Option<&SinusoidalTable>,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut WeightDropout<'_>>,
) -> Result<Var> {
    let energies = energies_var(g, x_q, x_kv, vars, table)?;
    let values = project_heads_var(g, x_kv, vars.w_v, vars.heads)?;
    finish_attention(g, energies, values, vars, mask, dropout)
}

fn finish_attention(
    g: &mut Graph,
    energies: Vec<Var>,
    values: Vec<Var>,
    vars: &AttnVars,
    mask: Option<&AttentionMask>,
    mut dropout: Option<&mut WeightDropout<'_>>,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(energies.len());
    for (e, v) in energies.into_iter().zip(values) {
        let shape = g.value(e).shape().to_vec();
        if let Some(m) = mask {
            if m.dims() != (shape[0], shape[1]) {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: shape,
                    rhs: vec![m.queries, m.keys],
                });
            }
        }
        let mut w = g.softmax_rows(e, mask.map(AttentionMask::as_slice))?;
        if let Some(d) = dropout.as_deref_mut() {
            if d.p > 0.0 {
                let keep: Vec<bool> = (0..shape[0] * shape[1]).map(|_| d.rng.random::<f64>() >= d.p).collect();
                w = g.dropout(w, &keep, d.p)?;
            }
        }
        heads.push(g.matmul(w, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, vars.w_o)
}

/// Cache of projected keys/values for step-wise decoding of one self-attention.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Attention of the newest position (the single row `x_last`, already
/// normalized) over itself and all cached earlier positions.
///
/// Produces exactly the last row of [`attend_var`] under a causal mask.
pub fn attend_incremental(
    g: &mut Graph,
    x_last: Var,
    vars: &AttnVars,
    table: Option<&SinusoidalTable>,
    cache: &mut KvCache,
) -> Result<Var> {
    let d = g.value(x_last).cols();
    check_heads(d, vars.heads)?;
    let k_new = g.matmul(x_last, vars.w_k)?;
    let v_new = g.matmul(x_last, vars.w_v)?;
    cache.keys.extend_from_slice(g.value(k_new).data());
    cache.values.extend_from_slice(g.value(v_new).data());
    cache.len += 1;
    let n = cache.len;
    let keys = g.constant(Tensor::new(vec![n, d], cache.keys.clone())?);
    let values = g.constant(Tensor::new(vec![n, d], cache.values.clone())?);

    let scale = 1.0 / ((d / vars.heads) as f64).sqrt();
    let q = project_heads_var(g, x_last, vars.w_q, vars.heads)?;
    let k = split_heads_var(g, keys, vars.heads)?;
    let energies: Vec<Var> = match vars.relative {
        None => q
            .iter()
            .zip(&k)
            .map(|(&qh, &kh)| {
                let e = g.matmul_t(qh, kh)?;
                Ok(g.scale(e, scale))
            })
            .collect::<Result<_>>()?,
        Some(rel) => {
            let table = table.ok_or_else(|| config_err("relative attention needs a distance table"))?;
            // distances n-1, ..., 0 for keys 0..n: already in key order
            let first = table
                .distance_index(n as isize - 1)
                .ok_or_else(|| config_err(format!("relative table too small for {n} positions")))?;
            let dist = g.constant(table.tensor().slice_rows(first, n));
            let r = project_heads_var(g, dist, rel.w_r, vars.heads)?;
            let u = split_heads_var(g, rel.u, vars.heads)?;
            let v = split_heads_var(g, rel.v, vars.heads)?;
            let mut out = Vec::with_capacity(vars.heads);
            for h in 0..vars.heads {
                let qu = g.add_row(q[h], u[h])?;
                let content = g.matmul_t(qu, k[h])?;
                let qv = g.add_row(q[h], v[h])?;
                let position = g.matmul_t(qv, r[h])?;
                let sum = g.add(content, position)?;
                out.push(g.scale(sum, scale));
            }
            out
        }
    };
    let vh = split_heads_var(g, values, vars.heads)?;
    finish_attention(g, energies, vh, vars, None, None)
}

// ---------------------------------------------------------------------------
// Tensor-level entry points.

fn stack_heads(g: &Graph, heads: &[Var]) -> Tensor {
    let shape = g.value(heads[0]).shape().to_vec();
    let data = heads.iter().flat_map(|&h| g.value(h).data().to_vec()).collect();
    Tensor::new(vec![heads.len(), shape[0], shape[1]], data).expect("stacked head shape")
}

fn head_slices(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.rank() != 3 {
        return Err(Error::Shape {
            op: "heads",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (h, r, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Ok((0..h)
        .map(|i| Tensor::new(vec![r, c], t.data()[i * r * c..(i + 1) * r * c].to_vec()).unwrap())
        .collect())
}

/// `x·w` split into `[H×K×d_h]`.
pub fn project_heads(x: &Tensor, w: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
    let parts = project_heads_var(&mut g, vx, vw, heads)?;
    Ok(stack_heads(&g, &parts))
}

/// Inverse of the head split: `[H×K×d_h]` → `[K×(H·d_h)]`.
pub fn concat_heads(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let parts: Vec<Var> = head_slices(x)?.into_iter().map(|t| g.constant(t)).collect();
    let cat = g.concat_cols(&parts)?;
    Ok(g.take(cat))
}

/// Scaled content energies `q̂·k̂ᵀ / sqrt(d_h)` for `[H×Kq×d_h]`, `[H×Kk×d_h]`.
pub fn energies_content(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (qs, ks) = (head_slices(q)?, head_slices(k)?);
    if qs.len() != ks.len() || q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "energies_content",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut g = Graph::new();
    let mut out = Vec::new();
    for (qh, kh) in qs.into_iter().zip(ks) {
        let (a, b) = (g.constant(qh), g.constant(kh));
        let e = g.matmul_t(a, b)?;
        out.push(g.scale(e, scale));
    }
    Ok(stack_heads(&g, &out))
}

/// Shift of every head of `b: [H×K×(2K-1)]`.
pub fn relative_shift(b: &Tensor) -> Result<Tensor> {
    if b.rank() != 3 || b.shape()[2] != 2 * b.shape()[1] - 1 {
        return Err(Error::Shape {
            op: "relative_shift",
            lhs: b.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (h, k) = (b.shape()[0], b.shape()[1]);
    let index: Vec<usize> = (0..h).flat_map(|i| shift_index(k, i * k * (2 * k - 1))).collect();
    let mut g = Graph::new();
    let v = g.constant(b.clone());
    let out = g.gather(v, index, vec![h, k, k])?;
    Ok(g.take(out))
}

fn check_table(table: &SinusoidalTable, len: usize) -> Result<()> {
    if table.mode() != PositionMode::Relative || table.max_len() < len {
        return Err(config_err(format!(
            "relative table covering K={} cannot serve {len} positions",
            table.max_len()
        )));
    }
    Ok(())
}

fn relative_of(params: &AttentionParams) -> Result<&RelativeParams> {
    params
        .relative
        .as_ref()
        .ok_or_else(|| config_err("relative energies need W_R, u and v"))
}

/// Relative self-attention energies `[H×K×K]` via the shift trick.
pub fn energies_relative(h: &Tensor, params: &AttentionParams, table: &SinusoidalTable) -> Result<Tensor> {
    relative_of(params)?;
    check_table(table, h.rows())?;
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let vars = params.bind(&mut g);
    let e = energies_var(&mut g, x, x, &vars, Some(table))?;
    Ok(stack_heads(&g, &e))
}

/// Content-only energies of `h + P` (absolute positions added to the inputs).
pub fn energies_absolute(h: &Tensor, params: &AttentionParams, table: &SinusoidalTable) -> Result<Tensor> {
    let x = crate::position::add_absolute(h, table)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut vars = params.bind(&mut g);
    vars.relative = None;
    let e = energies_var(&mut g, xv, xv, &vars, None)?;
    Ok(stack_heads(&g, &e))
}

/// Direct per-pair evaluation of the four relative energy terms. O(K²·D) per
/// head; used as the reference for [`energies_relative`].
pub fn energies_relative_naive(h: &Tensor, params: &AttentionParams, table: &SinusoidalTable) -> Result<Tensor> {
    let rel = relative_of(params)?;
    let (len, d) = (h.rows(), h.cols());
    check_table(table, len)?;
    check_heads(d, params.heads)?;
    if table.dim() != d || params.dim() != d {
        return Err(Error::Shape {
            op: "energies_relative_naive",
            lhs: h.shape().to_vec(),
            rhs: vec![table.dim(), params.dim()],
        });
    }
    let project = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..d).map(|c| (0..d).map(|r| row[r] * w.at(&[r, c])).sum()).collect()
    };
    let dh = d / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[params.heads, len, len]);
    for i in 0..len {
        let q = project(h.row(i), &params.w_q);
        for j in 0..len {
            let k = project(h.row(j), &params.w_k);
            let dist = table.distance_row(i as isize - j as isize).expect("checked coverage");
            let r = project(dist, &rel.w_r);
            for head in 0..params.heads {
                let cols = head * dh..(head + 1) * dh;
                let dot = |a: &[f64], b: &[f64]| cols.clone().map(|c| a[c] * b[c]).sum::<f64>();
                let a = dot(&q, &k);
                let b = dot(&q, &r);
                let c = dot(rel.u.data(), &k);
                let dd = dot(rel.v.data(), &r);
                out.set(&[head, i, j], (a + b + c + dd) * scale);
            }
        }
    }
    Ok(out)
}

/// Multi-head attention on plain tensors. Relative mode requires `x_q == x_kv`.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    mask: Option<&AttentionMask>,
    table: Option<&SinusoidalTable>,
) -> Result<Tensor> {
    if params.relative.is_some() && x_q != x_kv {
        return Err(config_err(
            "relative position terms are not defined for cross-attention",
        ));
    }
    let mut g = Graph::new();
    let q = g.constant(x_q.clone());
    let kv = if x_q == x_kv { q } else { g.constant(x_kv.clone()) };
    let vars = params.bind(&mut g);
    let out = attend_var(&mut g, q, kv, &vars, table, mask, None)?;
    Ok(g.take(out))
}

/// Writes energies in the golden-file layout: one value per line, row-major,
/// 17 significant digits.
pub fn write_golden(t: &Tensor) -> String {
    let mut s = String::new();
    for v in t.data() {
        s.push_str(&format!("{v:.16e}\n"));
    }
    s
}

pub fn parse_golden(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("golden line `{l}`: {e}")))
        })
        .collect()
}
