//! Fixed sinusoidal encodings for absolute positions and signed distances.
//!
//! Column `2k` holds `sin(t / 10000^(2k/D))` and column `2k+1` holds
//! `cos(t / 10000^(2k/D))`, where `t` is a position (absolute tables) or a
//! signed query-minus-key distance (relative tables).

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    Absolute,
    Relative,
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Absolute => "absolute",
            Self::Relative => "relative",
        })
    }
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" | "abs" => Ok(Self::Absolute),
            "relative" | "rel" => Ok(Self::Relative),
            other => Err(config_err(format!("unknown position mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidalTable {
    mode: PositionMode,
    /// Absolute: number of positions. Relative: the sequence length K covered.
    len: usize,
    rows: Tensor,
}

fn encoding_row(t: f64, dim: usize, out: &mut [f64]) {
    for k in 0..dim / 2 {
        let angle = t / 10000f64.powf((2 * k) as f64 / dim as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(config_err(format!(
            "encoding dimension must be even and positive, got {dim}"
        )));
    }
    Ok(())
}

/// Table with one row per position `0..n_positions`.
pub fn absolute_encoding(n_positions: usize, dim: usize) -> Result<SinusoidalTable> {
    check_dim(dim)?;
    if n_positions == 0 {
        return Err(config_err("absolute encoding needs at least one position"));
    }
    let mut data = vec![0.0; n_positions * dim];
    for (i, row) in data.chunks_mut(dim).enumerate() {
        encoding_row(i as f64, dim, row);
    }
    Ok(SinusoidalTable {
        mode: PositionMode::Absolute,
        len: n_positions,
        rows: Tensor::new(vec![n_positions, dim], data)?,
    })
}

/// Table with `2K-1` rows for distances `K-1, K-2, ..., -(K-1)` (in that order).
///
/// A key to the left of its query (`j < i`) sits at positive distance `i - j`.
pub fn relative_encoding(max_len: usize, dim: usize) -> Result<SinusoidalTable> {
    check_dim(dim)?;
    if max_len == 0 {
        return Err(config_err("relative encoding needs K >= 1"));
    }
    let n = 2 * max_len - 1;
    let mut data = vec![0.0; n * dim];
    for (r, row) in data.chunks_mut(dim).enumerate() {
        let k = (max_len - 1) as f64 - r as f64;
        encoding_row(k, dim, row);
    }
    Ok(SinusoidalTable {
        mode: PositionMode::Relative,
        len: max_len,
        rows: Tensor::new(vec![n, dim], data)?,
    })
}

impl SinusoidalTable {
    pub fn mode(&self) -> PositionMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Positions covered (absolute) or the K whose distances are covered (relative).
    pub fn max_len(&self) -> usize {
        self.len
    }

    pub fn num_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    /// Row index of signed distance `k` in a relative table.
    pub fn distance_index(&self, k: isize) -> Option<usize> {
        let half = self.len as isize - 1;
        (self.mode == PositionMode::Relative && k.abs() <= half).then(|| (half - k) as usize)
    }

    pub fn distance_row(&self, k: isize) -> Option<&[f64]> {
        self.distance_index(k).map(|r| self.rows.row(r))
    }

    pub fn position_row(&self, i: usize) -> Option<&[f64]> {
        (self.mode == PositionMode::Absolute && i < self.len).then(|| self.rows.row(i))
    }

    /// The contiguous `2K-1` rows covering distances `±(K-1)` of a length-K sequence.
    pub fn distances_for(&self, k: usize) -> Result<Tensor> {
        if self.mode != PositionMode::Relative {
            return Err(config_err("distance rows requested from an absolute table"));
        }
        if k == 0 || k > self.len {
            return Err(config_err(format!(
                "relative table covers K <= {}, sequence has {k} positions",
                self.len
            )));
        }
        Ok(self.rows.slice_rows(self.len - k, 2 * k - 1))
    }

    /// The first `n` rows of an absolute table.
    pub fn positions_for(&self, n: usize) -> Result<Tensor> {
        if self.mode != PositionMode::Absolute {
            return Err(config_err("position rows requested from a relative table"));
        }
        if n == 0 || n > self.len {
            return Err(config_err(format!("absolute table has {} rows, need {n}", self.len)));
        }
        Ok(self.rows.slice_rows(0, n))
    }
}

/// Adds absolute encodings of positions `0..N` to `x: [N×D]`.
pub fn add_absolute(x: &Tensor, table: &SinusoidalTable) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != table.dim() {
        return Err(Error::Shape {
            op: "add_absolute",
            lhs: x.shape().to_vec(),
            rhs: table.tensor().shape().to_vec(),
        });
    }
    let p = table.positions_for(x.rows())?;
    let data = x.data().iter().zip(p.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data)
}
