//! Browser bindings for a few of the `relspeech` building blocks: the
//! sinusoidal tables, first-layer energies under padding, and the warmup
//! learning-rate curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relspeech::attention::{energies_absolute, energies_relative, AttentionParams};
use relspeech::position::{absolute_encoding, relative_encoding, PositionMode};
use relspeech::training::noam_lr;
use relspeech::Tensor;
use wasm_bindgen::prelude::*;

const DIM: usize = 16;
const HEADS: usize = 2;

fn js(e: relspeech::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `rows × dim` table. Relative tables have `2·len − 1` rows, from
/// distance `len − 1` down to `−(len − 1)`.
pub fn table_values(len: usize, dim: usize, relative: bool) -> relspeech::Result<Vec<f64>> {
    let table = if relative {
        relative_encoding(len, dim)?
    } else {
        absolute_encoding(len, dim)?
    };
    Ok(table.tensor().data().to_vec())
}

#[wasm_bindgen(js_name = positionTable)]
pub fn position_table(len: usize, dim: usize, relative: bool) -> Result<Vec<f64>, JsError> {
    table_values(len, dim, relative).map_err(js)
}

/// Head-0 energies among the content frames, with and without padding.
#[wasm_bindgen]
pub struct ShiftView {
    len: usize,
    relative_base: Vec<f64>,
    relative_padded: Vec<f64>,
    absolute_base: Vec<f64>,
    absolute_padded: Vec<f64>,
}

fn head0_block(e: &Tensor, offset: usize, len: usize) -> Vec<f64> {
    (0..len * len)
        .map(|i| e.at(&[0, offset + i / len, offset + i % len]))
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl ShiftView {
    /// Random content of `len` frames, then the same content behind `pad`
    /// random frames on both sides.
    pub fn compute(len: usize, pad: usize, seed: u64) -> relspeech::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::random(DIM, HEADS, PositionMode::Relative, &mut rng)?;
        let content = Tensor::randn(&[len.max(1), DIM], 1.0, &mut rng);
        let len = content.rows();
        let noise = Tensor::randn(&[len + 2 * pad, DIM], 1.0, &mut rng);
        let padded = Tensor::from_fn(&[len + 2 * pad, DIM], |i| {
            let row = i / DIM;
            if (pad..pad + len).contains(&row) {
                content.at(&[row - pad, i % DIM])
            } else {
                noise.data()[i]
            }
        });
        let abs_table = absolute_encoding(len + 2 * pad, DIM)?;
        let rel_base = energies_relative(&content, &params, &relative_encoding(len, DIM)?)?;
        let rel_padded = energies_relative(&padded, &params, &relative_encoding(len + 2 * pad, DIM)?)?;
        let abs_base = energies_absolute(&content, &params, &abs_table)?;
        let abs_padded = energies_absolute(&padded, &params, &abs_table)?;
        Ok(Self {
            len,
            relative_base: head0_block(&rel_base, 0, len),
            relative_padded: head0_block(&rel_padded, pad, len),
            absolute_base: head0_block(&abs_base, 0, len),
            absolute_padded: head0_block(&abs_padded, pad, len),
        })
    }
}

#[wasm_bindgen]
impl ShiftView {
    #[wasm_bindgen(constructor)]
    pub fn new(len: usize, pad: usize, seed: u64) -> Result<ShiftView, JsError> {
        Self::compute(len, pad, seed).map_err(js)
    }

    /// Content frames; each heatmap is `frames × frames`.
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.len
    }

    #[wasm_bindgen(js_name = relativeBase)]
    pub fn relative_base(&self) -> Vec<f64> {
        self.relative_base.clone()
    }

    #[wasm_bindgen(js_name = relativePadded)]
    pub fn relative_padded(&self) -> Vec<f64> {
        self.relative_padded.clone()
    }

    #[wasm_bindgen(js_name = absoluteBase)]
    pub fn absolute_base(&self) -> Vec<f64> {
        self.absolute_base.clone()
    }

    #[wasm_bindgen(js_name = absolutePadded)]
    pub fn absolute_padded(&self) -> Vec<f64> {
        self.absolute_padded.clone()
    }

    #[wasm_bindgen(js_name = relativeChange)]
    pub fn relative_change(&self) -> f64 {
        max_diff(&self.relative_base, &self.relative_padded)
    }

    #[wasm_bindgen(js_name = absoluteChange)]
    pub fn absolute_change(&self) -> f64 {
        max_diff(&self.absolute_base, &self.absolute_padded)
    }
}

/// Learning rate for updates `1..=steps`.
pub fn lr_values(d_model: usize, warmup: u64, steps: u64) -> relspeech::Result<Vec<f64>> {
    (1..=steps).map(|s| noam_lr(s, d_model, warmup)).collect()
}

#[wasm_bindgen(js_name = noamCurve)]
pub fn noam_curve(d_model: usize, warmup: u64, steps: u64) -> Result<Vec<f64>, JsError> {
    lr_values(d_model, warmup, steps).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        assert_eq!(table_values(5, 8, false).unwrap().len(), 5 * 8);
        assert_eq!(table_values(5, 8, true).unwrap().len(), 9 * 8);
        assert!(table_values(5, 7, false).is_err());
    }

    #[test]
    fn padding_moves_only_absolute_energies() {
        let view = ShiftView::compute(6, 9, 3).unwrap();
        assert_eq!(view.frames(), 6);
        assert_eq!(view.relative_base().len(), 36);
        assert!(view.relative_change() <= 1e-9);
        assert!(view.absolute_change() > 1e-3);
        assert_eq!(ShiftView::compute(6, 0, 3).unwrap().absolute_change(), 0.0);
    }

    #[test]
    fn lr_curve_peaks_at_warmup() {
        let lr = lr_values(512, 40, 120).unwrap();
        let peak = lr.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak + 1, 40);
    }
}
