use super::Utterance;
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::tensor::Tensor;

/// Utterances padded to a common length. `frames` and `targets` keep the
/// true lengths so padding can be masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the members in the input slice.
    pub indices: Vec<usize>,
    pub features: Vec<Tensor>,
    pub frames: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub target_pad: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Predicted target tokens, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.targets.iter().map(|t| t.len() + 1).sum()
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.len())
            .map(|i| Sample {
                features: &self.features[i],
                frames: self.frames[i],
                target: &self.targets[i],
                target_pad: self.target_pad,
            })
            .collect()
    }
}

fn pad_rows(x: &Tensor, rows: usize) -> Tensor {
    if x.rows() == rows {
        return x.clone();
    }
    let mut data = x.data().to_vec();
    data.resize(rows * x.cols(), 0.0);
    Tensor::new(vec![rows, x.cols()], data).expect("padding keeps the width")
}

/// Greedy packing of length-sorted utterances. A batch's cost is its padded
/// size: members × longest target, and members × longest feature sequence.
pub fn batch_by_tokens(items: &[Utterance], max_target_tokens: usize, max_frames: usize) -> Result<Vec<Batch>> {
    for (i, u) in items.iter().enumerate() {
        if u.target.len() > max_target_tokens || u.features.rows() > max_frames {
            return Err(Error::Input(format!(
                "utterance {i} ({} frames, {} targets) exceeds the batch budget ({max_frames} frames, {max_target_tokens} targets)",
                u.features.rows(),
                u.target.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| (items[i].target.len(), items[i].features.rows()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_m, mut max_n) = (0, 0);
    for i in order {
        let (m, n) = (items[i].target.len(), items[i].features.rows());
        let (new_m, new_n) = (max_m.max(m), max_n.max(n));
        let count = current.len() + 1;
        if !current.is_empty() && (count * new_m > max_target_tokens || count * new_n > max_frames) {
            groups.push(std::mem::take(&mut current));
            (max_m, max_n) = (m, n);
        } else {
            (max_m, max_n) = (new_m, new_n);
        }
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }

    Ok(groups
        .into_iter()
        .map(|indices| {
            let frames_pad = indices.iter().map(|&i| items[i].features.rows()).max().unwrap_or(0);
            let target_pad = indices.iter().map(|&i| items[i].target.len()).max().unwrap_or(0);
            Batch {
                features: indices
                    .iter()
                    .map(|&i| pad_rows(&items[i].features, frames_pad))
                    .collect(),
                frames: indices.iter().map(|&i| items[i].features.rows()).collect(),
                targets: indices.iter().map(|&i| items[i].target.clone()).collect(),
                target_pad,
                indices,
            }
        })
        .collect())
}
