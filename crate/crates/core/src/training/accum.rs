use crate::tensor::Tensor;

/// Sums micro-batch gradients until enough target tokens have been seen.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    target: usize,
    sum: Option<Vec<Tensor>>,
    loss: f64,
    tokens: usize,
}

/// One normalized update's worth of gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulated {
    /// Summed gradients divided by `tokens`.
    pub grads: Vec<Tensor>,
    /// Summed loss divided by `tokens`.
    pub loss: f64,
    pub tokens: usize,
}

impl GradAccumulator {
    pub fn new(target_tokens: usize) -> Self {
        Self {
            target: target_tokens.max(1),
            sum: None,
            loss: 0.0,
            tokens: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Adds one micro-batch of summed gradients; returns true once an update is due.
    pub fn add(&mut self, grads: Vec<Tensor>, loss: f64, tokens: usize) -> bool {
        if tokens == 0 {
            log::warn!("skipping a batch without target tokens");
            return false;
        }
        match &mut self.sum {
            None => self.sum = Some(grads),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&grads) {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        self.loss += loss;
        self.tokens += tokens;
        self.tokens >= self.target
    }

    /// Takes the per-token normalized sum and resets the counter.
    pub fn take(&mut self) -> Option<Accumulated> {
        let grads = self.sum.take()?;
        let n = self.tokens as f64;
        let out = Accumulated {
            grads: grads.into_iter().map(|g| g.map(|v| v / n)).collect(),
            loss: self.loss / n,
            tokens: self.tokens,
        };
        self.loss = 0.0;
        self.tokens = 0;
        Some(out)
    }
}
