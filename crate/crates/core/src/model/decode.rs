use super::{Ctx, Model, BOS, EOS};
use crate::attention::KvCache;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    /// Draw each token from the softmax of `logits / temperature`.
    Sample {
        temperature: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted symbols, without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Logits that produced each emitted token (EOS step included).
    pub step_logits: Vec<Vec<f64>>,
    /// Whether decoding stopped on EOS rather than the length limit.
    pub finished: bool,
}

struct Picker {
    strategy: DecodeStrategy,
    rng: Option<ChaCha8Rng>,
}

impl Picker {
    fn new(strategy: DecodeStrategy) -> Result<Self> {
        let rng = match strategy {
            DecodeStrategy::Greedy => None,
            DecodeStrategy::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Input(format!(
                        "sampling temperature must be positive, got {temperature}"
                    )));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
        };
        Ok(Self { strategy, rng })
    }

    fn pick(&mut self, logits: &[f64]) -> Result<usize> {
        match (self.strategy, self.rng.as_mut()) {
            (DecodeStrategy::Sample { temperature, .. }, Some(rng)) => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(e.to_string()))?;
                Ok(dist.sample(rng))
            }
            _ => Ok(argmax(logits)),
        }
    }
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Argmax decoding with the incremental cache.
    pub fn decode_greedy(&self, x: &Tensor, max_out: usize) -> Result<Vec<usize>> {
        Ok(self.decode(x, max_out, DecodeStrategy::Greedy)?.tokens)
    }

    /// Step-wise decoding reusing cached keys/values of earlier positions.
    pub fn decode(&self, x: &Tensor, max_out: usize, strategy: DecodeStrategy) -> Result<Decoded> {
        check_max_out(max_out)?;
        let mut picker = Picker::new(strategy)?;
        let mut ctx = Ctx::eval(self);
        let enc = ctx.encode(x, x.rows())?;
        let table = self.table_for(max_out)?.into_owned();
        let mut caches = vec![KvCache::default(); self.decoder.len()];
        let total = self.decoder.len();
        let mut out = Decoded {
            tokens: Vec::new(),
            step_logits: Vec::new(),
            finished: false,
        };
        let mut prev = BOS;
        for step in 0..max_out {
            let mut h = ctx.embed_inputs(&[prev], step)?;
            for (l, ids) in self.decoder.iter().enumerate() {
                h = ctx.decoder_layer_step(h, enc, *ids, l + 1, total, &table, &mut caches[l])?;
            }
            let logits = ctx.output_logits(h)?;
            let row = ctx.g.value(logits).data().to_vec();
            if push_step(&mut out, &mut picker, row)? {
                break;
            }
            prev = *out.tokens.last().expect("token pushed");
        }
        Ok(out)
    }

    /// Same as [`Model::decode`] but re-runs the whole decoder prefix at every step.
    pub fn decode_uncached(&self, x: &Tensor, max_out: usize, strategy: DecodeStrategy) -> Result<Decoded> {
        check_max_out(max_out)?;
        let mut picker = Picker::new(strategy)?;
        let mut ctx = Ctx::eval(self);
        let enc: Var = ctx.encode(x, x.rows())?;
        let mut out = Decoded {
            tokens: Vec::new(),
            step_logits: Vec::new(),
            finished: false,
        };
        let mut y_in = vec![BOS];
        for step in 0..max_out {
            let logits = ctx.decode_full(enc, &y_in, None)?;
            let row = ctx.g.value(logits).row(step).to_vec();
            if push_step(&mut out, &mut picker, row)? {
                break;
            }
            y_in.push(*out.tokens.last().expect("token pushed"));
        }
        Ok(out)
    }
}

fn check_max_out(max_out: usize) -> Result<()> {
    if max_out == 0 {
        return Err(Error::Input("max_out must be at least 1".into()));
    }
    Ok(())
}

/// Records one step; returns true when decoding should stop.
fn push_step(out: &mut Decoded, picker: &mut Picker, row: Vec<f64>) -> Result<bool> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    let tok = picker.pick(&row)?;
    out.step_logits.push(row);
    if tok == EOS {
        out.finished = true;
        return Ok(true);
    }
    out.tokens.push(tok);
    Ok(false)
}
