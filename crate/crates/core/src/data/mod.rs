//! Synthetic speech-like task, feature perturbations, tokenization and batching.

mod augment;
mod batch;
mod io;
mod vocab;

pub use augment::{spec_augment, speed_perturb, SpecAugmentConfig};
pub use batch::{batch_by_tokens, Batch};
pub use io::{read_dataset, write_dataset, Dataset};
pub use vocab::Vocab;

use crate::error::{config_err, Result};
use crate::model::RESERVED;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Parameters of the generator. Every symbol is emitted as a run of noisy
/// copies of its template; utterances are framed by noisy silence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub alphabet: usize,
    /// Inclusive range of frames each symbol occupies.
    pub frames_per_symbol: (usize, usize),
    pub feature_dim: usize,
    pub noise: f64,
    /// Inclusive range of silence frames added on each side.
    pub pad: (usize, usize),
    /// Inclusive range of symbols per utterance.
    pub symbols: (usize, usize),
    /// Seeds the templates.
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            alphabet: 8,
            frames_per_symbol: (2, 4),
            feature_dim: 8,
            noise: 0.2,
            pad: (0, 4),
            symbols: (3, 8),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub target: Vec<usize>,
    pub pad_left: usize,
    pub pad_right: usize,
    pub speed: f64,
}

/// A spec plus its drawn templates `[alphabet×F]`.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    templates: Tensor,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.frames_per_symbol;
        if a == 0 || b < a {
            return Err(config_err(format!("frames per symbol range [{a}, {b}] invalid")));
        }
        let (lo, hi) = self.symbols;
        if lo == 0 || hi < lo {
            return Err(config_err(format!("symbols per utterance range [{lo}, {hi}] invalid")));
        }
        if self.pad.1 < self.pad.0 {
            return Err(config_err(format!(
                "pad range [{}, {}] invalid",
                self.pad.0, self.pad.1
            )));
        }
        if self.alphabet < 2 {
            return Err(config_err("alphabet needs at least two symbols"));
        }
        if self.feature_dim == 0 {
            return Err(config_err("feature_dim must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }

    /// Model vocabulary size: reserved ids plus one id per symbol.
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.alphabet
    }

    pub fn build(&self) -> Result<SyntheticTask> {
        self.validate()?;
        SyntheticTask::new(self.clone())
    }
}

fn min_distance(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in 0..i {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

impl SyntheticTask {
    fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        let f = spec.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Row 0 of the candidate set is silence; symbols must also stay clear of it.
        let required = (4.0 * spec.noise).max(1.0);
        for _ in 0..1000 {
            let mut rows = vec![vec![0.0; f]];
            rows.extend((0..spec.alphabet).map(|_| (0..f).map(|_| normal.sample(&mut rng)).collect()));
            if min_distance(&rows) > required {
                let data = rows[1..].concat();
                return Ok(Self {
                    templates: Tensor::new(vec![spec.alphabet, f], data)?,
                    spec,
                });
            }
        }
        Err(config_err(format!(
            "could not draw {} templates in {f} dimensions separated by more than {required}",
            spec.alphabet
        )))
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn templates(&self) -> &Tensor {
        &self.templates
    }

    /// Model id of symbol `s`.
    pub fn symbol_id(s: usize) -> usize {
        RESERVED + s
    }

    /// Draws one utterance. Consecutive symbols always differ, otherwise the
    /// boundary between two runs of the same template would be unobservable.
    pub fn generate(&self, rng: &mut impl Rng) -> Utterance {
        self.generate_with_pad(rng, self.spec.pad)
    }

    pub fn generate_with_pad(&self, rng: &mut impl Rng, pad: (usize, usize)) -> Utterance {
        let spec = &self.spec;
        let f = spec.feature_dim;
        let m = rng.random_range(spec.symbols.0..=spec.symbols.1);
        let mut symbols = Vec::with_capacity(m);
        for _ in 0..m {
            let s = loop {
                let s = rng.random_range(0..spec.alphabet);
                if symbols.last() != Some(&s) {
                    break s;
                }
            };
            symbols.push(s);
        }
        let runs: Vec<usize> = symbols
            .iter()
            .map(|_| rng.random_range(spec.frames_per_symbol.0..=spec.frames_per_symbol.1))
            .collect();
        let pad_left = rng.random_range(pad.0..=pad.1);
        let pad_right = rng.random_range(pad.0..=pad.1);
        let mut frames: Vec<Option<usize>> = vec![None; pad_left];
        for (&s, &r) in symbols.iter().zip(&runs) {
            frames.extend(std::iter::repeat_n(Some(s), r));
        }
        frames.extend(std::iter::repeat_n(None, pad_right));
        let noise = Normal::new(0.0, spec.noise).expect("validated noise");
        let mut data = Vec::with_capacity(frames.len() * f);
        for frame in frames {
            for k in 0..f {
                let base = frame.map_or(0.0, |s| self.templates.row(s)[k]);
                let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(base + eps);
            }
        }
        let n = data.len() / f;
        Utterance {
            features: Tensor::new(vec![n, f], data).expect("utterance is nonempty"),
            target: symbols.into_iter().map(Self::symbol_id).collect(),
            pad_left,
            pad_right,
            speed: 1.0,
        }
    }

    /// `count` utterances; utterance `i` uses stream `i` of `seed`, so any
    /// subset can be regenerated independently.
    pub fn generate_set(&self, count: usize, seed: u64, pad: Option<(usize, usize)>) -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.generate_with_pad(&mut rng, pad.unwrap_or(self.spec.pad))
            })
            .collect()
    }
}

/// Train, held-out and heavily padded held-out splits of one task.
#[derive(Clone, Debug)]
pub struct TaskSplits {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub test_shifted: Vec<Utterance>,
}

impl SyntheticTask {
    /// The held-out splits share their symbol strings and durations (same
    /// seeds); only the amount of surrounding silence differs.
    pub fn splits(&self, n_train: usize, n_test: usize, shifted_pad: (usize, usize), seed: u64) -> TaskSplits {
        let test_seed = seed ^ 0x5eed_7e57;
        TaskSplits {
            train: self.generate_set(n_train, seed, None),
            test: self.generate_set(n_test, test_seed, None),
            test_shifted: self.generate_set(n_test, test_seed, Some(shifted_pad)),
        }
    }
}
