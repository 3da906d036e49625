//! Absolute vs relative position modes on clean and heavily padded data.

use crate::data::{TaskSplits, Utterance};
use crate::error::{Error, Result};
use crate::metrics::edit_distance;
use crate::model::{Model, ModelConfig};
use crate::position::PositionMode;
use crate::training::{TrainSchedule, Trainer};
use std::fmt::Write as _;

/// Corpus token error rate of greedy decoding. Output length is capped at
/// the number of input frames.
pub fn token_error_rate(model: &Model, data: &[Utterance]) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for u in data {
        let max_out = u.features.rows().max(1);
        let hyp = model.decode_greedy(&u.features, max_out)?;
        edits += edit_distance(&hyp, &u.target);
        words += u.target.len();
    }
    if words == 0 {
        return Err(Error::Input("no reference tokens to score".into()));
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeScores {
    pub standard: f64,
    pub shifted: f64,
}

impl ModeScores {
    pub fn delta(&self) -> f64 {
        self.shifted - self.standard
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub absolute: ModeScores,
    pub relative: ModeScores,
}

impl SeedRun {
    /// Relative mode degrades no more than absolute mode.
    pub fn relative_holds_up(&self) -> bool {
        self.relative.delta() <= self.absolute.delta()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub runs: Vec<SeedRun>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl CompareReport {
    pub fn mean(&self, mode: PositionMode) -> ModeScores {
        let pick = |r: &SeedRun| match mode {
            PositionMode::Absolute => r.absolute,
            PositionMode::Relative => r.relative,
        };
        ModeScores {
            standard: mean(self.runs.iter().map(|r| pick(r).standard)),
            shifted: mean(self.runs.iter().map(|r| pick(r).shifted)),
        }
    }

    pub fn relative_wins(&self) -> usize {
        self.runs.iter().filter(|r| r.relative_holds_up()).count()
    }

    /// Aligned table followed by `key=value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>10} {:>10} {:>10}",
            "mode", "seed", "standard", "shifted", "delta"
        );
        let mut row = |mode: &str, seed: &str, s: ModeScores| {
            let _ = writeln!(
                out,
                "{mode:<10} {seed:>6} {:>10.4} {:>10.4} {:>+10.4}",
                s.standard,
                s.shifted,
                s.delta()
            );
        };
        for r in &self.runs {
            row("absolute", &r.seed.to_string(), r.absolute);
            row("relative", &r.seed.to_string(), r.relative);
        }
        let abs = self.mean(PositionMode::Absolute);
        let rel = self.mean(PositionMode::Relative);
        row("absolute", "mean", abs);
        row("relative", "mean", rel);
        out.push('\n');
        for (name, s) in [("absolute", abs), ("relative", rel)] {
            let _ = writeln!(out, "{name}.standard={:.6}", s.standard);
            let _ = writeln!(out, "{name}.shifted={:.6}", s.shifted);
            let _ = writeln!(out, "{name}.delta={:.6}", s.delta());
        }
        let _ = writeln!(out, "seeds={}", self.runs.len());
        let _ = writeln!(out, "relative_holds_up={}", self.relative_wins());
        out
    }
}

/// Trains one model in `mode` from `seed` and scores both held-out splits.
pub fn run_mode(
    splits: &TaskSplits,
    base: &ModelConfig,
    schedule: &TrainSchedule,
    mode: PositionMode,
    seed: u64,
) -> Result<ModeScores> {
    let config = ModelConfig {
        position_mode: mode,
        ..base.clone()
    };
    let schedule = TrainSchedule {
        seed,
        ..schedule.clone()
    };
    let mut trainer = Trainer::new(Model::new(config, seed)?, schedule)?;
    let report = trainer.train(&splits.train, None)?;
    log::info!(
        "{mode} seed {seed}: {} updates, final loss {:?}",
        report.steps,
        report.final_loss()
    );
    let model = trainer.into_model();
    Ok(ModeScores {
        standard: token_error_rate(&model, &splits.test)?,
        shifted: token_error_rate(&model, &splits.test_shifted)?,
    })
}

/// Same data, configuration and seeds for both modes.
pub fn compare_modes(
    splits: &TaskSplits,
    base: &ModelConfig,
    schedule: &TrainSchedule,
    seeds: &[u64],
) -> Result<CompareReport> {
    if splits.test_shifted.is_empty() || splits.test.is_empty() {
        return Err(Error::Input(
            "comparison needs standard and shifted evaluation splits".into(),
        ));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        runs.push(SeedRun {
            seed,
            absolute: run_mode(splits, base, schedule, PositionMode::Absolute, seed)?,
            relative: run_mode(splits, base, schedule, PositionMode::Relative, seed)?,
        });
    }
    Ok(CompareReport { runs })
}
