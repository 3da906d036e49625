//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! `cargo test -p relspeech --test acceptance -- noam wer` runs only the
//! criteria whose name contains one of the given words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relspeech::attention::{
    energies_absolute, energies_content, energies_relative, energies_relative_naive, project_heads, AttentionParams,
};
use relspeech::checkpoint::{average_checkpoints, Checkpoint};
use relspeech::compare::compare_modes;
use relspeech::data::SyntheticTaskSpec;
use relspeech::metrics::{edit_distance, wer};
use relspeech::model::{DecodeStrategy, Model, ModelConfig, Sample};
use relspeech::position::{absolute_encoding, relative_encoding, PositionMode};
use relspeech::training::{noam_lr, Adam, AdamConfig, StopReason, TrainSchedule, Trainer};
use relspeech::Tensor;
use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn shift_trick() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = r.random_range(1..=16);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..=4) * 2;
        let params = AttentionParams::random(d, heads, PositionMode::Relative, &mut r).map_err(|e| e.to_string())?;
        let table = relative_encoding(k, d).map_err(|e| e.to_string())?;
        let h = Tensor::randn(&[k, d], 1.0, &mut r);
        let fast = energies_relative(&h, &params, &table).map_err(|e| e.to_string())?;
        let naive = energies_relative_naive(&h, &params, &table).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(&fast, &naive));
    }
    let msg = format!("200 instances, worst rel. err {worst:.3e}");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn embed_at(content: &Tensor, s: usize, r: &mut ChaCha8Rng) -> Tensor {
    let (k, d) = (content.rows(), content.cols());
    let pad = Tensor::randn(&[k + 2 * s, d], 1.0, r);
    Tensor::from_fn(&[k + 2 * s, d], |i| {
        let row = i / d;
        if (s..s + k).contains(&row) {
            content.at(&[row - s, i % d])
        } else {
            pad.data()[i]
        }
    })
}

fn central(e: &Tensor, s: usize, k: usize) -> Tensor {
    let h = e.shape()[0];
    Tensor::from_fn(&[h, k, k], |i| e.at(&[i / (k * k), s + (i / k) % k, s + i % k]))
}

fn time_shift() -> Outcome {
    let (k, d, heads) = (6, 8, 2);
    let mut r = rng(2);
    let params = AttentionParams::random(d, heads, PositionMode::Relative, &mut r).map_err(|e| e.to_string())?;
    let content = Tensor::randn(&[k, d], 1.0, &mut r);
    let abs_table = absolute_encoding(64, d).map_err(|e| e.to_string())?;
    let mut rel_base = None;
    let mut abs_base = None;
    let (mut rel_worst, mut abs_least) = (0.0f64, f64::INFINITY);
    for s in [0, 1, 5, 17] {
        let x = embed_at(&content, s, &mut r);
        let table = relative_encoding(x.rows(), d).map_err(|e| e.to_string())?;
        let rel = central(
            &energies_relative(&x, &params, &table).map_err(|e| e.to_string())?,
            s,
            k,
        );
        let abs = central(
            &energies_absolute(&x, &params, &abs_table).map_err(|e| e.to_string())?,
            s,
            k,
        );
        match (&rel_base, &abs_base) {
            (Some(rb), Some(ab)) => {
                rel_worst = rel_worst.max(rel.max_abs_diff(rb));
                abs_least = abs_least.min(abs.max_abs_diff(ab));
            }
            _ => {
                rel_base = Some(rel);
                abs_base = Some(abs);
            }
        }
    }

    // same property through the model's first encoder layer with silence padding
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 16,
        input_dim: 4,
        vocab_size: 8,
        ..ModelConfig::default()
    }
    .without_noise();
    let model = Model::new(config, 3).map_err(|e| e.to_string())?;
    let speech = Tensor::randn(&[k, 4], 1.0, &mut r);
    let base = model.first_layer_energies(&speech).map_err(|e| e.to_string())?;
    let mut model_worst: f64 = 0.0;
    for s in [1, 5, 17] {
        let x = Tensor::from_fn(&[k + 2 * s, 4], |i| {
            let row = i / 4;
            if (s..s + k).contains(&row) {
                speech.at(&[row - s, i % 4])
            } else {
                0.0
            }
        });
        let e = model.first_layer_energies(&x).map_err(|e| e.to_string())?;
        model_worst = model_worst.max(central(&e, s, k).max_abs_diff(&base));
    }

    let msg = format!(
        "relative max diff {rel_worst:.3e}, model layer-1 max diff {model_worst:.3e}, absolute min diff {abs_least:.3e}"
    );
    if rel_worst <= 1e-9 && model_worst <= 1e-9 && abs_least > 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradients() -> Outcome {
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 2,
        dec_layers: 1,
        ffn_dim: 16,
        input_dim: 4,
        vocab_size: 9,
        position_mode: PositionMode::Relative,
        ..ModelConfig::default()
    }
    .without_noise();
    let mut model = Model::new(config, 4).map_err(|e| e.to_string())?;
    let mut r = rng(4);
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let y = [4, 7, 5, 8];
    let sample = [Sample::new(&x, &y)];
    let out = model.loss(&sample, 0.1, None, true).map_err(|e| e.to_string())?;
    let grads = out.grads.ok_or("no gradients returned")?;
    let h = 1e-5;
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for id in 0..model.params().len() {
        for idx in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[idx];
            model.params_mut().get_mut(id).data_mut()[idx] = orig + h;
            let up = model.loss(&sample, 0.1, None, false).map_err(|e| e.to_string())?.loss;
            model.params_mut().get_mut(id).data_mut()[idx] = orig - h;
            let down = model.loss(&sample, 0.1, None, false).map_err(|e| e.to_string())?.loss;
            model.params_mut().get_mut(id).data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[id].data()[idx];
            let scale = an.abs() + fd.abs();
            // below the roundoff floor of the difference quotient, compare absolutely
            let err = if scale < 1e-6 {
                (an - fd).abs() / 1e-9 * 1e-4
            } else {
                (an - fd).abs() / scale
            };
            if err > worst {
                worst = err;
                worst_at = format!("{}[{idx}]", model.params().name(id));
            }
            checked += 1;
        }
    }
    let msg = format!("{checked} entries, worst rel. err {worst:.3e} at {worst_at}");
    if worst <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn degenerate() -> Outcome {
    let mut r = rng(5);
    for trial in 0..20 {
        let heads = [1, 2, 4][trial % 3];
        let (k, d) = (1 + trial % 9, heads * 4);
        let mut params =
            AttentionParams::random(d, heads, PositionMode::Relative, &mut r).map_err(|e| e.to_string())?;
        let rel = params.relative.as_mut().expect("relative params");
        rel.w_r = Tensor::zeros(&[d, d]);
        rel.u = Tensor::zeros(&[d]);
        rel.v = Tensor::zeros(&[d]);
        let table = relative_encoding(k, d).map_err(|e| e.to_string())?;
        let h = Tensor::randn(&[k, d], 1.0, &mut r);
        let relative = energies_relative(&h, &params, &table).map_err(|e| e.to_string())?;
        let q = project_heads(&h, &params.w_q, heads).map_err(|e| e.to_string())?;
        let kk = project_heads(&h, &params.w_k, heads).map_err(|e| e.to_string())?;
        let content = energies_content(&q, &kk).map_err(|e| e.to_string())?;
        let same_bits = relative
            .data()
            .iter()
            .zip(content.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_bits {
            return Err(format!(
                "trial {trial}: energies differ, max {:.3e}",
                relative.max_abs_diff(&content)
            ));
        }
    }
    Ok("20 instances bit-identical".into())
}

fn memorize_mode(mode: PositionMode) -> Result<(u64, f64, StopReason), String> {
    let spec = SyntheticTaskSpec::default();
    let task = spec.build().map_err(|e| e.to_string())?;
    let data = task.generate_set(16, 1, None);
    let config = ModelConfig {
        d_model: 32,
        heads: 4,
        enc_layers: 2,
        dec_layers: 1,
        ffn_dim: 64,
        input_dim: spec.feature_dim,
        vocab_size: spec.vocab_size(),
        position_mode: mode,
        max_len: 64,
        ..ModelConfig::default()
    }
    .without_noise();
    let schedule = TrainSchedule {
        warmup_steps: 200,
        max_steps: 2000,
        accum_target_tokens: 1,
        batch_tokens: 100_000,
        batch_frames: 100_000,
        label_smoothing: 0.0,
        target_loss: Some(0.1),
        seed: 1,
        ..TrainSchedule::default()
    };
    let mut trainer =
        Trainer::new(Model::new(config, 1).map_err(|e| e.to_string())?, schedule).map_err(|e| e.to_string())?;
    let report = trainer.train(&data, None).map_err(|e| e.to_string())?;
    Ok((report.steps, report.final_loss().unwrap_or(f64::NAN), report.stop))
}

fn memorization() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [PositionMode::Absolute, PositionMode::Relative] {
        let t = Instant::now();
        let (steps, loss, stop) = memorize_mode(mode)?;
        ok &= loss < 0.1 && stop == StopReason::TargetLoss;
        parts.push(format!(
            "{mode}: loss {loss:.4} after {steps} updates ({:.0?})",
            t.elapsed()
        ));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn position_modes() -> Outcome {
    let spec = SyntheticTaskSpec::default();
    let task = spec.build().map_err(|e| e.to_string())?;
    let splits = task.splits(2000, 200, (20, 40), 1);
    let config = ModelConfig {
        d_model: 32,
        heads: 4,
        enc_layers: 2,
        dec_layers: 1,
        ffn_dim: 64,
        input_dim: spec.feature_dim,
        vocab_size: spec.vocab_size(),
        max_len: 128,
        ..ModelConfig::default()
    };
    let schedule = TrainSchedule {
        warmup_steps: 200,
        max_steps: 3000,
        accum_target_tokens: 200,
        batch_tokens: 200,
        batch_frames: 2000,
        ..TrainSchedule::default()
    };
    let report = compare_modes(&splits, &config, &schedule, &[1, 2, 3]).map_err(|e| e.to_string())?;
    print!("{}", report.render());
    let wins = report.relative_wins();
    let per_seed: Vec<String> = report
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {} abs {:+.3} rel {:+.3}",
                r.seed,
                r.absolute.delta(),
                r.relative.delta()
            )
        })
        .collect();
    let msg = format!("relative degrades no more in {wins}/3 seeds ({})", per_seed.join(", "));
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn noam() -> Outcome {
    let lr = noam_lr(4096, 512, 4096).map_err(|e| e.to_string())?;
    let mut peak = (0, 0.0);
    for step in 1..=3 * 4096 {
        let v = noam_lr(step, 512, 4096).map_err(|e| e.to_string())?;
        if v > peak.1 {
            peak = (step, v);
        }
    }
    let msg = format!("lr(4096) = {lr:.7e}, peak at step {}", peak.0);
    if (lr - 6.9053e-4).abs() <= 1e-7 && peak.0 == 4096 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Fewest single-symbol insertions, deletions and substitutions turning
/// `from` into every string, found by breadth-first search over strings.
fn edit_bfs(from: &[u8], index: &HashMap<Vec<u8>, usize>, max_len: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; index.len()];
    let mut queue = VecDeque::new();
    dist[index[from]] = 0;
    queue.push_back(from.to_vec());
    while let Some(s) = queue.pop_front() {
        let d = dist[index[&s]];
        let mut neighbours = Vec::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            neighbours.push(t);
            for c in 0..3u8 {
                if c != s[i] {
                    let mut t = s.clone();
                    t[i] = c;
                    neighbours.push(t);
                }
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for c in 0..3u8 {
                    let mut t = s.clone();
                    t.insert(i, c);
                    neighbours.push(t);
                }
            }
        }
        for t in neighbours {
            let slot = &mut dist[index[&t]];
            if *slot == usize::MAX {
                *slot = d + 1;
                queue.push_back(t);
            }
        }
    }
    dist
}

fn wer_oracle() -> Outcome {
    let strings = all_strings(6);
    let index: HashMap<Vec<u8>, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut pairs = 0usize;
    for reference in &strings {
        let from_ref = edit_bfs(reference, &index, 6);
        for hyp in &strings {
            let oracle = from_ref[index[hyp]];
            if edit_distance(hyp, reference) != oracle {
                return Err(format!(
                    "{hyp:?} vs {reference:?}: dp {} oracle {oracle}",
                    edit_distance(hyp, reference)
                ));
            }
            match wer(hyp, reference) {
                Ok(w) if !reference.is_empty() && w == oracle as f64 / reference.len() as f64 => {}
                Err(_) if reference.is_empty() => {}
                other => {
                    return Err(format!(
                        "{hyp:?} vs {reference:?}: wer {other:?}, oracle edits {oracle}"
                    ))
                }
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs agree"))
}

fn checkpoints() -> Outcome {
    let config = ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 2,
        dec_layers: 1,
        ffn_dim: 32,
        input_dim: 4,
        vocab_size: 10,
        ..ModelConfig::default()
    };
    let model = Model::new(config.clone(), 9).map_err(|e| e.to_string())?;
    let mut r = rng(9);
    let moments = |r: &mut ChaCha8Rng| -> Vec<Tensor> {
        model
            .params()
            .values()
            .iter()
            .map(|t| Tensor::randn(t.shape(), 1e-3, r))
            .collect()
    };
    let (m, v) = (moments(&mut r), moments(&mut r));
    let v: Vec<Tensor> = v
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i].abs()))
        .collect();
    let adam = Adam::from_parts(AdamConfig::default(), 17, m, v, model.params().values()).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_model(&model, 17, Some(3.25), Some(&adam));

    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).map_err(|e| e.to_string())?;
    let back = Checkpoint::read_from(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    back.write_to(&mut again).map_err(|e| e.to_string())?;
    let bits_equal =
        back.params.iter().zip(ckpt.params.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if back != ckpt || again != bytes || !bits_equal {
        return Err("round trip changed the checkpoint".into());
    }
    let restored = back.to_model().map_err(|e| e.to_string())?;
    let x = Tensor::randn(&[5, 4], 1.0, &mut r);
    let same_logits = model.logits(&x, &[0, 4]).map_err(|e| e.to_string())?
        == restored.logits(&x, &[0, 4]).map_err(|e| e.to_string())?;
    if !same_logits {
        return Err("restored model computes different logits".into());
    }

    let copies: Vec<Checkpoint> = (0..3)
        .map(|i| Checkpoint::from_model(&model, i, Some(1.0 + i as f64), None))
        .collect();
    let mean = average_checkpoints(&copies, 3).map_err(|e| e.to_string())?;
    if mean.params != ckpt.params {
        return Err("mean of equal checkpoints differs from the input".into());
    }
    let mut negated = ckpt.clone();
    for t in negated.params.values_mut() {
        for x in t.data_mut() {
            *x = -*x;
        }
    }
    negated.step = 18;
    let zero = average_checkpoints(&[ckpt.clone(), negated], 2).map_err(|e| e.to_string())?;
    if zero.params.values().iter().any(|t| t.data().iter().any(|&x| x != 0.0)) {
        return Err("theta and -theta do not average to zero".into());
    }
    Ok(format!(
        "{} bytes round-trip bit-exactly; equal-mean and symmetric identities hold",
        bytes.len()
    ))
}

fn incremental_decode() -> Outcome {
    let spec = SyntheticTaskSpec::default();
    let task = spec.build().map_err(|e| e.to_string())?;
    let data = task.generate_set(20, 10, None);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for mode in [PositionMode::Relative, PositionMode::Absolute] {
        let config = ModelConfig {
            d_model: 16,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 32,
            input_dim: spec.feature_dim,
            vocab_size: spec.vocab_size(),
            position_mode: mode,
            ..ModelConfig::default()
        };
        let model = Model::new(config, 10).map_err(|e| e.to_string())?;
        for (i, u) in data.iter().enumerate() {
            let strategy = DecodeStrategy::Sample {
                temperature: 1.0,
                seed: i as u64,
            };
            let a = model.decode(&u.features, 12, strategy).map_err(|e| e.to_string())?;
            let b = model
                .decode_uncached(&u.features, 12, strategy)
                .map_err(|e| e.to_string())?;
            if a.tokens != b.tokens {
                return Err(format!("{mode} utterance {i}: token sequences differ"));
            }
            for (ra, rb) in a.step_logits.iter().zip(&b.step_logits) {
                steps += 1;
                for (x, y) in ra.iter().zip(rb) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    let msg = format!("40 decodes, {steps} steps, worst logit diff {worst:.3e}");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion {
            name: "1 shift trick matches naive energies",
            budget: Duration::from_secs(10),
            run: shift_trick,
        },
        Criterion {
            name: "2 time-shift invariance",
            budget: Duration::from_secs(5),
            run: time_shift,
        },
        Criterion {
            name: "3 full-model gradients",
            budget: Duration::from_secs(60),
            run: gradients,
        },
        Criterion {
            name: "4 degenerate reduction",
            budget: Duration::from_secs(5),
            run: degenerate,
        },
        Criterion {
            name: "5 memorization",
            budget: Duration::from_secs(600),
            run: memorization,
        },
        Criterion {
            name: "6 position modes under padding",
            budget: Duration::from_secs(1800),
            run: position_modes,
        },
        Criterion {
            name: "7 noam schedule",
            budget: Duration::from_secs(5),
            run: noam,
        },
        Criterion {
            name: "8 wer oracle",
            budget: Duration::from_secs(30),
            run: wer_oracle,
        },
        Criterion {
            name: "9 checkpoint round trip and averaging",
            budget: Duration::from_secs(10),
            run: checkpoints,
        },
        Criterion {
            name: "10 incremental decoding",
            budget: Duration::from_secs(30),
            run: incremental_decode,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{}] {detail} ({took:.1?})",
            if pass { "PASS" } else { "FAIL" },
            c.name
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
