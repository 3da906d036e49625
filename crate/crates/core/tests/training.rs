use relspeech::checkpoint::average_checkpoints;
use relspeech::data::{SyntheticTaskSpec, Utterance};
use relspeech::model::{Model, ModelConfig, Sample, RESERVED};
use relspeech::training::{
    evaluate_perplexity, pretrain_then_reinit, reinit_decoder, GradAccumulator, StopReason, TrainSchedule, Trainer,
};
use relspeech::Tensor;

fn task_data(count: usize, seed: u64) -> (SyntheticTaskSpec, Vec<Utterance>) {
    let spec = SyntheticTaskSpec::default();
    let data = spec.build().unwrap().generate_set(count, seed, None);
    (spec, data)
}

fn small(spec: &SyntheticTaskSpec) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 32,
        input_dim: spec.feature_dim,
        vocab_size: spec.vocab_size(),
        max_len: 64,
        ..ModelConfig::default()
    }
}

fn quick(steps: u64) -> TrainSchedule {
    TrainSchedule {
        warmup_steps: 20,
        max_steps: steps,
        accum_target_tokens: 60,
        batch_tokens: 30,
        batch_frames: 1000,
        eval_every: 5,
        checkpoint_every: 5,
        ..TrainSchedule::default()
    }
}

fn samples(data: &[Utterance]) -> Vec<Sample<'_>> {
    data.iter().map(|u| Sample::new(&u.features, &u.target)).collect()
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn fixed_seed_reproduces_logs_and_parameters() {
    let (spec, data) = task_data(24, 1);
    let run = || {
        let mut t = Trainer::new(Model::new(small(&spec), 3).unwrap(), quick(12)).unwrap();
        let report = t.train(&data[..20], Some(&data[20..])).unwrap();
        (report.log_text(), t.into_model())
    };
    let (log_a, model_a) = run();
    let (log_b, model_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 12);
    for (a, b) in model_a.params().values().iter().zip(model_b.params().values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn accumulated_update_equals_single_batch_update() {
    let (spec, data) = task_data(6, 2);
    let model = Model::new(small(&spec).without_noise(), 4).unwrap();
    let all = samples(&data);
    let (b1, b2) = all.split_at(2);

    let mut acc = GradAccumulator::new(1_000_000);
    for part in [b1, b2] {
        let out = model.loss(part, 0.1, None, true).unwrap();
        acc.add(out.grads.unwrap(), out.loss, out.tokens);
    }
    let split = acc.take().unwrap();

    let mut one = GradAccumulator::new(1);
    let out = model.loss(&all, 0.1, None, true).unwrap();
    assert!(one.add(out.grads.unwrap(), out.loss, out.tokens));
    let joint = one.take().unwrap();

    assert_eq!(split.tokens, joint.tokens);
    assert!((split.loss - joint.loss).abs() <= 1e-12);
    assert!(max_diff(&split.grads, &joint.grads) <= 1e-12);
}

#[test]
fn duplicating_every_sequence_keeps_the_update() {
    let (spec, data) = task_data(4, 3);
    let model = Model::new(small(&spec).without_noise(), 5).unwrap();
    let once = samples(&data);
    let twice: Vec<Sample<'_>> = once.iter().chain(&once).copied().collect();
    let normalized = |s: &[Sample<'_>]| {
        let mut acc = GradAccumulator::new(1);
        let out = model.loss(s, 0.1, None, true).unwrap();
        acc.add(out.grads.unwrap(), out.loss, out.tokens);
        acc.take().unwrap()
    };
    let (a, b) = (normalized(&once), normalized(&twice));
    assert_eq!(b.tokens, 2 * a.tokens);
    assert!(max_diff(&a.grads, &b.grads) <= 1e-12);
}

#[test]
fn non_finite_loss_stops_training() {
    let (spec, data) = task_data(12, 4);
    let mut model = Model::new(small(&spec), 6).unwrap();
    let id = model.params().id("dec.embed").unwrap();
    model.params_mut().get_mut(id).data_mut()[RESERVED * 16] = f64::NAN;
    let mut t = Trainer::new(model, quick(10)).unwrap();
    let report = t.train(&data, None).unwrap();
    assert!(
        matches!(report.stop, StopReason::Diverged { step: 1, .. }),
        "{:?}",
        report.stop
    );
    assert_eq!(report.steps, 0);
    assert!(report.log.is_empty());
}

#[test]
fn averaged_checkpoint_is_no_worse_than_its_worst_member() {
    let (spec, data) = task_data(80, 5);
    let (train, valid) = data.split_at(64);
    let schedule = TrainSchedule {
        keep_best: 3,
        ..quick(60)
    };
    let mut t = Trainer::new(Model::new(small(&spec), 7).unwrap(), schedule).unwrap();
    let report = t.train(train, Some(valid)).unwrap();
    assert_eq!(report.checkpoints.len(), 3);
    let ppls: Vec<f64> = report.checkpoints.iter().map(|c| c.val_ppl.unwrap()).collect();
    assert!(ppls.windows(2).all(|w| w[0] <= w[1]));

    let avg = average_checkpoints(&report.checkpoints, 3).unwrap();
    let ppl = evaluate_perplexity(&avg.to_model().unwrap(), valid).unwrap();
    let worst = ppls.iter().copied().fold(f64::MIN, f64::max);
    assert!(ppl <= worst, "averaged {ppl} vs members {ppls:?}");
}

/// Same speech, a different output task: the symbols in reverse order,
/// written in a larger vocabulary.
fn translate(data: &[Utterance], shift: usize) -> Vec<Utterance> {
    data.iter()
        .map(|u| Utterance {
            target: u.target.iter().rev().map(|t| t + shift).collect(),
            ..u.clone()
        })
        .collect()
}

fn transfer_config(spec: &SyntheticTaskSpec, vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        heads: 4,
        enc_layers: 2,
        dec_layers: 1,
        ffn_dim: 64,
        input_dim: spec.feature_dim,
        vocab_size: vocab,
        max_len: 64,
        ..ModelConfig::default()
    }
}

#[test]
fn reinit_keeps_encoder_and_redraws_decoder() {
    let (spec, _) = task_data(1, 0);
    let asr = Model::new(transfer_config(&spec, spec.vocab_size()), 1).unwrap();
    let st_config = transfer_config(&spec, spec.vocab_size() + 3);
    let st = reinit_decoder(&asr, st_config.clone(), 2).unwrap();
    let fresh = Model::new(st_config, 2).unwrap();
    for (name, value) in st.params().iter() {
        if Model::is_decoder_param(name) {
            assert_eq!(value, fresh.params().by_name(name).unwrap(), "{name}");
        } else {
            assert_eq!(value, asr.params().by_name(name).unwrap(), "{name}");
        }
    }

    // decoder draws share no structure with the phase-one decoder
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (name, value) in st.params().iter().filter(|(n, _)| Model::is_decoder_param(n)) {
        let old = asr.params().by_name(name).unwrap();
        if old.shape() == value.shape() && !name.contains(".ln") {
            xs.extend_from_slice(old.data());
            ys.extend_from_slice(value.data());
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let (vx, vy): (f64, f64) = (
        xs.iter().map(|x| (x - mx).powi(2)).sum(),
        ys.iter().map(|y| (y - my).powi(2)).sum(),
    );
    let corr = cov / (vx * vy).sqrt();
    assert!(corr.abs() < 4.0 / n.sqrt(), "correlation {corr} over {n} values");

    let other_encoder = ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        ..transfer_config(&spec, spec.vocab_size())
    };
    assert!(reinit_decoder(&asr, other_encoder, 2).is_err());
}

#[test]
fn pretrained_encoder_reaches_translation_target_sooner() {
    let (spec, data) = task_data(300, 6);
    let st_data = translate(&data, 3);
    let asr_config = transfer_config(&spec, spec.vocab_size());
    let st_config = transfer_config(&spec, spec.vocab_size() + 3);
    let schedule = |steps, target| TrainSchedule {
        warmup_steps: 100,
        max_steps: steps,
        accum_target_tokens: 150,
        batch_tokens: 150,
        batch_frames: 4000,
        label_smoothing: 0.0,
        target_loss: target,
        seed: 3,
        ..TrainSchedule::default()
    };
    let asr_schedule = schedule(400, None);
    let st_schedule = schedule(600, Some(0.5));

    let outcome = pretrain_then_reinit(
        Model::new(asr_config, 1).unwrap(),
        (&data, &asr_schedule),
        (&st_data, &st_schedule),
        st_config.clone(),
        2,
    )
    .unwrap();
    let mut cold = Trainer::new(Model::new(st_config, 2).unwrap(), st_schedule).unwrap();
    let cold_report = cold.train(&st_data, None).unwrap();

    let warm = &outcome.finetune_report;
    assert_eq!(
        warm.stop,
        StopReason::TargetLoss,
        "warm start stopped by {:?}",
        warm.stop
    );
    assert!(
        warm.steps < cold_report.steps,
        "warm {} updates vs cold {} updates",
        warm.steps,
        cold_report.steps
    );
}
