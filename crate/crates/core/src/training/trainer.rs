use super::accum::GradAccumulator;
use super::adam::{Adam, AdamConfig};
use super::TrainSchedule;
use crate::checkpoint::Checkpoint;
use crate::data::{batch_by_tokens, spec_augment, SpecAugmentConfig, Utterance};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Sample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    /// Target tokens that went into this update.
    pub tokens: usize,
    pub lr: f64,
    /// Per-token training loss of the update (label smoothing included).
    pub loss: f64,
    pub val_ppl: Option<f64>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6e}\t{:.6}\t", self.step, self.tokens, self.lr, self.loss)?;
        if let Some(p) = self.val_ppl {
            write!(f, "{p:.6}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxSteps,
    TargetLoss,
    /// Training stopped before applying the offending update; the model holds
    /// the last good parameters.
    Diverged {
        step: u64,
        loss: f64,
    },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    /// Retained checkpoints, best first when validation data was given.
    pub checkpoints: Vec<Checkpoint>,
    pub stop: StopReason,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|e| e.loss)
    }

    /// The metric log as text, one update per line.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Perplexity under teacher forcing, without label smoothing or noise.
pub fn evaluate_perplexity(model: &Model, data: &[Utterance]) -> Result<f64> {
    let mut loss = 0.0;
    let mut tokens = 0;
    for u in data {
        let out = model.loss(&[Sample::new(&u.features, &u.target)], 0.0, None, false)?;
        loss += out.loss;
        tokens += out.tokens;
    }
    if tokens == 0 {
        return Err(Error::Input("no validation tokens".into()));
    }
    Ok((loss / tokens as f64).exp())
}

pub struct Trainer {
    model: Model,
    schedule: TrainSchedule,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

impl Trainer {
    pub fn new(model: Model, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let adam = Adam::new(AdamConfig::default(), model.params().values());
        let rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        Ok(Self {
            model,
            schedule,
            adam,
            rng,
            step: 0,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(model: Model, schedule: TrainSchedule, adam: Adam) -> Result<Self> {
        let mut t = Self::new(model, schedule)?;
        t.step = adam.step_count();
        t.adam = Adam::from_parts(
            adam.config,
            adam.step_count(),
            adam.first_moments().to_vec(),
            adam.second_moments().to_vec(),
            t.model.params().values(),
        )?;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn keep_checkpoint(&self, kept: &mut Vec<Checkpoint>, ckpt: Checkpoint) {
        kept.push(ckpt);
        let k = self.schedule.keep_best.max(1);
        if kept.iter().all(|c| c.val_ppl.is_some()) {
            kept.sort_by(|a, b| {
                a.val_ppl
                    .unwrap()
                    .total_cmp(&b.val_ppl.unwrap())
                    .then(a.step.cmp(&b.step))
            });
            kept.truncate(k);
        } else if kept.len() > k {
            let drop = kept.len() - k;
            kept.drain(..drop);
        }
    }

    pub fn train(&mut self, train: &[Utterance], valid: Option<&[Utterance]>) -> Result<TrainReport> {
        let s = self.schedule.clone();
        let d_model = self.model.config().d_model;
        let mut batches = batch_by_tokens(train, s.batch_tokens, s.batch_frames)?;
        if batches.is_empty() {
            return Err(Error::Input("no training data".into()));
        }
        let mut acc = GradAccumulator::new(s.accum_target_tokens);
        let mut log = Vec::new();
        let mut kept = Vec::new();
        if self.step >= s.max_steps {
            return Ok(TrainReport {
                log,
                checkpoints: kept,
                stop: StopReason::MaxSteps,
                steps: self.step,
            });
        }
        loop {
            batches.shuffle(&mut self.rng);
            for batch in &batches {
                let augmented: Vec<Tensor>;
                let mut samples = batch.samples();
                if s.spec_augment {
                    augmented = batch
                        .features
                        .iter()
                        .zip(&batch.frames)
                        .map(|(x, &n)| spec_augment(x, &SpecAugmentConfig::default_for(n, x.cols()), &mut self.rng))
                        .collect();
                    for (smp, x) in samples.iter_mut().zip(&augmented) {
                        smp.features = x;
                    }
                }
                let out = self
                    .model
                    .loss(&samples, s.label_smoothing, Some(&mut self.rng), true)?;
                if !out.loss.is_finite() {
                    return Ok(self.diverged(log, kept, out.loss));
                }
                let grads = out.grads.expect("gradients requested");
                if !acc.add(grads, out.loss, out.tokens) {
                    continue;
                }
                let mut update = acc.take().expect("accumulator is due");
                if let Some(c) = s.clip_norm {
                    clip(&mut update.grads, c);
                }
                let lr = s.lr(self.step + 1, d_model)?;
                match self
                    .adam
                    .update(self.model.params_mut().values_mut(), &update.grads, lr)
                {
                    Ok(()) => {}
                    Err(Error::NonFinite(msg)) => {
                        log::error!("{msg}");
                        return Ok(self.diverged(log, kept, update.loss));
                    }
                    Err(e) => return Err(e),
                }
                self.step += 1;

                let needs_ckpt = self.step.is_multiple_of(s.checkpoint_every);
                let val_ppl = match valid {
                    Some(v) if self.step.is_multiple_of(s.eval_every) || needs_ckpt => {
                        Some(evaluate_perplexity(&self.model, v)?)
                    }
                    _ => None,
                };
                if needs_ckpt {
                    let ckpt = Checkpoint::from_model(&self.model, self.step, val_ppl, None);
                    self.keep_checkpoint(&mut kept, ckpt);
                }
                let entry = LogEntry {
                    step: self.step,
                    tokens: update.tokens,
                    lr,
                    loss: update.loss,
                    val_ppl,
                };
                log::debug!("{entry}");
                log.push(entry);

                let stop = if s.target_loss.is_some_and(|t| update.loss < t) {
                    Some(StopReason::TargetLoss)
                } else if self.step >= s.max_steps {
                    Some(StopReason::MaxSteps)
                } else {
                    None
                };
                if let Some(stop) = stop {
                    return Ok(TrainReport {
                        log,
                        checkpoints: kept,
                        stop,
                        steps: self.step,
                    });
                }
            }
        }
    }

    fn diverged(&self, log: Vec<LogEntry>, checkpoints: Vec<Checkpoint>, loss: f64) -> TrainReport {
        log::error!("training diverged at update {} (loss {loss})", self.step + 1);
        TrainReport {
            log,
            checkpoints,
            stop: StopReason::Diverged {
                step: self.step + 1,
                loss,
            },
            steps: self.step,
        }
    }
}

/// Fresh model for `config` that keeps every encoder-side parameter of
/// `pretrained`. Decoder weights and the output embedding are drawn anew
/// from `seed`.
pub fn reinit_decoder(pretrained: &Model, config: ModelConfig, seed: u64) -> Result<Model> {
    let old = pretrained.config();
    if old.encoder_signature() != config.encoder_signature() {
        return Err(Error::Mismatch(format!(
            "encoder configurations differ: {} vs {}",
            serde_json::to_string(old)?,
            serde_json::to_string(&config)?
        )));
    }
    let mut model = Model::new(config, seed)?;
    for (name, value) in pretrained.params().iter() {
        if !Model::is_decoder_param(name) {
            model.params_mut().set(name, value.clone())?;
        }
    }
    Ok(model)
}

pub struct TransferOutcome {
    pub pretrained: Model,
    pub finetuned: Model,
    pub pretrain_report: TrainReport,
    pub finetune_report: TrainReport,
}

/// Trains on the recognition task, then keeps the encoder, re-initializes the
/// decoder for `st_config` and trains on the translation task.
pub fn pretrain_then_reinit(
    model: Model,
    asr: (&[Utterance], &TrainSchedule),
    st: (&[Utterance], &TrainSchedule),
    st_config: ModelConfig,
    reinit_seed: u64,
) -> Result<TransferOutcome> {
    let mut phase1 = Trainer::new(model, asr.1.clone())?;
    let pretrain_report = phase1.train(asr.0, None)?;
    let pretrained = phase1.into_model();
    let fresh = reinit_decoder(&pretrained, st_config, reinit_seed)?;
    let mut phase2 = Trainer::new(fresh, st.1.clone())?;
    let finetune_report = phase2.train(st.0, None)?;
    Ok(TransferOutcome {
        pretrained,
        finetuned: phase2.into_model(),
        pretrain_report,
        finetune_report,
    })
}
