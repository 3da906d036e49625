use clap::{Args, ValueEnum};
use relspeech::model::ModelConfig;
use relspeech::position::PositionMode;
use relspeech::training::TrainSchedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    LargeAsr,
    LargeSlt,
}

/// Everything a run is configured by. Missing fields in a JSON file keep
/// their defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    /// Starting point before the config file and flags are applied
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    /// Feed-forward hidden size
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Residual and attention dropout
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Attention-weight dropout (defaults to --dropout)
    #[arg(long)]
    pub attn_dropout: Option<f64>,
    #[arg(long)]
    pub word_dropout: Option<f64>,
    /// Drop probability of the top layer
    #[arg(long)]
    pub layer_drop: Option<f64>,
    #[arg(long)]
    pub position_mode: Option<PositionMode>,
    #[arg(long)]
    pub frame_stack: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Target tokens per update
    #[arg(long)]
    pub accum_tokens: Option<usize>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub batch_frames: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub keep_best: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub spec_augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl ModelFlags {
    pub fn apply(&self, m: &mut ModelConfig) {
        set!(m.d_model, self.d_model);
        set!(m.heads, self.heads);
        set!(m.enc_layers, self.enc_layers);
        set!(m.dec_layers, self.dec_layers);
        set!(m.ffn_dim, self.ffn);
        if let Some(p) = self.dropout {
            m.residual_dropout = p;
            m.attn_dropout = p;
        }
        set!(m.attn_dropout, self.attn_dropout);
        set!(m.word_dropout, self.word_dropout);
        set!(m.layer_drop, self.layer_drop);
        set!(m.position_mode, self.position_mode);
        set!(m.frame_stack, self.frame_stack);
        set!(m.max_len, self.max_len);
    }
}

impl ScheduleFlags {
    pub fn apply(&self, s: &mut TrainSchedule) {
        set!(s.warmup_steps, self.warmup);
        set!(s.lr_scale, self.lr_scale);
        set!(s.max_steps, self.max_steps);
        set!(s.accum_target_tokens, self.accum_tokens);
        set!(s.batch_tokens, self.batch_tokens);
        set!(s.batch_frames, self.batch_frames);
        set!(s.label_smoothing, self.label_smoothing);
        set!(s.eval_every, self.eval_every);
        set!(s.checkpoint_every, self.checkpoint_every);
        set!(s.keep_best, self.keep_best);
        set!(s.seed, self.seed);
        if self.clip_norm.is_some() {
            s.clip_norm = self.clip_norm;
        }
        if self.target_loss.is_some() {
            s.target_loss = self.target_loss;
        }
        if self.spec_augment {
            s.spec_augment = true;
        }
    }
}

/// Flag > config file > preset > built-in default.
pub fn resolve(
    file: Option<&Path>,
    model_flags: &ModelFlags,
    schedule_flags: &ScheduleFlags,
) -> Result<RunConfig, String> {
    let mut cfg = match model_flags.preset {
        Some(Preset::LargeAsr) => RunConfig {
            model: ModelConfig::large_asr(),
            schedule: TrainSchedule::large(),
        },
        Some(Preset::LargeSlt) => RunConfig {
            model: ModelConfig::large_slt(),
            schedule: TrainSchedule::large(),
        },
        Some(Preset::Desk) | None => RunConfig::default(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
        let mut base = serde_json::to_value(&cfg).expect("config serializes");
        let overlay: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| format!("--config {}: {e}", path.display()))?;
        merge(&mut base, overlay);
        cfg = serde_json::from_value(base).map_err(|e| format!("--config {}: {e}", path.display()))?;
    }
    model_flags.apply(&mut cfg.model);
    schedule_flags.apply(&mut cfg.schedule);
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flag_beats_file_beats_default() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"{{"model": {{"d_model": 128, "heads": 8}}, "schedule": {{"warmup_steps": 77}}}}"#
        )
        .unwrap();
        let flags = ModelFlags {
            d_model: Some(256),
            ..ModelFlags::default()
        };
        let cfg = resolve(Some(f.path()), &flags, &ScheduleFlags::default()).unwrap();
        assert_eq!(cfg.model.d_model, 256);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.enc_layers, ModelConfig::default().enc_layers);
        assert_eq!(cfg.schedule.warmup_steps, 77);
    }

    #[test]
    fn file_overlays_preset() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"model": {{"enc_layers": 4}}}}"#).unwrap();
        let flags = ModelFlags {
            preset: Some(Preset::LargeAsr),
            ..ModelFlags::default()
        };
        let cfg = resolve(Some(f.path()), &flags, &ScheduleFlags::default()).unwrap();
        assert_eq!(cfg.model.enc_layers, 4);
        assert_eq!(cfg.model.d_model, 512);
        assert_eq!(cfg.schedule.warmup_steps, 4096);
    }
}
