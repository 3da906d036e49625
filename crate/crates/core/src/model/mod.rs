//! Encoder/decoder Transformer for feature-frame inputs.
//!
//! The encoder reads stacked and projected frames, the decoder is teacher-forced
//! on `[BOS, y_1 .. y_M]` and predicts `[y_1 .. y_M, EOS]`. The cross-attention
//! context is added to the decoder state through the residual stream before the
//! final normalization and the weight-tied output projection.

mod decode;
mod layers;
mod params;

pub use decode::{DecodeStrategy, Decoded};
pub use layers::{layer_drop_decision, layer_drop_probability, LayerDecision};
pub use params::{ParamId, ParamStore};

use crate::attention::{AttnVars, RelVars};
use crate::error::{config_err, Error, Result};
use crate::position::{absolute_encoding, relative_encoding, PositionMode, SinusoidalTable};
use crate::tensor::{Gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
/// Number of reserved ids; ordinary symbols start here.
pub const RESERVED: usize = 4;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    /// Variational dropout on every sub-layer output (one mask per sequence).
    pub residual_dropout: f64,
    /// Post-softmax dropout on attention weights.
    pub attn_dropout: f64,
    /// Probability of replacing a decoder input token by UNK.
    pub word_dropout: f64,
    /// Drop probability of the deepest layer; layer `l` of `L` uses `l/L` of it.
    pub layer_drop: f64,
    pub position_mode: PositionMode,
    pub input_dim: usize,
    pub frame_stack: usize,
    pub vocab_size: usize,
    /// Length the position tables are precomputed for.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 6,
            dec_layers: 3,
            ffn_dim: 256,
            residual_dropout: 0.1,
            attn_dropout: 0.1,
            word_dropout: 0.1,
            layer_drop: 0.0,
            position_mode: PositionMode::Relative,
            input_dim: 8,
            frame_stack: 1,
            vocab_size: 16,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    /// Speech recognition setup at full size.
    pub fn large_asr() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            enc_layers: 36,
            dec_layers: 12,
            ffn_dim: 2048,
            residual_dropout: 0.35,
            attn_dropout: 0.35,
            word_dropout: 0.1,
            layer_drop: 0.5,
            input_dim: 40,
            frame_stack: 4,
            vocab_size: 10_004,
            max_len: 2048,
            ..Self::default()
        }
    }

    /// Speech translation setup: as ASR with a shallower encoder.
    pub fn large_slt() -> Self {
        Self {
            enc_layers: 32,
            ..Self::large_asr()
        }
    }

    /// Deterministic configuration without any stochastic regularization.
    pub fn without_noise(mut self) -> Self {
        self.residual_dropout = 0.0;
        self.attn_dropout = 0.0;
        self.word_dropout = 0.0;
        self.layer_drop = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(config_err(format!("d_model must be even and >= 2, got {d}")));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(config_err(format!("d_model {d} not divisible by heads {}", self.heads)));
        }
        if self.ffn_dim < d {
            return Err(config_err(format!("ffn_dim {} < d_model {d}", self.ffn_dim)));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(config_err("need at least one encoder and one decoder layer"));
        }
        for (name, p) in [
            ("residual_dropout", self.residual_dropout),
            ("attn_dropout", self.attn_dropout),
            ("layer_drop", self.layer_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err(format!("{name} = {p} not in [0, 1)")));
            }
        }
        // no rescaling is involved, so replacing every input token is allowed
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(config_err(format!(
                "word_dropout = {} not in [0, 1]",
                self.word_dropout
            )));
        }
        if self.frame_stack == 0 {
            return Err(config_err("frame_stack must be >= 1"));
        }
        if self.input_dim == 0 || self.max_len == 0 {
            return Err(config_err("input_dim and max_len must be positive"));
        }
        if self.vocab_size <= RESERVED {
            return Err(config_err(format!(
                "vocab_size must exceed the {RESERVED} reserved ids"
            )));
        }
        Ok(())
    }

    /// Fields that must agree for encoder weights to be shared between models.
    pub fn encoder_signature(&self) -> (usize, usize, usize, usize, PositionMode, usize, usize) {
        (
            self.d_model,
            self.heads,
            self.enc_layers,
            self.ffn_dim,
            self.position_mode,
            self.input_dim,
            self.frame_stack,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    relative: Option<(ParamId, ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayerIds {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayerIds {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    proj_w: ParamId,
    proj_b: ParamId,
    encoder: Vec<EncoderLayerIds>,
    enc_norm: NormIds,
    embed: ParamId,
    decoder: Vec<DecoderLayerIds>,
    dec_norm: NormIds,
    table: SinusoidalTable,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.fill(format!("{prefix}.g"), &[d], 1.0),
            bias: self.fill(format!("{prefix}.b"), &[d], 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, relative: bool) -> AttnIds {
        let std = (1.0 / d as f64).sqrt();
        AttnIds {
            w_q: self.normal(format!("{prefix}.w_q"), &[d, d], std),
            w_k: self.normal(format!("{prefix}.w_k"), &[d, d], std),
            w_v: self.normal(format!("{prefix}.w_v"), &[d, d], std),
            w_o: self.normal(format!("{prefix}.w_o"), &[d, d], std),
            relative: relative.then(|| {
                (
                    self.normal(format!("{prefix}.w_r"), &[d, d], std),
                    self.normal(format!("{prefix}.u"), &[d], std),
                    self.normal(format!("{prefix}.v"), &[d], std),
                )
            }),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnIds {
        FfnIds {
            w1: self.normal(format!("{prefix}.w1"), &[d, hidden], (2.0 / d as f64).sqrt()),
            b1: self.fill(format!("{prefix}.b1"), &[hidden], 0.0),
            w2: self.normal(format!("{prefix}.w2"), &[hidden, d], (1.0 / hidden as f64).sqrt()),
            b2: self.fill(format!("{prefix}.b2"), &[d], 0.0),
        }
    }
}

/// One training or evaluation example. `features` may carry zero padding rows
/// beyond `frames`; the decoder side is padded to `target_pad` symbols.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub features: &'a Tensor,
    pub frames: usize,
    pub target: &'a [usize],
    pub target_pad: usize,
}

impl<'a> Sample<'a> {
    pub fn new(features: &'a Tensor, target: &'a [usize]) -> Self {
        Self {
            features,
            frames: features.rows(),
            target,
            target_pad: target.len(),
        }
    }

    /// Predicted positions: every symbol plus EOS.
    pub fn target_tokens(&self) -> usize {
        self.target.len() + 1
    }
}

/// Summed loss over a set of samples, with gradients when requested.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Option<Vec<Tensor>>,
}

impl Model {
    /// Fresh model. Encoder-side and decoder-side weights are drawn from two
    /// separate streams of the seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let relative = config.position_mode == PositionMode::Relative;
        let mut store = ParamStore::new();

        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
        enc_rng.set_stream(0);
        let mut init = Init {
            store: &mut store,
            rng: enc_rng,
        };
        let fan_in = config.input_dim * config.frame_stack;
        let proj_w = init.normal("frontend.w".into(), &[fan_in, d], (1.0 / fan_in as f64).sqrt());
        let proj_b = init.fill("frontend.b".into(), &[d], 0.0);
        let encoder = (0..config.enc_layers)
            .map(|l| EncoderLayerIds {
                ln1: init.norm(&format!("enc.{l}.ln1"), d),
                attn: init.attn(&format!("enc.{l}.attn"), d, relative),
                ln2: init.norm(&format!("enc.{l}.ln2"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_norm = init.norm("enc.ln", d);

        let mut dec_rng = ChaCha8Rng::seed_from_u64(seed);
        dec_rng.set_stream(1);
        init.rng = dec_rng;
        let embed = init.normal("dec.embed".into(), &[config.vocab_size, d], 0.5 / (d as f64).sqrt());
        let decoder = (0..config.dec_layers)
            .map(|l| DecoderLayerIds {
                ln1: init.norm(&format!("dec.{l}.ln1"), d),
                self_attn: init.attn(&format!("dec.{l}.self_attn"), d, relative),
                ln2: init.norm(&format!("dec.{l}.ln2"), d),
                cross_attn: init.attn(&format!("dec.{l}.cross_attn"), d, false),
                ln3: init.norm(&format!("dec.{l}.ln3"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec_norm = init.norm("dec.ln", d);

        let table = match config.position_mode {
            PositionMode::Absolute => absolute_encoding(config.max_len, d)?,
            PositionMode::Relative => relative_encoding(config.max_len, d)?,
        };
        Ok(Self {
            config,
            params: store,
            proj_w,
            proj_b,
            encoder,
            enc_norm,
            embed,
            decoder,
            dec_norm,
            table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether a parameter belongs to the decoder side (including the tied embedding).
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.")
    }

    /// Position table able to serve `len` positions; regrown beyond `max_len`.
    pub(crate) fn table_for(&self, len: usize) -> Result<Cow<'_, SinusoidalTable>> {
        if len <= self.table.max_len() {
            return Ok(Cow::Borrowed(&self.table));
        }
        let grown = match self.config.position_mode {
            PositionMode::Absolute => absolute_encoding(len, self.config.d_model)?,
            PositionMode::Relative => relative_encoding(len, self.config.d_model)?,
        };
        Ok(Cow::Owned(grown))
    }

    /// Number of encoder positions after frame stacking.
    pub fn encoder_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.frame_stack)
    }

    /// Stacks `frame_stack` consecutive frames (zero-filling the tail).
    pub fn stack_frames(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.config.input_dim;
        if x.rank() != 2 || x.cols() != f {
            return Err(Error::Shape {
                op: "speech_frontend",
                lhs: x.shape().to_vec(),
                rhs: vec![f],
            });
        }
        let s = self.config.frame_stack;
        let n = x.rows();
        let out_rows = n.div_ceil(s);
        let mut data = vec![0.0; out_rows * f * s];
        data[..n * f].copy_from_slice(x.data());
        Tensor::new(vec![out_rows, f * s], data)
    }

    /// Frontend output `[⌈N/s⌉×D]` without gradient tracking.
    pub fn speech_frontend(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval(self);
        let v = ctx.frontend(x)?;
        Ok(ctx.g.take(v))
    }

    /// Decoder logits `[len(y_in)×V]` for inputs starting with BOS, without noise.
    pub fn logits(&self, x: &Tensor, y_in: &[usize]) -> Result<Tensor> {
        let mut ctx = Ctx::eval(self);
        let enc = ctx.encode(x, x.rows())?;
        let out = ctx.decode_full(enc, y_in, None)?;
        Ok(ctx.g.take(out))
    }

    /// Teacher-forced logits for target symbols `y` (BOS prepended), optionally
    /// with training noise drawn from `rng`.
    pub fn forward_train(&self, x: &Tensor, y: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if y.is_empty() {
            return Err(Error::Input("empty target sequence".into()));
        }
        let mut ctx = Ctx::new(self, false, rng);
        let y_in: Vec<usize> = std::iter::once(BOS).chain(y.iter().copied()).collect();
        let enc = ctx.encode(x, x.rows())?;
        let out = ctx.decode_full(enc, &y_in, None)?;
        Ok(ctx.g.take(out))
    }

    /// Self-attention energies `[H×K×K]` of the first encoder layer.
    pub fn first_layer_energies(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval(self);
        let h = ctx.frontend(x)?;
        let ids = self.encoder[0];
        let a = ctx.norm(h, ids.ln1)?;
        let vars = ctx.attn_vars(ids.attn);
        let len = ctx.g.value(a).rows();
        let table = self.table_for(len)?;
        let heads = crate::attention::energies_var(&mut ctx.g, a, a, &vars, Some(&table))?;
        let mut data = Vec::with_capacity(heads.len() * len * len);
        for h in &heads {
            data.extend_from_slice(ctx.g.value(*h).data());
        }
        Tensor::new(vec![heads.len(), len, len], data)
    }

    /// Summed cross-entropy over `samples`; `rng` enables training noise,
    /// `with_grads` runs the backward pass.
    pub fn loss(
        &self,
        samples: &[Sample<'_>],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
        with_grads: bool,
    ) -> Result<LossOutput> {
        let mut ctx = Ctx::new(self, with_grads, rng);
        let mut total: Option<Var> = None;
        let mut tokens = 0;
        for s in samples {
            let l = ctx.sample_loss(s, smoothing)?;
            tokens += s.target_tokens();
            total = Some(match total {
                None => l,
                Some(t) => ctx.g.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Input("no samples".into()))?;
        let loss = ctx.g.value(total).data()[0];
        let grads = if with_grads {
            let g = ctx.g.backward(total)?;
            Some(ctx.param_grads(&g))
        } else {
            None
        };
        Ok(LossOutput { loss, tokens, grads })
    }
}

/// One forward pass over a model: the tape plus lazily bound parameters.
pub(crate) struct Ctx<'m, 'r> {
    model: &'m Model,
    pub(crate) g: Graph,
    bound: Vec<Option<Var>>,
    trainable: bool,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'m, 'r> Ctx<'m, 'r> {
    pub(crate) fn new(model: &'m Model, trainable: bool, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self {
            model,
            g: Graph::new(),
            bound: vec![None; model.params.len()],
            trainable,
            rng,
        }
    }

    pub(crate) fn eval(model: &'m Model) -> Self {
        Self::new(model, false, None)
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let t = self.model.params.get(id).clone();
        let v = if self.trainable {
            self.g.input(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id] = Some(v);
        v
    }

    fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.bound
            .iter()
            .enumerate()
            .map(|(id, v)| match v {
                Some(v) => grads.tensor(*v),
                None => Tensor::zeros(self.model.params.get(id).shape()),
            })
            .collect()
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        let (g, b) = (self.p(ids.gain), self.p(ids.bias));
        self.g.layer_norm(x, g, b, LN_EPS)
    }

    fn attn_vars(&mut self, ids: AttnIds) -> AttnVars {
        AttnVars {
            w_q: self.p(ids.w_q),
            w_k: self.p(ids.w_k),
            w_v: self.p(ids.w_v),
            w_o: self.p(ids.w_o),
            relative: ids.relative.map(|(w_r, u, v)| RelVars {
                w_r: self.p(w_r),
                u: self.p(u),
                v: self.p(v),
            }),
            heads: self.model.config.heads,
        }
    }

    fn ffn(&mut self, x: Var, ids: FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
        let h = self.g.matmul(x, w1)?;
        let h = self.g.add_row(h, b1)?;
        let h = self.g.relu(h);
        let o = self.g.matmul(h, w2)?;
        self.g.add_row(o, b2)
    }

    /// Variational dropout: one column mask shared by every row.
    fn residual_dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.residual_dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let d = self.g.value(x).cols();
                let keep: Vec<bool> = (0..d).map(|_| rng.random::<f64>() >= p).collect();
                self.g.dropout(x, &keep, p)
            }
            _ => Ok(x),
        }
    }

    fn frontend(&mut self, x: &Tensor) -> Result<Var> {
        let stacked = self.model.stack_frames(x)?;
        let len = stacked.rows();
        let xs = self.g.constant(stacked);
        let (w, b) = (self.model.proj_w, self.model.proj_b);
        let (w, b) = (self.p(w), self.p(b));
        let h = self.g.matmul(xs, w)?;
        let h = self.g.add_row(h, b)?;
        self.add_positions(h, len)
    }

    fn add_positions(&mut self, h: Var, len: usize) -> Result<Var> {
        if self.model.config.position_mode != PositionMode::Absolute {
            return Ok(h);
        }
        let table = self.model.table_for(len)?;
        let pos = self.g.constant(table.positions_for(len)?);
        self.g.add(h, pos)
    }

    /// Encoder states for `x` whose first `frames` rows are real.
    pub(crate) fn encode(&mut self, x: &Tensor, frames: usize) -> Result<Var> {
        if x.rows() == 0 || frames == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        let mut h = self.frontend(x)?;
        let len = self.g.value(h).rows();
        let valid = self.model.encoder_len(frames);
        let mask = (valid < len).then(|| crate::attention::AttentionMask::full(len, len).with_key_limit(valid));
        let layers = self.model.encoder.clone();
        let total = layers.len();
        for (l, ids) in layers.into_iter().enumerate() {
            h = self.encoder_layer(h, ids, l + 1, total, mask.as_ref())?;
        }
        self.norm(h, self.model.enc_norm)
    }

    /// Embedded decoder inputs (with word dropout while training).
    fn embed_inputs(&mut self, y_in: &[usize], offset: usize) -> Result<Var> {
        let cfg = &self.model.config;
        let v = cfg.vocab_size;
        if let Some(&bad) = y_in.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("token id {bad} >= vocabulary size {v}")));
        }
        let p_w = cfg.word_dropout;
        let ids: Vec<usize> = match self.rng.as_deref_mut() {
            Some(rng) if p_w > 0.0 => y_in
                .iter()
                .map(|&t| if rng.random::<f64>() < p_w { UNK } else { t })
                .collect(),
            _ => y_in.to_vec(),
        };
        let d = cfg.d_model;
        let embed = self.p(self.model.embed);
        let e = self.g.gather_rows(embed, &ids)?;
        let e = self.g.scale(e, (d as f64).sqrt());
        if self.model.config.position_mode != PositionMode::Absolute {
            return Ok(e);
        }
        let table = self.model.table_for(offset + y_in.len())?;
        let rows = table.positions_for(offset + y_in.len())?.slice_rows(offset, y_in.len());
        let pos = self.g.constant(rows);
        self.g.add(e, pos)
    }

    fn output_logits(&mut self, h: Var) -> Result<Var> {
        let h = self.norm(h, self.model.dec_norm)?;
        let embed = self.p(self.model.embed);
        self.g.matmul_t(h, embed)
    }

    /// Teacher-forced decoder over `y_in`; `enc_valid` limits the encoder keys.
    pub(crate) fn decode_full(&mut self, enc: Var, y_in: &[usize], enc_valid: Option<usize>) -> Result<Var> {
        if y_in.is_empty() {
            return Err(Error::Input("empty decoder input".into()));
        }
        let mut h = self.embed_inputs(y_in, 0)?;
        let m = y_in.len();
        let n = self.g.value(enc).rows();
        let causal = crate::attention::AttentionMask::causal(m);
        let cross = enc_valid
            .filter(|&v| v < n)
            .map(|v| crate::attention::AttentionMask::full(m, n).with_key_limit(v));
        let layers = self.model.decoder.clone();
        let total = layers.len();
        for (l, ids) in layers.into_iter().enumerate() {
            h = self.decoder_layer(h, enc, ids, l + 1, total, &causal, cross.as_ref())?;
        }
        self.output_logits(h)
    }

    fn sample_loss(&mut self, s: &Sample<'_>, smoothing: f64) -> Result<Var> {
        if s.target.is_empty() {
            return Err(Error::Input("empty target sequence".into()));
        }
        let enc = self.encode(s.features, s.frames)?;
        let pad = s.target_pad.max(s.target.len());
        let mut y_in = Vec::with_capacity(pad + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(s.target);
        y_in.resize(pad + 1, PAD);
        let mut targets: Vec<Option<usize>> = s.target.iter().map(|&t| Some(t)).collect();
        targets.push(Some(EOS));
        targets.resize(pad + 1, None);
        let valid = self.model.encoder_len(s.frames);
        let logits = self.decode_full(enc, &y_in, Some(valid))?;
        self.g.cross_entropy(logits, &targets, smoothing)
    }
}
