use super::{Ctx, DecoderLayerIds, EncoderLayerIds};
use crate::attention::{attend_incremental, attend_var, AttentionMask, KvCache, WeightDropout};
use crate::error::Result;
use crate::position::SinusoidalTable;
use crate::tensor::Var;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerDecision {
    /// Run the layer, multiplying each sub-layer output by `scale`.
    Keep { scale: f64 },
    /// Skip the layer entirely (identity).
    Drop,
}

/// Drop probability of layer `l` (1-based) out of `total`.
pub fn layer_drop_probability(l: usize, total: usize, p_max: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    p_max * l as f64 / total as f64
}

/// Training-time decision draws from `rng`; without one (inference) every
/// layer runs, scaled by its survival probability.
pub fn layer_drop_decision<R: Rng + ?Sized>(l: usize, total: usize, p_max: f64, rng: Option<&mut R>) -> LayerDecision {
    let p = layer_drop_probability(l, total, p_max);
    match rng {
        Some(_) if p <= 0.0 => LayerDecision::Keep { scale: 1.0 },
        Some(rng) => {
            if rng.random::<f64>() < p {
                LayerDecision::Drop
            } else {
                LayerDecision::Keep { scale: 1.0 }
            }
        }
        None => LayerDecision::Keep { scale: 1.0 - p },
    }
}

impl Ctx<'_, '_> {
    fn decide(&mut self, l: usize, total: usize) -> LayerDecision {
        let p_max = self.model.config.layer_drop;
        layer_drop_decision(l, total, p_max, self.rng.as_deref_mut())
    }

    /// `h + scale * dropout(sub)`.
    fn residual(&mut self, h: Var, sub: Var, scale: f64) -> Result<Var> {
        let sub = self.residual_dropout(sub)?;
        let sub = if scale == 1.0 { sub } else { self.g.scale(sub, scale) };
        self.g.add(h, sub)
    }

    fn attend(
        &mut self,
        x_q: Var,
        x_kv: Var,
        vars: &crate::attention::AttnVars,
        table: Option<&SinusoidalTable>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let p = self.model.config.attn_dropout;
        let mut dropout = match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => Some(WeightDropout { p, rng }),
            _ => None,
        };
        attend_var(&mut self.g, x_q, x_kv, vars, table, mask, dropout.as_mut())
    }

    pub(super) fn encoder_layer(
        &mut self,
        h: Var,
        ids: EncoderLayerIds,
        l: usize,
        total: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let LayerDecision::Keep { scale } = self.decide(l, total) else {
            return Ok(h);
        };
        let len = self.g.value(h).rows();
        let table = self.model.table_for(len)?;
        let a = self.norm(h, ids.ln1)?;
        let vars = self.attn_vars(ids.attn);
        let sa = self.attend(a, a, &vars, Some(&table), mask)?;
        let h = self.residual(h, sa, scale)?;
        let f = self.norm(h, ids.ln2)?;
        let f = self.ffn(f, ids.ffn)?;
        self.residual(h, f, scale)
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn decoder_layer(
        &mut self,
        h: Var,
        enc: Var,
        ids: DecoderLayerIds,
        l: usize,
        total: usize,
        causal: &AttentionMask,
        cross_mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let LayerDecision::Keep { scale } = self.decide(l, total) else {
            return Ok(h);
        };
        let len = self.g.value(h).rows();
        let table = self.model.table_for(len)?;
        let a = self.norm(h, ids.ln1)?;
        let vars = self.attn_vars(ids.self_attn);
        let sa = self.attend(a, a, &vars, Some(&table), Some(causal))?;
        let h = self.residual(h, sa, scale)?;
        let c = self.norm(h, ids.ln2)?;
        let vars = self.attn_vars(ids.cross_attn);
        let ca = self.attend(c, enc, &vars, None, cross_mask)?;
        let h = self.residual(h, ca, scale)?;
        let f = self.norm(h, ids.ln3)?;
        let f = self.ffn(f, ids.ffn)?;
        self.residual(h, f, scale)
    }

    /// One decoder layer for the newest position only, reusing `cache`.
    /// Inference only: no noise, every layer kept with its survival scale.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn decoder_layer_step(
        &mut self,
        h: Var,
        enc: Var,
        ids: DecoderLayerIds,
        l: usize,
        total: usize,
        table: &SinusoidalTable,
        cache: &mut KvCache,
    ) -> Result<Var> {
        let scale = 1.0 - layer_drop_probability(l, total, self.model.config.layer_drop);
        let a = self.norm(h, ids.ln1)?;
        let vars = self.attn_vars(ids.self_attn);
        let sa = attend_incremental(&mut self.g, a, &vars, Some(table), cache)?;
        let h = self.residual(h, sa, scale)?;
        let c = self.norm(h, ids.ln2)?;
        let vars = self.attn_vars(ids.cross_attn);
        let ca = attend_var(&mut self.g, c, enc, &vars, None, None, None)?;
        let h = self.residual(h, ca, scale)?;
        let f = self.norm(h, ids.ln3)?;
        let f = self.ffn(f, ids.ffn)?;
        self.residual(h, f, scale)
    }
}
