//! Per-modality reconstruction decoders and the masked-patch objective.

use serde::{Deserialize, Serialize};

use crate::embedding::{sinusoidal_table, Modality};
use crate::encoder::{block, init_block, layer_norm, linear};
use crate::error::{Error, Result};
use crate::masking::{scatter, MaskPlan};
use crate::numerics::{Init, Session, Tape, Tensor, Var};

pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub normalize_target: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { depth: 4, dim: 64, heads: 4, mlp_ratio: 4.0, normalize_target: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::config(format!("{path}.dim"), "must be positive and even"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("{path}.heads"), format!("must divide dim {}", self.dim)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config(format!("{path}.mlp_ratio"), "must be positive"));
        }
        Ok(())
    }
}

pub fn decoder_prefix(m: Modality) -> String {
    format!("decoder.{}", m.name())
}

/// One decoder for modality `m`, shared by every season.
pub fn init_decoder(
    init: &mut Init,
    cfg: &DecoderConfig,
    m: Modality,
    encoder_dim: usize,
    patch_values: usize,
) -> Result<()> {
    let p = decoder_prefix(m);
    init.linear(&format!("{p}.embed"), encoder_dim, cfg.dim)?;
    init.normal(&format!("{p}.mask_token"), &[cfg.dim])?;
    for i in 0..cfg.depth {
        init_block(init, &format!("{p}.blocks.{i}"), cfg.dim, cfg.mlp_ratio)?;
    }
    init.layer_norm(&format!("{p}.norm"), cfg.dim)?;
    init.linear(&format!("{p}.head"), cfg.dim, patch_values)
}

fn decode_trunk(s: &mut Session, cfg: &DecoderConfig, m: Modality, h: Var, plan: &MaskPlan, t: usize) -> Result<Var> {
    let p = decoder_prefix(m);
    let x = linear(s, &format!("{p}.embed"), h)?;
    let token = s.param(&format!("{p}.mask_token"))?;
    let token = s.tape.reshape(token, vec![1, cfg.dim])?;
    let full = scatter(&mut s.tape, x, token, plan, t)?;
    let pe = s.constant(sinusoidal_table(plan.len, cfg.dim)?)?;
    let mut x = s.tape.add(full, pe)?;
    for i in 0..cfg.depth {
        x = block(s, &format!("{p}.blocks.{i}"), x, cfg.heads)?;
    }
    Ok(x)
}

fn head(s: &mut Session, m: Modality, x: Var) -> Result<Var> {
    let p = decoder_prefix(m);
    let x = layer_norm(s, &format!("{p}.norm"), x)?;
    linear(s, &format!("{p}.head"), x)
}

/// Predicted patches for the masked slots of season `t`, ascending by index.
pub fn decode(s: &mut Session, cfg: &DecoderConfig, m: Modality, h: Var, plan: &MaskPlan, t: usize) -> Result<Var> {
    let masked = plan.masked(t)?.to_vec();
    if masked.is_empty() {
        return Err(Error::Invalid(format!("season {t} has no masked patches to reconstruct")));
    }
    let x = decode_trunk(s, cfg, m, h, plan, t)?;
    let x = s.tape.gather_rows(x, &masked)?;
    head(s, m, x)
}

/// Predictions for all `L` slots.
pub fn decode_full(s: &mut Session, cfg: &DecoderConfig, m: Modality, h: Var, plan: &MaskPlan, t: usize) -> Result<Var> {
    let x = decode_trunk(s, cfg, m, h, plan, t)?;
    head(s, m, x)
}

/// Standardizes each row by its own mean and population variance.
pub fn normalize_patches(target: &Tensor) -> Tensor {
    let mut out = target.clone();
    let w = target.last_dim();
    for row in out.data_mut().chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + TARGET_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Mean squared error between predicted and (optionally normalized) target patches.
pub fn mim_loss(tape: &mut Tape, pred: Var, target: &Tensor, normalize_target: bool) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != target.shape() {
        return Err(Error::shape("mim_loss", format!("prediction {shape:?}, target {:?}", target.shape())));
    }
    if shape.first() == Some(&0) || target.numel() == 0 {
        return Err(Error::Invalid("reconstruction loss needs at least one masked patch".into()));
    }
    let target = if normalize_target { normalize_patches(target) } else { target.clone() };
    let tgt = tape.constant(target)?;
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Loss over full-length predictions that reads only the masked rows.
pub fn mim_loss_at(
    tape: &mut Tape,
    pred_full: Var,
    target_full: &Tensor,
    masked: &[usize],
    normalize_target: bool,
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Invalid("reconstruction loss needs at least one masked patch".into()));
    }
    let rows = tape.value(pred_full).rows();
    if let Some(&bad) = masked.iter().find(|&&i| i >= rows || i >= target_full.rows()) {
        return Err(Error::Invalid(format!("masked index {bad} out of range")));
    }
    let pred = tape.gather_rows(pred_full, masked)?;
    let w = target_full.last_dim();
    let data = masked.iter().flat_map(|&i| target_full.row(i).iter().copied()).collect();
    mim_loss(tape, pred, &Tensor::matrix(masked.len(), w, data)?, normalize_target)
}

/// Unweighted sum of every season/modality term.
pub fn total_pretrain_loss(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Invalid("total loss needs at least one term".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_normalized_target() {
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let target = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = mim_loss(&mut tape, pred, &target, true).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_prediction_is_zero() {
        let mut tape = Tape::new();
        let target = Tensor::matrix(2, 3, vec![1.0, 5.0, 2.0, 0.0, -1.0, 4.0]).unwrap();
        let pred = tape.constant(normalize_patches(&target)).unwrap();
        let loss = mim_loss(&mut tape, pred, &target, true).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn empty_terms_rejected() {
        let mut tape = Tape::new();
        assert!(total_pretrain_loss(&mut tape, &[]).is_err());
        let pred = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(mim_loss_at(&mut tape, pred, &Tensor::zeros(&[2, 2]), &[], true).is_err());
    }
}
