use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, StageKind, StrategyKind};
use super::data::Sample;
use crate::decoder_mim::{decode, init_decoder, mim_loss, total_pretrain_loss};
use crate::embedding::{add_positional, patch_embed, register_positional, Modality};
use crate::encoder::{encode, encode_single, init_encoder, EncodedPair};
use crate::error::{Error, Result};
use crate::masking::apply_mask;
use crate::numerics::{Init, OptimizerState, ParamStore, Session, Tensor, Var};
use crate::tm_fusion::{init_tm, tm_fuse};

/// What the parameter set has to cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub model: ModelConfig,
    pub optical_channels: usize,
    pub sar_channels: usize,
    pub strategy: StrategyKind,
    pub tm_enabled: bool,
}

impl Arch {
    pub fn channels(&self, m: Modality) -> usize {
        match m {
            Modality::Optical => self.optical_channels,
            Modality::Sar => self.sar_channels,
        }
    }

    pub fn patch_values(&self, m: Modality) -> usize {
        let p = self.model.encoder.patch_size;
        self.channels(m) * p * p
    }

    pub fn modalities(&self) -> &'static [Modality] {
        self.strategy.modalities()
    }
}

/// Parameters plus everything needed to resume or inspect a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub params: ParamStore,
    /// Last completed stage, `None` for a fresh model.
    pub stage: Option<StageKind>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
}

pub fn init_params(arch: &Arch, seed: u64) -> Result<ParamStore> {
    arch.model.validate("model")?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let d = arch.model.encoder.embed_dim;
    for &m in arch.modalities() {
        init.linear(&format!("embed.{}", m.name()), arch.patch_values(m), d)?;
    }
    register_positional(&mut init, arch.model.pos_embed, arch.model.tokens(), d)?;
    init_encoder(&mut init, &arch.model.encoder)?;
    if arch.tm_enabled {
        init_tm(&mut init, &arch.model.tm, d)?;
    }
    for &m in arch.modalities() {
        init_decoder(&mut init, &arch.model.decoder, m, d, arch.patch_values(m))?;
    }
    Ok(store)
}

impl ModelState {
    pub fn fresh(arch: Arch, seed: u64) -> Result<Self> {
        if arch.tm_enabled && !arch.strategy.uses_tm() {
            return Err(Error::Invalid(format!("strategy {} has no fusion block", arch.strategy.name())));
        }
        let params = init_params(&arch, seed)?;
        Ok(ModelState { arch, params, stage: None, optimizer: None, step: 0 })
    }

    /// Fresh parameters for `arch` with every same-named tensor copied from
    /// `self`. Shape conflicts are reported together and nothing is copied.
    pub fn warm_start(&self, arch: Arch, seed: u64) -> Result<Self> {
        let mut next = ModelState::fresh(arch, seed)?;
        let mismatched: Vec<String> = self
            .params
            .iter()
            .filter_map(|(name, t)| match next.params.get(name) {
                Some(n) if n.shape() != t.shape() => {
                    Some(format!("{name}: have {:?}, need {:?}", t.shape(), n.shape()))
                }
                _ => None,
            })
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Mismatch(mismatched));
        }
        for (name, t) in self.params.iter() {
            if let Some(slot) = next.params.get_mut(name) {
                *slot = t.clone();
            }
        }
        next.stage = self.stage;
        next.step = self.step;
        Ok(next)
    }
}

/// Loss terms of one sample, each summed over seasons.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub optical: Var,
    pub sar: Option<Var>,
}

/// Encoder features per season: optical first, SAR second when present.
pub type SeasonFeatures = Vec<(Var, Option<Var>)>;

/// Embedding, masking, and encoding of every season of a sample.
pub fn encode_sample(s: &mut Session, arch: &Arch, sample: &Sample) -> Result<SeasonFeatures> {
    let model = &arch.model;
    let patch = model.encoder.patch_size;
    let mut out = Vec::with_capacity(sample.seasons());
    for t in 0..sample.seasons() {
        let visible = |m: Modality, s: &mut Session| -> Result<Var> {
            let raster = sample.raster(m, t);
            let tokens = patch_embed(s, raster, patch, m, t)?;
            let tokens = add_positional(s, tokens, model.pos_embed)?;
            Ok(apply_mask(&mut s.tape, &tokens, &sample.plan, t)?.0)
        };
        let vis_o = visible(Modality::Optical, s)?;
        if !arch.strategy.uses_sar() {
            out.push((encode_single(s, &model.encoder, vis_o)?, None));
            continue;
        }
        let vis_r = visible(Modality::Sar, s)?;
        if arch.strategy.siamese() {
            let f_o = encode_single(s, &model.encoder, vis_o)?;
            let f_r = encode_single(s, &model.encoder, vis_r)?;
            out.push((f_o, Some(f_r)));
        } else {
            let pair = encode(s, &model.encoder, vis_o, vis_r, t)?;
            out.push((pair.f_o, Some(pair.f_r)));
        }
    }
    Ok(out)
}

/// Target patches of the masked slots, ascending by index.
pub fn masked_targets(arch: &Arch, sample: &Sample, m: Modality, t: usize) -> Result<Tensor> {
    let patches = crate::embedding::patchify(sample.raster(m, t), arch.model.encoder.patch_size)?;
    let masked = sample.plan.masked(t)?;
    let w = patches.last_dim();
    let data = masked.iter().flat_map(|&i| patches.row(i).iter().copied()).collect();
    Tensor::matrix(masked.len(), w, data)
}

/// Full reconstruction objective of one sample.
pub fn sample_loss(s: &mut Session, arch: &Arch, sample: &Sample) -> Result<LossVars> {
    let features = encode_sample(s, arch, sample)?;
    let fused: SeasonFeatures = if arch.tm_enabled {
        let pairs: Vec<EncodedPair> = features
            .iter()
            .enumerate()
            .map(|(t, &(f_o, f_r))| EncodedPair { f_o, f_r: f_r.expect("fusion needs both modalities"), season: t })
            .collect();
        tm_fuse(s, &arch.model.tm, &pairs)?.into_iter().map(|p| (p.h_o, Some(p.h_r))).collect()
    } else {
        features
    };
    let dec = &arch.model.decoder;
    let mut opt_terms = Vec::with_capacity(fused.len());
    let mut sar_terms = Vec::with_capacity(fused.len());
    for (t, &(h_o, h_r)) in fused.iter().enumerate() {
        let pred = decode(s, dec, Modality::Optical, h_o, &sample.plan, t)?;
        let target = masked_targets(arch, sample, Modality::Optical, t)?;
        opt_terms.push(mim_loss(&mut s.tape, pred, &target, dec.normalize_target)?);
        if let Some(h_r) = h_r {
            let pred = decode(s, dec, Modality::Sar, h_r, &sample.plan, t)?;
            let target = masked_targets(arch, sample, Modality::Sar, t)?;
            sar_terms.push(mim_loss(&mut s.tape, pred, &target, dec.normalize_target)?);
        }
    }
    let optical = total_pretrain_loss(&mut s.tape, &opt_terms)?;
    let sar = if sar_terms.is_empty() { None } else { Some(total_pretrain_loss(&mut s.tape, &sar_terms)?) };
    let total = match sar {
        Some(r) => s.tape.add(optical, r)?,
        None => optical,
    };
    Ok(LossVars { total, optical, sar })
}
