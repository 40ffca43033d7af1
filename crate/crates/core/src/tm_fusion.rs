//! Temporal-multimodal fusion over per-season encoder features.
//!
//! Season 0 mixes the two modalities with one cross-attention per direction.
//! Every later season also looks one season back at the same modality,
//! either by merging both query sources through a linear combiner (`Fuse`)
//! or by a second, separate cross-attention (`Decouple`).

use serde::{Deserialize, Serialize};

use crate::encoder::{attention, init_attention, linear, EncodedPair};
use crate::error::{Error, Result};
use crate::numerics::{Init, Session, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmVariant {
    Fuse,
    Decouple,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmConfig {
    pub variant: TmVariant,
    pub decouple_combine: Combine,
    pub heads: usize,
    /// Number of stacked fusion blocks.
    pub depth: usize,
}

impl Default for TmConfig {
    fn default() -> Self {
        TmConfig { variant: TmVariant::Fuse, decouple_combine: Combine::Mean, heads: 4, depth: 1 }
    }
}

impl TmConfig {
    pub fn disabled() -> Self {
        TmConfig { variant: TmVariant::Disabled, ..TmConfig::default() }
    }

    pub fn validate(&self, path: &str, dim: usize) -> Result<()> {
        if self.variant != TmVariant::Disabled {
            if self.heads == 0 || !dim.is_multiple_of(self.heads) {
                return Err(Error::config(format!("{path}.heads"), format!("must divide embed_dim {dim}")));
            }
            if self.depth == 0 {
                return Err(Error::config(format!("{path}.depth"), "must be positive unless the block is disabled"));
            }
        }
        Ok(())
    }
}

pub const TM_PREFIX: &str = "tm";

/// Fused features of one season.
#[derive(Clone, Copy, Debug)]
pub struct FusedPair {
    pub h_o: Var,
    pub h_r: Var,
}

pub fn init_tm(init: &mut Init, cfg: &TmConfig, dim: usize) -> Result<()> {
    if cfg.variant == TmVariant::Disabled {
        return Ok(());
    }
    for k in 0..cfg.depth {
        init_attention(init, &format!("{TM_PREFIX}.{k}.ca"), dim)?;
        match cfg.variant {
            TmVariant::Fuse => init.linear(&format!("{TM_PREFIX}.{k}.combine"), 2 * dim, dim)?,
            TmVariant::Decouple => init_attention(init, &format!("{TM_PREFIX}.{k}.ca_temporal"), dim)?,
            TmVariant::Disabled => unreachable!(),
        }
    }
    Ok(())
}

/// `CA(query, [key, value] = kv)`: output has one row per query row.
pub fn cross_attention(s: &mut Session, name: &str, query: Var, kv: Var, heads: usize) -> Result<Var> {
    attention(s, name, query, kv, heads)
}

fn fuse_layer(s: &mut Session, cfg: &TmConfig, k: usize, input: &[FusedPair]) -> Result<Vec<FusedPair>> {
    let ca = format!("{TM_PREFIX}.{k}.ca");
    let mut out = Vec::with_capacity(input.len());
    for (t, cur) in input.iter().enumerate() {
        let (h_o, h_r) = if t == 0 {
            (
                cross_attention(s, &ca, cur.h_r, cur.h_o, cfg.heads)?,
                cross_attention(s, &ca, cur.h_o, cur.h_r, cfg.heads)?,
            )
        } else {
            let prev = input[t - 1];
            match cfg.variant {
                TmVariant::Fuse => {
                    let comb = format!("{TM_PREFIX}.{k}.combine");
                    let pair_o = s.tape.concat_cols(&[cur.h_r, prev.h_o])?;
                    let q_o = linear(s, &comb, pair_o)?;
                    let pair_r = s.tape.concat_cols(&[cur.h_o, prev.h_r])?;
                    let q_r = linear(s, &comb, pair_r)?;
                    (
                        cross_attention(s, &ca, q_o, cur.h_o, cfg.heads)?,
                        cross_attention(s, &ca, q_r, cur.h_r, cfg.heads)?,
                    )
                }
                TmVariant::Decouple => {
                    let cat = format!("{TM_PREFIX}.{k}.ca_temporal");
                    let mut side = |q_modal: Var, q_temporal: Var, kv: Var| -> Result<Var> {
                        let a = cross_attention(s, &ca, q_modal, kv, cfg.heads)?;
                        let b = cross_attention(s, &cat, q_temporal, kv, cfg.heads)?;
                        let sum = s.tape.add(a, b)?;
                        match cfg.decouple_combine {
                            Combine::Sum => Ok(sum),
                            Combine::Mean => s.tape.scale(sum, 0.5),
                        }
                    };
                    (side(cur.h_r, prev.h_o, cur.h_o)?, side(cur.h_o, prev.h_r, cur.h_r)?)
                }
                TmVariant::Disabled => unreachable!(),
            }
        };
        out.push(FusedPair { h_o, h_r });
    }
    Ok(out)
}

/// Fuses a season sequence; the disabled variant passes features through.
pub fn tm_fuse(s: &mut Session, cfg: &TmConfig, features: &[EncodedPair]) -> Result<Vec<FusedPair>> {
    if features.is_empty() {
        return Err(Error::Invalid("fusion needs at least one season".into()));
    }
    let width = s.tape.value(features[0].f_o).last_dim();
    for f in features {
        for v in [f.f_o, f.f_r] {
            let w = s.tape.value(v).last_dim();
            if w != width {
                return Err(Error::shape("tm_fuse", format!("feature widths {width} and {w}")));
            }
        }
    }
    let mut cur: Vec<FusedPair> = features.iter().map(|f| FusedPair { h_o: f.f_o, h_r: f.f_r }).collect();
    if cfg.variant == TmVariant::Disabled {
        return Ok(cur);
    }
    for k in 0..cfg.depth {
        cur = fuse_layer(s, cfg, k, &cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tensor, Trainable};

    #[test]
    fn disabled_registers_nothing() {
        let mut store = ParamStore::new();
        init_tm(&mut Init::new(&mut store, 0), &TmConfig::disabled(), 16).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn shapes_preserved() {
        let mut store = ParamStore::new();
        let cfg = TmConfig { heads: 2, ..TmConfig::default() };
        init_tm(&mut Init::new(&mut store, 1), &cfg, 8).unwrap();
        let mut s = Session::new(&store, Trainable::Nothing);
        let feats: Vec<EncodedPair> = (0..3)
            .map(|t| EncodedPair {
                f_o: s.constant(Tensor::full(&[5, 8], t as f64)).unwrap(),
                f_r: s.constant(Tensor::full(&[5, 8], -(t as f64))).unwrap(),
                season: t,
            })
            .collect();
        let out = tm_fuse(&mut s, &cfg, &feats).unwrap();
        assert_eq!(out.len(), 3);
        for p in out {
            assert_eq!(s.tape.value(p.h_o).shape(), &[5, 8]);
            assert_eq!(s.tape.value(p.h_r).shape(), &[5, 8]);
        }
        assert!(tm_fuse(&mut s, &cfg, &[]).is_err());
    }
}
