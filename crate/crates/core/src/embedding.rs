//! Patch tokenization and positional encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Init, Session, Tensor, Var};
use crate::synthdata::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Optical, Modality::Sar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedKind {
    Sinusoidal,
    Learnable,
}

/// Name of the shared learnable positional table.
pub const POS_PARAM: &str = "embed.pos";

pub fn weight_name(m: Modality) -> String {
    format!("embed.{}.weight", m.name())
}

pub fn bias_name(m: Modality) -> String {
    format!("embed.{}.bias", m.name())
}

/// `L x D` tokens of one modality at one season.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub season: usize,
    pub modality: Modality,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn patch_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Invalid(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch, width / patch))
}

/// Flattens a `C x h x w` raster into `L x (C*p*p)` rows, row-major over the
/// patch grid; each row is ordered by channel, then pixel row, then column.
pub fn patchify(raster: &Raster, patch: usize) -> Result<Tensor> {
    let (rows, cols) = patch_grid(raster.height, raster.width, patch)?;
    let width = raster.channels * patch * patch;
    let mut data = Vec::with_capacity(rows * cols * width);
    for pr in 0..rows {
        for pc in 0..cols {
            for c in 0..raster.channels {
                for y in 0..patch {
                    let start = (c * raster.height + pr * patch + y) * raster.width + pc * patch;
                    data.extend_from_slice(&raster.data[start..start + patch]);
                }
            }
        }
    }
    Tensor::matrix(rows * cols, width, data)
}

/// Linear patch projection with the modality's own weights.
pub fn patch_embed(
    session: &mut Session,
    raster: &Raster,
    patch: usize,
    modality: Modality,
    season: usize,
) -> Result<TokenSet> {
    let grid = patch_grid(raster.height, raster.width, patch)?;
    let patches = session.constant(patchify(raster, patch)?)?;
    let w = session.param(&weight_name(modality))?;
    let b = session.param(&bias_name(modality))?;
    let expected = session.tape.value(w).shape()[0];
    if expected != raster.channels * patch * patch {
        return Err(Error::shape(
            "patch_embed",
            format!("{} input needs {expected} values per patch, got {}", modality.name(), raster.channels * patch * patch),
        ));
    }
    let tokens = session.tape.linear(patches, w, b)?;
    Ok(TokenSet { tokens, season, modality, grid })
}

/// Fixed 1-D table: `pe[p, 2i] = sin(p / 10000^(2i/D))`, `pe[p, 2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("sinusoidal positional embedding needs an even width, got {dim}")));
    }
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::matrix(len, dim, data)
}

/// Registers the learnable table if needed; the sinusoidal kind adds nothing.
pub fn register_positional(init: &mut Init, kind: PosEmbedKind, len: usize, dim: usize) -> Result<()> {
    match kind {
        PosEmbedKind::Sinusoidal => sinusoidal_table(len, dim).map(|_| ()),
        PosEmbedKind::Learnable => init.normal(POS_PARAM, &[len, dim]),
    }
}

/// `L x D` positional term as a tape value.
pub fn positional_embedding(session: &mut Session, kind: PosEmbedKind, len: usize, dim: usize) -> Result<Var> {
    match kind {
        PosEmbedKind::Sinusoidal => session.constant(sinusoidal_table(len, dim)?),
        PosEmbedKind::Learnable => {
            let pos = session.param(POS_PARAM)?;
            let shape = session.tape.value(pos).shape().to_vec();
            if shape != [len, dim] {
                return Err(Error::shape("positional_embedding", format!("table is {shape:?}, need [{len}, {dim}]")));
            }
            Ok(pos)
        }
    }
}

/// Tokens with the positional term added.
pub fn add_positional(session: &mut Session, tokens: TokenSet, kind: PosEmbedKind) -> Result<TokenSet> {
    let dim = session.tape.value(tokens.tokens).last_dim();
    let pe = positional_embedding(session, kind, tokens.len(), dim)?;
    let out = session.tape.add(tokens.tokens, pe)?;
    Ok(TokenSet { tokens: out, ..tokens })
}
