//! Token masking shared by both modalities within a season.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TokenSet;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Masked token indices per season. The same set applies to both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub len: usize,
    pub ratio: f64,
    /// Ascending masked indices, one set per season.
    pub masked: Vec<Vec<usize>>,
}

/// `round(ratio * len)` with halves rounded up.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64 + 0.5).floor() as usize
}

impl MaskPlan {
    /// A plan that hides nothing.
    pub fn empty(len: usize, seasons: usize) -> Self {
        MaskPlan { len, ratio: 0.0, masked: vec![Vec::new(); seasons] }
    }

    pub fn seasons(&self) -> usize {
        self.masked.len()
    }

    pub fn masked(&self, t: usize) -> Result<&[usize]> {
        self.masked
            .get(t)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("mask plan has no season {t}")))
    }

    /// Ascending visible indices of season `t`.
    pub fn visible(&self, t: usize) -> Result<Vec<usize>> {
        let masked = self.masked(t)?;
        let mut hidden = vec![false; self.len];
        for &i in masked {
            hidden[i] = true;
        }
        Ok((0..self.len).filter(|&i| !hidden[i]).collect())
    }

    pub fn visible_count(&self) -> usize {
        self.len - self.masked.first().map_or(0, Vec::len)
    }
}

/// Draws one mask set per season.
///
/// A single base seed is taken from `rng`; season `t` samples from ChaCha
/// stream `t` of that seed, so its mask does not depend on how many seasons
/// are requested.
pub fn make_mask_plan(len: usize, seasons: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("mask.ratio", "must lie in [0, 1)"));
    }
    let count = masked_count(len, ratio);
    if count >= len {
        return Err(Error::config(
            "mask.ratio",
            format!("masking {count} of {len} tokens leaves none visible"),
        ));
    }
    let base: u64 = rng.random();
    let masked = (0..seasons)
        .map(|t| {
            let mut stream = ChaCha8Rng::seed_from_u64(base);
            stream.set_stream(t as u64);
            let mut m = index::sample(&mut stream, len, count).into_vec();
            m.sort_unstable();
            m
        })
        .collect();
    Ok(MaskPlan { len, ratio, masked })
}

/// Visible rows of `tokens` in their original order, plus the masked indices.
pub fn apply_mask(tape: &mut Tape, tokens: &TokenSet, plan: &MaskPlan, t: usize) -> Result<(Var, Vec<usize>)> {
    let rows = tape.value(tokens.tokens).rows();
    if rows != plan.len {
        return Err(Error::Invalid(format!("mask plan covers {} tokens, token set has {rows}", plan.len)));
    }
    let masked = plan.masked(t)?;
    if let Some(&bad) = masked.iter().find(|&&i| i >= rows) {
        return Err(Error::Invalid(format!("masked index {bad} out of range for {rows} tokens")));
    }
    let visible = tape.gather_rows(tokens.tokens, &plan.visible(t)?)?;
    Ok((visible, masked.to_vec()))
}

/// Rebuilds the full `L x D` sequence: visible rows return to their slots and
/// every masked slot receives the `1 x D` placeholder row.
pub fn scatter(tape: &mut Tape, visible: Var, placeholder: Var, plan: &MaskPlan, t: usize) -> Result<Var> {
    let vis_idx = plan.visible(t)?;
    let n_vis = tape.value(visible).rows();
    if n_vis != vis_idx.len() {
        return Err(Error::Invalid(format!(
            "season {t} has {} visible slots, got {n_vis} rows",
            vis_idx.len()
        )));
    }
    let joined = tape.concat_rows(&[visible, placeholder])?;
    let mut index = vec![n_vis; plan.len];
    for (row, &slot) in vis_idx.iter().enumerate() {
        index[slot] = row;
    }
    tape.gather_rows(joined, &index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;
    use crate::numerics::Tensor;

    fn tokens(tape: &mut Tape, len: usize) -> TokenSet {
        let v = tape.constant(Tensor::matrix(len, 2, (0..2 * len).map(|i| i as f64).collect()).unwrap()).unwrap();
        TokenSet { tokens: v, season: 0, modality: Modality::Optical, grid: (1, len) }
    }

    #[test]
    fn default_ratio_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = make_mask_plan(16, 4, 0.75, &mut rng).unwrap();
        assert!(plan.masked.iter().all(|m| m.len() == 12));
        assert_eq!(plan.visible_count(), 4);
    }

    #[test]
    fn zero_ratio_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = make_mask_plan(16, 3, 0.0, &mut rng).unwrap();
        assert!(plan.masked.iter().all(Vec::is_empty));
    }

    #[test]
    fn nothing_visible_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(make_mask_plan(4, 1, 0.9, &mut rng).is_err());
        assert!(make_mask_plan(4, 1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(masked_count(10, 0.25), 3);
        assert_eq!(masked_count(16, 0.75), 12);
    }

    #[test]
    fn earlier_seasons_ignore_later_ones() {
        let a = make_mask_plan(16, 2, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_mask_plan(16, 4, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.masked[..], b.masked[..2]);
    }

    #[test]
    fn all_but_one_visible_row() {
        let mut tape = Tape::new();
        let ts = tokens(&mut tape, 5);
        let plan = MaskPlan { len: 5, ratio: 0.8, masked: vec![vec![0, 1, 2, 4]] };
        let (vis, idx) = apply_mask(&mut tape, &ts, &plan, 0).unwrap();
        assert_eq!(tape.value(vis).data(), &[6.0, 7.0]);
        assert_eq!(idx, vec![0, 1, 2, 4]);
    }

    #[test]
    fn scatter_restores_order() {
        let mut tape = Tape::new();
        let ts = tokens(&mut tape, 4);
        let plan = MaskPlan { len: 4, ratio: 0.5, masked: vec![vec![1, 2]] };
        let (vis, _) = apply_mask(&mut tape, &ts, &plan, 0).unwrap();
        let ph = tape.constant(Tensor::matrix(1, 2, vec![-1.0, -1.0]).unwrap()).unwrap();
        let full = scatter(&mut tape, vis, ph, &plan, 0).unwrap();
        assert_eq!(tape.value(full).data(), &[0.0, 1.0, -1.0, -1.0, -1.0, -1.0, 6.0, 7.0]);
    }
}
