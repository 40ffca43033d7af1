//! Per-season crop window selection.
//!
//! Rates are linear side fractions of the full raster. A window cut at side
//! fraction `f` covers `ceil(f * side)` pixels along each axis, so any two
//! windows with `f > 0.5` must intersect on both axes.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    SameLocation,
    PartialOverlap,
    NoOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropStrategy {
    pub kind: CropKind,
    pub min_rate: f64,
    pub max_rate: f64,
}

impl CropStrategy {
    pub fn same_location() -> Self {
        CropStrategy { kind: CropKind::SameLocation, min_rate: 1.0, max_rate: 1.0 }
    }

    pub fn partial_overlap(min_rate: f64, max_rate: f64) -> Self {
        CropStrategy { kind: CropKind::PartialOverlap, min_rate, max_rate }
    }

    pub fn no_overlap() -> Self {
        CropStrategy { kind: CropKind::NoOverlap, min_rate: 1.0, max_rate: 1.0 }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.min_rate > 0.0 && self.min_rate <= 1.0) {
            return Err(Error::config(format!("{path}.min_rate"), "must lie in (0, 1]"));
        }
        if !(self.max_rate > 0.0 && self.max_rate <= 1.0) {
            return Err(Error::config(format!("{path}.max_rate"), "must lie in (0, 1]"));
        }
        if self.min_rate > self.max_rate {
            return Err(Error::config(format!("{path}.min_rate"), "must not exceed max_rate"));
        }
        Ok(())
    }
}

/// Pixel window for one season, shared by both modalities of that season.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub season: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn full(season: usize, height: usize, width: usize) -> Self {
        CropWindow { season, top: 0, left: 0, height, width }
    }

    pub fn intersection_area(&self, other: &CropWindow) -> usize {
        let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| a1.min(b1).saturating_sub(a0.max(b0));
        overlap(self.top, self.top + self.height, other.top, other.top + other.height)
            * overlap(self.left, self.left + self.width, other.left, other.left + other.width)
    }
}

fn scaled_window(season: usize, full_h: usize, full_w: usize, frac: f64, rng: &mut impl Rng) -> CropWindow {
    let height = ((frac * full_h as f64).ceil() as usize).clamp(1, full_h);
    let width = ((frac * full_w as f64).ceil() as usize).clamp(1, full_w);
    let top = rng.random_range(0..=full_h - height);
    let left = rng.random_range(0..=full_w - width);
    CropWindow { season, top, left, height, width }
}

fn side_fraction(strategy: &CropStrategy, rng: &mut impl Rng) -> f64 {
    if strategy.max_rate > strategy.min_rate {
        rng.random_range(strategy.min_rate..=strategy.max_rate)
    } else {
        strategy.min_rate
    }
}

/// One window per season over a `full_h x full_w` raster.
///
/// `crop_h x crop_w` is the resampled output size; `NoOverlap` places windows
/// of exactly that size on disjoint grid cells.
pub fn sample_crops(
    seasons: usize,
    full_h: usize,
    full_w: usize,
    strategy: &CropStrategy,
    crop_h: usize,
    crop_w: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CropWindow>> {
    strategy.validate("crop")?;
    if crop_h == 0 || crop_w == 0 || crop_h > full_h || crop_w > full_w {
        return Err(Error::Invalid(format!(
            "crop {crop_h}x{crop_w} does not fit raster {full_h}x{full_w}"
        )));
    }
    if seasons == 0 {
        return Err(Error::Invalid("at least one season is required".into()));
    }
    match strategy.kind {
        CropKind::SameLocation => {
            let frac = side_fraction(strategy, rng);
            let w = scaled_window(0, full_h, full_w, frac, rng);
            Ok((0..seasons).map(|season| CropWindow { season, ..w }).collect())
        }
        CropKind::PartialOverlap => Ok((0..seasons)
            .map(|season| {
                let frac = side_fraction(strategy, rng);
                scaled_window(season, full_h, full_w, frac, rng)
            })
            .collect()),
        CropKind::NoOverlap => {
            let (rows, cols) = (full_h / crop_h, full_w / crop_w);
            if rows * cols < seasons {
                return Err(Error::Invalid(format!(
                    "no-overlap cropping needs {seasons} disjoint {crop_h}x{crop_w} windows, \
                     a {full_h}x{full_w} raster holds {}",
                    rows * cols
                )));
            }
            let off_y = rng.random_range(0..=full_h - rows * crop_h);
            let off_x = rng.random_range(0..=full_w - cols * crop_w);
            let cells = index::sample(rng, rows * cols, seasons);
            Ok(cells
                .iter()
                .enumerate()
                .map(|(season, cell)| CropWindow {
                    season,
                    top: off_y + (cell / cols) * crop_h,
                    left: off_x + (cell % cols) * crop_w,
                    height: crop_h,
                    width: crop_w,
                })
                .collect())
        }
    }
}
