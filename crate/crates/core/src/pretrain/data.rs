use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DataConfig;
use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::masking::{make_mask_plan, MaskPlan};
use crate::numerics::name_seed;
use crate::synthdata::{generate_scene, normalize, sample_crops, ChannelStats, CropStrategy, Raster, Scene};

/// Generator for a named random substream of a run.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(name_seed(seed, tag))
}

/// Generated scenes plus per-channel statistics over all of them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub optical_stats: ChannelStats,
    pub sar_stats: ChannelStats,
}

impl Dataset {
    /// Scenes for seeds `first_seed .. first_seed + num_scenes`.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate("data")?;
        let seeds = (0..cfg.num_scenes as u64).map(|i| cfg.first_seed + i);
        let scenes = seeds.map(|s| generate_scene(s, &cfg.scene)).collect::<Result<Vec<_>>>()?;
        Self::from_scenes(scenes)
    }

    pub fn from_scenes(scenes: Vec<Scene>) -> Result<Self> {
        let optical_stats = ChannelStats::from_rasters(scenes.iter().flat_map(|s| &s.optical))?;
        let sar_stats = ChannelStats::from_rasters(scenes.iter().flat_map(|s| &s.sar))?;
        Ok(Dataset { scenes, optical_stats, sar_stats })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn stats(&self, m: Modality) -> &ChannelStats {
        match m {
            Modality::Optical => &self.optical_stats,
            Modality::Sar => &self.sar_stats,
        }
    }
}

/// Network-ready views of one scene: per season, a cropped, resampled,
/// normalized, possibly flipped raster per modality, plus the mask plan.
#[derive(Clone, Debug)]
pub struct Sample {
    pub optical: Vec<Raster>,
    pub sar: Vec<Raster>,
    pub plan: MaskPlan,
    pub scene_seed: u64,
}

impl Sample {
    pub fn seasons(&self) -> usize {
        self.optical.len()
    }

    pub fn raster(&self, m: Modality, t: usize) -> &Raster {
        match m {
            Modality::Optical => &self.optical[t],
            Modality::Sar => &self.sar[t],
        }
    }
}

/// Draw order is fixed: crop windows, then one flip bit per season, then the
/// mask plan. Both modalities are always prepared so the draws never depend
/// on the strategy.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample(
    data: &Dataset,
    index: usize,
    seasons: usize,
    crop: &CropStrategy,
    crop_size: usize,
    patch: usize,
    mask_ratio: f64,
    flip: bool,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let scene = data
        .scenes
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("scene index {index} out of range")))?;
    if seasons == 0 || seasons > scene.seasons() {
        return Err(Error::Invalid(format!("scene has {} seasons, {seasons} requested", scene.seasons())));
    }
    let windows = sample_crops(seasons, scene.height(), scene.width(), crop, crop_size, crop_size, rng)?;
    let flips: Vec<bool> = (0..seasons).map(|_| flip && rng.random::<bool>()).collect();
    let mut views = [Vec::with_capacity(seasons), Vec::with_capacity(seasons)];
    for (t, w) in windows.iter().enumerate() {
        for (k, m) in Modality::BOTH.into_iter().enumerate() {
            let source = match m {
                Modality::Optical => &scene.optical[t],
                Modality::Sar => &scene.sar[t],
            };
            let view = normalize(&source.crop_resample(w, crop_size, crop_size)?, data.stats(m))?;
            views[k].push(if flips[t] { view.flip_horizontal() } else { view });
        }
    }
    let grid = crop_size / patch;
    let plan = make_mask_plan(grid * grid, seasons, mask_ratio, rng)?;
    let [optical, sar] = views;
    Ok(Sample { optical, sar, plan, scene_seed: scene.seed })
}

/// Un-masked full view of every season, for feature extraction.
pub fn full_view(data: &Dataset, index: usize, seasons: usize, crop_size: usize, patch: usize) -> Result<Sample> {
    let scene = data
        .scenes
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("scene index {index} out of range")))?;
    if seasons == 0 || seasons > scene.seasons() {
        return Err(Error::Invalid(format!("scene has {} seasons, {seasons} requested", scene.seasons())));
    }
    let mut views = [Vec::with_capacity(seasons), Vec::with_capacity(seasons)];
    for t in 0..seasons {
        for (k, m) in Modality::BOTH.into_iter().enumerate() {
            let source = match m {
                Modality::Optical => &scene.optical[t],
                Modality::Sar => &scene.sar[t],
            };
            let window = crate::synthdata::CropWindow::full(t, source.height, source.width);
            views[k].push(normalize(&source.crop_resample(&window, crop_size, crop_size)?, data.stats(m))?);
        }
    }
    let [optical, sar] = views;
    let grid = crop_size / patch;
    Ok(Sample { optical, sar, plan: MaskPlan::empty(grid * grid, seasons), scene_seed: scene.seed })
}
