use serde::{Deserialize, Serialize};

use crate::decoder_mim::DecoderConfig;
use crate::embedding::{Modality, PosEmbedKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;
use crate::synthdata::{CropStrategy, SceneConfig};
use crate::tm_fusion::{TmConfig, TmVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Unimodal,
    Multimodal,
    Siamese,
    SiameseTemporal,
    UnimodalTemporal,
    MultimodalTemporal,
    MultimodalTemporalTm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Unimodal,
        StrategyKind::Multimodal,
        StrategyKind::Siamese,
        StrategyKind::SiameseTemporal,
        StrategyKind::UnimodalTemporal,
        StrategyKind::MultimodalTemporal,
        StrategyKind::MultimodalTemporalTm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Unimodal => "unimodal",
            StrategyKind::Multimodal => "multimodal",
            StrategyKind::Siamese => "siamese",
            StrategyKind::SiameseTemporal => "siamese_temporal",
            StrategyKind::UnimodalTemporal => "unimodal_temporal",
            StrategyKind::MultimodalTemporal => "multimodal_temporal",
            StrategyKind::MultimodalTemporalTm => "multimodal_temporal_tm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn temporal(self) -> bool {
        matches!(
            self,
            StrategyKind::SiameseTemporal
                | StrategyKind::UnimodalTemporal
                | StrategyKind::MultimodalTemporal
                | StrategyKind::MultimodalTemporalTm
        )
    }

    pub fn uses_sar(self) -> bool {
        !matches!(self, StrategyKind::Unimodal | StrategyKind::UnimodalTemporal)
    }

    /// Per-modality passes through a shared encoder instead of one joint sequence.
    pub fn siamese(self) -> bool {
        matches!(self, StrategyKind::Siamese | StrategyKind::SiameseTemporal)
    }

    pub fn uses_tm(self) -> bool {
        self == StrategyKind::MultimodalTemporalTm
    }

    pub fn modalities(self) -> &'static [Modality] {
        if self.uses_sar() {
            &Modality::BOTH
        } else {
            &[Modality::Optical]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    SingleTime,
    MultiTime,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::SingleTime => "single_time",
            StageKind::MultiTime => "multi_time",
        }
    }
}

/// Share of the scene range used by the single-time stage.
pub const SINGLE_TIME_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub num_scenes: usize,
    pub first_seed: u64,
    pub crop: CropStrategy,
    pub flip: bool,
}

impl DataConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.scene.validate(&format!("{path}.scene"))?;
        if self.num_scenes == 0 {
            return Err(Error::config(format!("{path}.num_scenes"), "must be positive"));
        }
        self.crop.validate(&format!("{path}.crop"))
    }
}

/// Architecture shared by every stage and strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the resampled square view fed to the network.
    pub crop_size: usize,
    pub encoder: EncoderConfig,
    pub pos_embed: PosEmbedKind,
    pub decoder: DecoderConfig,
    pub tm: TmConfig,
}

impl ModelConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.encoder.validate(&format!("{path}.encoder"))?;
        let p = self.encoder.patch_size;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(p) {
            return Err(Error::config(format!("{path}.crop_size"), format!("must be a positive multiple of patch size {p}")));
        }
        if self.pos_embed == PosEmbedKind::Sinusoidal && !self.encoder.embed_dim.is_multiple_of(2) {
            return Err(Error::config(format!("{path}.encoder.embed_dim"), "must be even for sinusoidal embeddings"));
        }
        self.decoder.validate(&format!("{path}.decoder"))?;
        self.tm.validate(&format!("{path}.tm"), self.encoder.embed_dim)
    }

    pub fn tokens(&self) -> usize {
        let g = self.crop_size / self.encoder.patch_size;
        g * g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Share of each stage's steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Run the single-time stage first and warm-start the multi-time stage from it.
    pub progressive: bool,
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("{path}.mask_ratio"), "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("{path}.warmup_fraction"), "must lie in [0, 1)"));
        }
        self.optimizer.validate(&format!("{path}.optimizer"))
    }
}

/// Everything a pretraining run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate("data")?;
        self.model.validate("model")?;
        self.train.validate("train")?;
        let full = self.data.scene.height.min(self.data.scene.width);
        if self.model.crop_size > full {
            return Err(Error::config("model.crop_size", format!("exceeds the {full}-pixel scene side")));
        }
        if self.train.strategy.uses_tm() && self.model.tm.variant == TmVariant::Disabled {
            return Err(Error::config("model.tm.variant", "the temporal TM strategy needs an enabled fusion block"));
        }
        let masked = crate::masking::masked_count(self.model.tokens(), self.train.mask_ratio);
        if masked == 0 || masked >= self.model.tokens() {
            return Err(Error::config(
                "train.mask_ratio",
                format!("masks {masked} of {} tokens; need at least one masked and one visible", self.model.tokens()),
            ));
        }
        Ok(())
    }

    /// Seasons seen by the multi-time stage.
    pub fn multi_time_seasons(&self) -> usize {
        if self.train.strategy.temporal() {
            self.data.scene.seasons
        } else {
            1
        }
    }

    pub fn stage_config(&self, stage: StageKind) -> StageConfig {
        let (data_fraction, epochs, t_effective, tm_enabled) = match stage {
            StageKind::SingleTime => (SINGLE_TIME_FRACTION, self.train.stage1_epochs, 1, false),
            StageKind::MultiTime => (1.0, self.train.stage2_epochs, self.multi_time_seasons(), self.train.strategy.uses_tm()),
        };
        StageConfig {
            stage,
            strategy: self.train.strategy,
            data_fraction,
            epochs,
            t_effective,
            tm_enabled,
            batch_size: self.train.batch_size,
            mask_ratio: self.train.mask_ratio,
            crop: self.data.crop,
            flip: self.data.flip,
            optimizer: self.train.optimizer.clone(),
            warmup_fraction: self.train.warmup_fraction,
            seed: self.seed,
            timing: false,
        }
    }
}

/// One training stage, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageKind,
    pub strategy: StrategyKind,
    pub data_fraction: f64,
    pub epochs: usize,
    pub t_effective: usize,
    pub tm_enabled: bool,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub crop: CropStrategy,
    pub flip: bool,
    pub optimizer: AdamWConfig,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Record wall time per step in the metrics log.
    pub timing: bool,
}

impl StageConfig {
    pub fn validate(&self, scene_seasons: usize) -> Result<()> {
        let path = format!("stage.{}", self.stage.name());
        match self.stage {
            StageKind::SingleTime => {
                if self.t_effective != 1 {
                    return Err(Error::config(format!("{path}.t_effective"), "single-time stage uses exactly one season"));
                }
                if self.tm_enabled {
                    return Err(Error::config(format!("{path}.tm_enabled"), "single-time stage runs without fusion"));
                }
                if self.data_fraction != SINGLE_TIME_FRACTION {
                    return Err(Error::config(format!("{path}.data_fraction"), "single-time stage uses a quarter of the data"));
                }
            }
            StageKind::MultiTime => {
                if self.data_fraction != 1.0 {
                    return Err(Error::config(format!("{path}.data_fraction"), "multi-time stage uses the full data"));
                }
                if self.tm_enabled != self.strategy.uses_tm() {
                    return Err(Error::config(format!("{path}.tm_enabled"), "fusion is enabled exactly for the TM strategy"));
                }
                if !self.strategy.temporal() && self.t_effective != 1 {
                    return Err(Error::config(format!("{path}.t_effective"), "non-temporal strategies use one season"));
                }
            }
        }
        if self.t_effective == 0 || self.t_effective > scene_seasons {
            return Err(Error::config(
                format!("{path}.t_effective"),
                format!("must lie in 1..={scene_seasons}"),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("{path}.mask_ratio"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("{path}.warmup_fraction"), "must lie in [0, 1)"));
        }
        self.crop.validate(&format!("{path}.crop"))?;
        self.optimizer.validate(&format!("{path}.optimizer"))
    }
}
