use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder_mim::DecoderConfig;
use crate::downstream::ProbeConfig;
use crate::embedding::PosEmbedKind;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;
use crate::pretrain::{DataConfig, ModelConfig, PretrainConfig, StrategyKind, TrainConfig};
use crate::synthdata::{CropStrategy, SceneConfig};
use crate::tm_fusion::TmConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Complete run description as stored on disk and inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    pub fn config(self) -> RunConfig {
        match self {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }
}

impl RunConfig {
    /// Small geometry that trains in minutes on one core.
    pub fn desk() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig {
                scene: SceneConfig::default(),
                num_scenes: 256,
                first_seed: 0,
                crop: CropStrategy::partial_overlap(0.75, 1.0),
                flip: true,
            },
            model: ModelConfig {
                crop_size: 32,
                encoder: EncoderConfig::default(),
                pos_embed: PosEmbedKind::Sinusoidal,
                decoder: DecoderConfig::default(),
                tm: TmConfig::default(),
            },
            train: TrainConfig {
                strategy: StrategyKind::MultimodalTemporalTm,
                mask_ratio: 0.75,
                batch_size: 1,
                warmup_fraction: 0.1,
                optimizer: AdamWConfig { base_lr: 1e-3, ..AdamWConfig::default() },
                stage1_epochs: 2,
                stage2_epochs: 10,
                progressive: true,
            },
            probe: ProbeConfig { n_train: 64, n_test: 400, ..ProbeConfig::default() },
        }
    }

    /// Full-scale constants. Kept for reference and never trained here.
    pub fn paper() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig {
                scene: SceneConfig {
                    seasons: 4,
                    optical_channels: 12,
                    sar_channels: 2,
                    height: 264,
                    width: 264,
                    num_classes: 4,
                },
                num_scenes: 250_000,
                first_seed: 0,
                crop: CropStrategy::partial_overlap(0.75, 1.0),
                flip: true,
            },
            model: ModelConfig {
                crop_size: 128,
                encoder: EncoderConfig { depth: 12, heads: 12, embed_dim: 768, mlp_ratio: 4.0, patch_size: 16 },
                pos_embed: PosEmbedKind::Sinusoidal,
                decoder: DecoderConfig { depth: 4, dim: 768, heads: 12, mlp_ratio: 4.0, normalize_target: true },
                tm: TmConfig { heads: 12, ..TmConfig::default() },
            },
            train: TrainConfig {
                strategy: StrategyKind::MultimodalTemporalTm,
                mask_ratio: 0.75,
                batch_size: 2048,
                warmup_fraction: 0.0,
                optimizer: AdamWConfig::default(),
                stage1_epochs: 20,
                stage2_epochs: 200,
                progressive: true,
            },
            probe: ProbeConfig::default(),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig { seed: self.seed, data: self.data.clone(), model: self.model.clone(), train: self.train.clone() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("found {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.pretrain().validate()?;
        self.probe.validate("probe")
    }

    /// Parses and validates a JSON document. Errors carry the dotted path of
    /// the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::desk().with_seed(11);
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn unknown_key_reports_path() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
        v["model"]["encoder"]["width"] = 3.into();
        match RunConfig::from_json(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.encoder.width"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_reports_path() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
        v["train"]["batch_size"] = "eight".into();
        match RunConfig::from_json(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_violation_reports_path() {
        let mut cfg = RunConfig::desk();
        cfg.train.mask_ratio = 1.5;
        match RunConfig::from_json(&cfg.to_json()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.mask_ratio"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let mut cfg = RunConfig::desk();
        cfg.schema_version = 9;
        assert!(matches!(RunConfig::from_json(&cfg.to_json()), Err(Error::Config { path, .. }) if path == "schema_version"));
    }
}
