//! Finite-difference check of the full pretraining objective.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{DataConfig, ModelConfig, PretrainConfig, StrategyKind, TrainConfig};
use super::data::{derive_rng, prepare_sample, Dataset, Sample};
use super::model::{sample_loss, ModelState};
use super::stage::arch_for;
use crate::decoder_mim::DecoderConfig;
use crate::embedding::PosEmbedKind;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::numerics::gradcheck::FD_STEP;
use crate::numerics::{AdamWConfig, ParamStore, Session, Trainable};
use crate::synthdata::{CropStrategy, SceneConfig};
use crate::tm_fusion::TmConfig;

/// Two-season model small enough for repeated finite differences.
pub fn tiny_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        seed,
        data: DataConfig {
            scene: SceneConfig { seasons: 2, optical_channels: 2, sar_channels: 1, height: 24, width: 24, num_classes: 4 },
            num_scenes: 2,
            first_seed: seed,
            crop: CropStrategy::partial_overlap(0.7, 1.0),
            flip: true,
        },
        model: ModelConfig {
            crop_size: 8,
            encoder: EncoderConfig { depth: 1, heads: 2, embed_dim: 8, mlp_ratio: 2.0, patch_size: 4 },
            pos_embed: PosEmbedKind::Learnable,
            decoder: DecoderConfig { depth: 1, dim: 8, heads: 2, mlp_ratio: 2.0, normalize_target: true },
            tm: TmConfig { heads: 2, ..TmConfig::default() },
        },
        train: TrainConfig {
            strategy: StrategyKind::MultimodalTemporalTm,
            mask_ratio: 0.5,
            batch_size: 1,
            warmup_fraction: 0.0,
            optimizer: AdamWConfig::default(),
            stage1_epochs: 1,
            stage2_epochs: 1,
            progressive: false,
        },
    }
}

fn loss_at(model: &ModelState, params: &ParamStore, sample: &Sample) -> Result<f64> {
    let mut s = Session::new(params, Trainable::Nothing);
    let l = sample_loss(&mut s, &model.arch, sample)?;
    Ok(s.tape.value(l.total).item())
}

/// Relative error between the analytic directional derivative of the total
/// loss and its central difference, worst over `directions` random unit
/// directions in parameter space. Parameters are drawn at a larger scale
/// than the training init so every layer carries signal.
pub fn check_pretrain_gradient(cfg: &PretrainConfig, directions: usize) -> Result<f64> {
    let data = Dataset::generate(&cfg.data)?;
    let arch = arch_for(cfg, cfg.train.strategy.uses_tm());
    let mut model = ModelState::fresh(arch, cfg.seed)?;
    let mut rng = derive_rng(cfg.seed, "gradcheck");
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        let t = model.params.get_mut(name).expect("listed");
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    let sample = prepare_sample(
        &data,
        0,
        cfg.data.scene.seasons,
        &cfg.data.crop,
        cfg.model.crop_size,
        cfg.model.encoder.patch_size,
        cfg.train.mask_ratio,
        cfg.data.flip,
        &mut rng,
    )?;

    let mut s = Session::new(&model.params, Trainable::All);
    let loss = sample_loss(&mut s, &model.arch, &sample)?;
    let g = s.tape.backward(loss.total)?;
    let grads = s.param_grads(&g);
    drop(s);

    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dir: Vec<(String, Vec<f64>)> = names
            .iter()
            .map(|n| {
                let len = model.params.get(n).expect("listed").numel();
                (n.clone(), (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            })
            .collect();
        let norm = dir.iter().flat_map(|(_, v)| v).map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|(_, v)| v.iter_mut().for_each(|x| *x /= norm));
        let analytic: f64 = dir
            .iter()
            .map(|(n, v)| grads.get(n).map_or(0.0, |g| g.iter().zip(v).map(|(a, b)| a * b).sum()))
            .sum();
        let shifted = |sign: f64| -> Result<ParamStore> {
            let mut p = model.params.clone();
            for (n, v) in &dir {
                let t = p.get_mut(n).expect("listed");
                t.data_mut().iter_mut().zip(v).for_each(|(w, d)| *w += sign * FD_STEP * d);
            }
            Ok(p)
        };
        let plus = loss_at(&model, &shifted(1.0)?, &sample)?;
        let minus = loss_at(&model, &shifted(-1.0)?, &sample)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
