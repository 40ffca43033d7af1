use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{PretrainConfig, StageConfig, StageKind};
use super::data::{derive_rng, prepare_sample, Dataset};
use super::model::{sample_loss, Arch, ModelState};
use crate::error::{Error, Result};
use crate::numerics::{accumulate_grads, LrSchedule, OptimizerState, Session, Trainable};
use crate::synthdata::CropStrategy;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_opt: f64,
    pub loss_sar: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: StageKind,
    pub metrics: Vec<StepMetrics>,
    /// Seeds of every scene the stage drew from.
    pub scene_seeds: BTreeSet<u64>,
    /// Season indices that entered the network.
    pub seasons: BTreeSet<usize>,
}

impl StageReport {
    fn empty(stage: StageKind) -> Self {
        StageReport { stage, metrics: Vec::new(), scene_seeds: BTreeSet::new(), seasons: BTreeSet::new() }
    }
}

/// Scenes available to a stage: the leading quarter for single-time, all otherwise.
pub fn stage_scene_count(total: usize, cfg: &StageConfig) -> usize {
    match cfg.stage {
        StageKind::SingleTime => (total as f64 * cfg.data_fraction).ceil() as usize,
        StageKind::MultiTime => total,
    }
}

pub fn steps_per_epoch(scenes: usize, batch: usize) -> usize {
    scenes.div_ceil(batch)
}

/// Trains `model` for one stage and returns it with the step log.
pub fn run_stage(mut model: ModelState, data: &Dataset, cfg: &StageConfig) -> Result<(ModelState, StageReport)> {
    let seasons = data.scenes.first().map_or(0, |s| s.seasons());
    cfg.validate(seasons)?;
    if model.arch.strategy != cfg.strategy {
        return Err(Error::config(
            "train.strategy",
            format!("model was built for {}, stage runs {}", model.arch.strategy.name(), cfg.strategy.name()),
        ));
    }
    if model.arch.tm_enabled != cfg.tm_enabled {
        return Err(Error::config(
            format!("stage.{}.tm_enabled", cfg.stage.name()),
            "does not match the model's fusion block",
        ));
    }
    let mut report = StageReport::empty(cfg.stage);
    if cfg.epochs == 0 {
        return Ok((model, report));
    }
    let n_used = stage_scene_count(data.len(), cfg);
    let spe = steps_per_epoch(n_used, cfg.batch_size);
    let total = (cfg.epochs * spe) as u64;
    let warmup = (cfg.warmup_fraction * total as f64).floor() as u64;
    let schedule = LrSchedule::new(cfg.optimizer.base_lr, warmup, total)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), schedule);
    let arch = model.arch.clone();
    let patch = arch.model.encoder.patch_size;
    let base_step = model.step;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_used).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("order/{}/{epoch}", cfg.stage.name())));
        for batch in order.chunks(cfg.batch_size) {
            let started = cfg.timing.then(Instant::now);
            let mut grads = BTreeMap::new();
            let (mut sum_total, mut sum_opt, mut sum_sar) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let mut rng = derive_rng(cfg.seed, &format!("sample/{}/{epoch}/{idx}", cfg.stage.name()));
                let sample = prepare_sample(
                    data,
                    idx,
                    cfg.t_effective,
                    &cfg.crop,
                    arch.model.crop_size,
                    patch,
                    cfg.mask_ratio,
                    cfg.flip,
                    &mut rng,
                )?;
                report.scene_seeds.insert(sample.scene_seed);
                report.seasons.extend(0..sample.seasons());
                let mut s = Session::new(&model.params, Trainable::All);
                let loss = sample_loss(&mut s, &arch, &sample)?;
                sum_total += s.tape.value(loss.total).item();
                sum_opt += s.tape.value(loss.optical).item();
                if let Some(r) = loss.sar {
                    sum_sar += s.tape.value(r).item();
                }
                let g = s.tape.backward(loss.total)?;
                accumulate_grads(&mut grads, s.param_grads(&g));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            let step = base_step + opt.step;
            let lr = opt.step(&mut model.params, &grads)?;
            report.metrics.push(StepMetrics {
                step,
                lr,
                loss_total: sum_total * inv,
                loss_opt: sum_opt * inv,
                loss_sar: arch.strategy.uses_sar().then_some(sum_sar * inv),
                seconds: started.map(|t| t.elapsed().as_secs_f64()),
            });
        }
    }
    model.step += total;
    model.stage = Some(cfg.stage);
    model.optimizer = Some(opt);
    Ok((model, report))
}

/// Mean total loss over fixed, seeded views of the given scenes.
#[allow(clippy::too_many_arguments)]
pub fn eval_loss(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
    seasons: usize,
    crop: &CropStrategy,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one scene".into()));
    }
    let arch = &model.arch;
    let mut sum = 0.0;
    for &idx in indices {
        let mut rng = derive_rng(seed, &format!("eval/{idx}"));
        let sample = prepare_sample(
            data,
            idx,
            seasons,
            crop,
            arch.model.crop_size,
            arch.model.encoder.patch_size,
            mask_ratio,
            false,
            &mut rng,
        )?;
        let mut s = Session::new(&model.params, Trainable::Nothing);
        let loss = sample_loss(&mut s, arch, &sample)?;
        sum += s.tape.value(loss.total).item();
    }
    Ok(sum / indices.len() as f64)
}

pub fn arch_for(cfg: &PretrainConfig, tm_enabled: bool) -> Arch {
    Arch {
        model: cfg.model.clone(),
        optical_channels: cfg.data.scene.optical_channels,
        sar_channels: cfg.data.scene.sar_channels,
        strategy: cfg.train.strategy,
        tm_enabled,
    }
}

/// Result of a full pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub model: ModelState,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
}

impl PretrainRun {
    pub fn metrics(&self) -> impl Iterator<Item = &StepMetrics> {
        self.stage1.iter().flat_map(|r| &r.metrics).chain(&self.stage2.metrics)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.metrics().last().map(|m| m.loss_total)
    }
}

/// Single-time stage, then a multi-time stage warm-started from it.
///
/// `after_stage` sees each finished model, e.g. to write a checkpoint.
pub fn run_progressive(
    cfg: &PretrainConfig,
    data: &Dataset,
    mut after_stage: impl FnMut(StageKind, &ModelState) -> Result<()>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let single = cfg.stage_config(StageKind::SingleTime);
    let multi = cfg.stage_config(StageKind::MultiTime);
    let seasons = data.scenes.first().map_or(0, |s| s.seasons());
    single.validate(seasons)?;
    multi.validate(seasons)?;
    let arch2 = arch_for(cfg, multi.tm_enabled);
    let (start, stage1) = if cfg.train.progressive {
        let fresh = ModelState::fresh(arch_for(cfg, false), cfg.seed)?;
        let (m1, r1) = run_stage(fresh, data, &single)?;
        after_stage(StageKind::SingleTime, &m1)?;
        (m1.warm_start(arch2, cfg.seed)?, Some(r1))
    } else {
        (ModelState::fresh(arch2, cfg.seed)?, None)
    };
    let (model, stage2) = run_stage(start, data, &multi)?;
    after_stage(StageKind::MultiTime, &model)?;
    Ok(PretrainRun { model, stage1, stage2 })
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_opt,loss_sar,seconds";

/// One CSV row per optimizer step; absent values are left empty.
pub fn write_metrics_csv<'a>(mut out: impl Write, rows: impl IntoIterator<Item = &'a StepMetrics>) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", m.step, m.lr, m.loss_total, m.loss_opt, opt(m.loss_sar), opt(m.seconds))?;
    }
    Ok(())
}
