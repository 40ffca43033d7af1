//! Run configuration, checkpoint persistence, and the operations behind the CLI.

mod checkpoint;
mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub use checkpoint::{
    check_compatible, checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_for, save_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Preset, RunConfig, SCHEMA_VERSION};

use crate::error::Result;
use crate::numerics::gradcheck::{check_all_primitives, GradCheckReport};
use crate::pretrain::{
    check_pretrain_gradient, derive_rng, run_progressive, tiny_config, write_metrics_csv, Dataset, PretrainRun,
    StageKind,
};
use crate::synthdata::{sample_crops, CropStrategy};

pub const PRETRAIN_LOSS_CHECK: &str = "pretrain_loss";

/// Every primitive plus the end-to-end objective, `instances` seeded cases each.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = check_all_primitives(instances, seed)?;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        worst = worst.max(check_pretrain_gradient(&tiny_config(seed.wrapping_add(i as u64)), 2)?);
    }
    reports.push(GradCheckReport { name: PRETRAIN_LOSS_CHECK.to_string(), instances, max_rel_err: worst });
    Ok(reports)
}

pub fn checkpoint_path(out: &Path, stage: StageKind) -> PathBuf {
    out.join(format!("{}.ckpt", stage.name()))
}

/// Progressive pretraining with a checkpoint after each stage and the metrics
/// log written to `out/metrics.csv`.
pub fn pretrain_to_dir(run: &RunConfig, out: &Path) -> Result<PretrainRun> {
    run.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), run.to_json())?;
    let cfg = run.pretrain();
    let data = Dataset::generate(&cfg.data)?;
    let result = run_progressive(&cfg, &data, |stage, state| {
        save_checkpoint(&checkpoint_path(out, stage), &Checkpoint { run: run.clone(), state: state.clone() })
    })?;
    write_metrics_csv(BufWriter::new(File::create(out.join("metrics.csv"))?), result.metrics())?;
    Ok(result)
}

/// Windows sampled by each crop strategy over one scene, for inspection.
pub fn crop_demo(run: &RunConfig, draws: usize) -> Result<Value> {
    let scene = &run.data.scene;
    let c = run.model.crop_size;
    let partial = match run.data.crop.kind {
        crate::synthdata::CropKind::PartialOverlap => run.data.crop,
        _ => CropStrategy::partial_overlap(0.5, 1.0),
    };
    let mut strategies = serde_json::Map::new();
    for strategy in [CropStrategy::same_location(), partial, CropStrategy::no_overlap()] {
        let mut rng = derive_rng(run.seed, "crop-demo");
        let rows = (0..draws)
            .map(|_| sample_crops(scene.seasons, scene.height, scene.width, &strategy, c, c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let kind = serde_json::to_value(strategy.kind).expect("kind serializes");
        strategies.insert(
            kind.as_str().unwrap_or_default().to_string(),
            json!({ "strategy": strategy, "draws": rows }),
        );
    }
    Ok(json!({
        "seed": run.seed,
        "scene": { "height": scene.height, "width": scene.width, "seasons": scene.seasons },
        "crop_size": c,
        "strategies": strategies,
    }))
}
