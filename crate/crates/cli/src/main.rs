use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use seamo::downstream::{evaluate, raw_pixel_baseline, ProbeMode, SplitData};
use seamo::embedding::PosEmbedKind;
use seamo::error::Error;
use seamo::harness::{
    check_compatible, checkpoint_path, crop_demo, gradcheck_suite, load_checkpoint, pretrain_to_dir, Checkpoint, Preset,
    RunConfig,
};
use seamo::pretrain::{
    arch_for, run_ablation_matrix, strategy_axis, temporal_axis, write_ablation_csv, AxisValue, StageKind,
};
use seamo::synthdata::CropStrategy;
use seamo::tm_fusion::TmVariant;

/// Exit status for an invalid configuration.
const EXIT_CONFIG: u8 = 2;
/// Exit status for an unreadable, corrupt, or incompatible checkpoint.
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_OTHER: u8 = 1;
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "seamo", version, about = "Season-aware multimodal masked-image pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. SEAMO_OUT takes precedence.
    #[arg(long, default_value = "seamo-out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Progressive pretraining; writes checkpoints and metrics.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tunes a checkpoint's encoder on the scene labels.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to the multi-time checkpoint under the output directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Linear probe on a checkpoint's frozen encoder, with the raw-pixel baseline.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Runs one or more ablation axes and writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
    },
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Windows drawn by each crop strategy, as JSON.
    CropDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        draws: usize,
    },
    /// Summarizes a checkpoint file.
    InspectCkpt {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AxisArg {
    Strategy,
    Temporal,
    Crop,
    Tm,
    DecoderDepth,
    MaskRatio,
    NormalizeTarget,
    PosEmbed,
    All,
}

fn axis_values(axis: AxisArg, seasons: usize) -> Vec<AxisValue> {
    let one = |a: AxisArg| -> Vec<AxisValue> {
        match a {
            AxisArg::Strategy => strategy_axis(),
            AxisArg::Temporal => temporal_axis(1..=seasons),
            AxisArg::Crop => vec![
                AxisValue::Crop(CropStrategy::same_location()),
                AxisValue::Crop(CropStrategy::partial_overlap(0.75, 1.0)),
                AxisValue::Crop(CropStrategy::partial_overlap(0.5, 1.0)),
                AxisValue::Crop(CropStrategy::partial_overlap(0.25, 1.0)),
            ],
            AxisArg::Tm => vec![AxisValue::Tm(TmVariant::Fuse), AxisValue::Tm(TmVariant::Decouple)],
            AxisArg::DecoderDepth => [2, 4, 6].into_iter().map(AxisValue::DecoderDepth).collect(),
            AxisArg::MaskRatio => [0.5, 0.75, 0.9].into_iter().map(AxisValue::MaskRatio).collect(),
            AxisArg::NormalizeTarget => vec![AxisValue::NormalizeTarget(false), AxisValue::NormalizeTarget(true)],
            AxisArg::PosEmbed => {
                vec![AxisValue::PosEmbed(PosEmbedKind::Learnable), AxisValue::PosEmbed(PosEmbedKind::Sinusoidal)]
            }
            AxisArg::All => unreachable!(),
        }
    };
    match axis {
        AxisArg::All => [
            AxisArg::Strategy,
            AxisArg::Temporal,
            AxisArg::Crop,
            AxisArg::Tm,
            AxisArg::DecoderDepth,
            AxisArg::MaskRatio,
            AxisArg::NormalizeTarget,
            AxisArg::PosEmbed,
        ]
        .into_iter()
        .flat_map(one)
        .collect(),
        a => one(a),
    }
}

/// A failure with its exit status and a single-line description.
struct Failure {
    code: u8,
    kind: &'static str,
    path: Option<String>,
    message: String,
}

impl Failure {
    fn line(&self) -> String {
        let mut fields = json!({ "error": self.kind, "exit": self.code, "message": self.message });
        if let Some(p) = &self.path {
            fields["path"] = json!(p);
        }
        fields.to_string()
    }
}

/// Classifies a library error; `checkpoint` marks errors raised while reading one.
fn classify(e: Error, checkpoint: bool) -> Failure {
    let message = e.to_string();
    match e {
        Error::Config { path, .. } => Failure { code: EXIT_CONFIG, kind: "config", path: Some(path), message },
        Error::Checksum(_) | Error::Version { .. } | Error::Mismatch(_) | Error::Format(_) => {
            Failure { code: EXIT_CHECKPOINT, kind: "checkpoint", path: None, message }
        }
        _ if checkpoint => Failure { code: EXIT_CHECKPOINT, kind: "checkpoint", path: None, message },
        _ => Failure { code: EXIT_OTHER, kind: "runtime", path: None, message },
    }
}

fn other(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_OTHER, kind: "runtime", path: None, message: message.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        classify(e, false)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        other(e.to_string())
    }
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        std::env::var_os("SEAMO_OUT").map(PathBuf::from).unwrap_or_else(|| self.out.clone())
    }

    fn explicit(&self) -> bool {
        self.config.is_some() || self.preset.is_some()
    }

    fn run_config(&self) -> Result<RunConfig, Failure> {
        let mut run = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path).map_err(|e| match e {
                Error::Io(io) => Failure {
                    code: EXIT_CONFIG,
                    kind: "config",
                    path: Some(".".into()),
                    message: format!("{}: {io}", path.display()),
                },
                e => classify(e, false),
            })?,
            (None, Some(PresetArg::Paper)) => Preset::Paper.config(),
            (None, _) => Preset::Desk.config(),
        };
        if let Some(seed) = self.seed {
            run = run.with_seed(seed);
        }
        run.validate()?;
        Ok(run)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| other(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Loads a checkpoint and the configuration to evaluate it under. An explicit
/// `--config` or `--preset` must describe the checkpoint's architecture.
fn checkpoint_and_run(common: &Common, ckpt: Option<PathBuf>) -> Result<(Checkpoint, RunConfig), Failure> {
    let path = ckpt.unwrap_or_else(|| checkpoint_path(&common.out_dir(), StageKind::MultiTime));
    let loaded = load_checkpoint(&path).map_err(|e| classify(e, true))?;
    let run = if common.explicit() {
        let run = common.run_config()?;
        let arch = arch_for(&run.pretrain(), loaded.state.arch.tm_enabled);
        check_compatible(&loaded.state.params, &arch).map_err(|e| classify(e, true))?;
        run
    } else {
        let mut run = loaded.run.clone();
        if let Some(seed) = common.seed {
            run = run.with_seed(seed);
        }
        run
    };
    Ok((loaded, run))
}

fn downstream(common: Common, ckpt: Option<PathBuf>, mode: ProbeMode) -> Result<(), Failure> {
    let (loaded, run) = checkpoint_and_run(&common, ckpt)?;
    let out = common.out_dir();
    std::fs::create_dir_all(&out)?;
    let probe = seamo::downstream::ProbeConfig { mode, ..run.probe.clone() };
    let split = SplitData::generate(&probe.split(), &run.data.scene)?;
    let classes = run.data.scene.num_classes;
    let report = evaluate(&probe, &loaded.state, &split, classes, run.seed)?;
    let mut doc = serde_json::to_value(&report).map_err(|e| other(e.to_string()))?;
    if mode == ProbeMode::LinearProbe {
        let raw = raw_pixel_baseline(&probe, &loaded.state, &split, classes, run.seed)?;
        doc["raw_pixel_accuracy"] = json!(raw.accuracy);
        println!("probe accuracy {:.4} (raw pixels {:.4})", report.accuracy, raw.accuracy);
    } else {
        println!("fine-tune accuracy {:.4}", report.accuracy);
    }
    if report.degenerate {
        println!("warning: training split has a single class; accuracy is trivially 1");
    }
    write_json(&out.join(format!("{}.json", mode.name())), &doc)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { common } => {
            let run = common.run_config()?;
            let out = common.out_dir();
            let result = pretrain_to_dir(&run, &out)?;
            for report in result.stage1.iter().chain(std::iter::once(&result.stage2)) {
                let last = report.metrics.last().map(|m| m.loss_total);
                println!(
                    "{}: {} steps, final loss {}",
                    report.stage.name(),
                    report.metrics.len(),
                    last.map_or("-".into(), |l| format!("{l:.4}"))
                );
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Finetune { common, ckpt } => downstream(common, ckpt, ProbeMode::FineTune),
        Command::Probe { common, ckpt } => downstream(common, ckpt, ProbeMode::LinearProbe),
        Command::Ablate { common, axis } => {
            let run = common.run_config()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let values = axis_values(axis, run.data.scene.seasons);
            let rows = run_ablation_matrix(&run.pretrain(), &run.probe, &values);
            for r in &rows {
                match (&r.error, r.probe_acc) {
                    (Some(e), _) => println!("{} {}={}: error: {e}", r.config_id, r.axis, r.value),
                    (None, acc) => println!(
                        "{} {}={}: loss {} probe {} ({:.1}s)",
                        r.config_id,
                        r.axis,
                        r.value,
                        r.final_loss.map_or("-".into(), |l| format!("{l:.4}")),
                        acc.map_or("-".into(), |a| format!("{a:.4}")),
                        r.wall_s
                    ),
                }
            }
            write_ablation_csv(BufWriter::new(File::create(out.join("ablation.csv"))?), &rows)?;
            Ok(())
        }
        Command::Gradcheck { common, instances } => {
            let run = common.run_config()?;
            let reports = gradcheck_suite(instances, run.seed)?;
            let mut bad = Vec::new();
            for r in &reports {
                let ok = r.max_rel_err < GRAD_TOL;
                println!("{:<24} max_rel_err {:.3e} {}", r.name, r.max_rel_err, if ok { "ok" } else { "FAIL" });
                if !ok {
                    bad.push(r.name.clone());
                }
            }
            if bad.is_empty() {
                Ok(())
            } else {
                Err(other(format!("relative error at or above {GRAD_TOL:e}: {}", bad.join(", "))))
            }
        }
        Command::CropDemo { common, draws } => {
            let run = common.run_config()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let doc = crop_demo(&run, draws)?;
            println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| other(e.to_string()))?);
            write_json(&out.join("crop_demo.json"), &doc)
        }
        Command::InspectCkpt { common: _, path } => {
            let ckpt = load_checkpoint(&path).map_err(|e| classify(e, true))?;
            let state = &ckpt.state;
            let params: Vec<_> =
                state.params.iter().map(|(name, t)| json!({ "name": name, "shape": t.shape() })).collect();
            let doc = json!({
                "seed": ckpt.run.seed,
                "strategy": state.arch.strategy.name(),
                "tm_enabled": state.arch.tm_enabled,
                "stage": state.stage.map(|s| s.name()),
                "step": state.step,
                "has_optimizer": state.optimizer.is_some(),
                "scalars": state.params.iter().map(|(_, t)| t.numel()).sum::<usize>(),
                "params": params,
            });
            println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| other(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}
