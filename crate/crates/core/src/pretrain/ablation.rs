use std::io::Write;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{PretrainConfig, StrategyKind};
use super::data::Dataset;
use super::stage::run_progressive;
use crate::downstream::{evaluate, ProbeConfig, SplitData};
use crate::embedding::PosEmbedKind;
use crate::error::Result;
use crate::synthdata::CropStrategy;
use crate::tm_fusion::TmVariant;

/// One override applied to the base configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum AxisValue {
    Strategy(StrategyKind),
    TemporalLength(usize),
    Crop(CropStrategy),
    Tm(TmVariant),
    DecoderDepth(usize),
    MaskRatio(f64),
    NormalizeTarget(bool),
    PosEmbed(PosEmbedKind),
}

impl AxisValue {
    pub fn axis(&self) -> &'static str {
        match self {
            AxisValue::Strategy(_) => "strategy",
            AxisValue::TemporalLength(_) => "temporal_length",
            AxisValue::Crop(_) => "crop",
            AxisValue::Tm(_) => "tm_variant",
            AxisValue::DecoderDepth(_) => "decoder_depth",
            AxisValue::MaskRatio(_) => "mask_ratio",
            AxisValue::NormalizeTarget(_) => "normalize_target",
            AxisValue::PosEmbed(_) => "pos_embed",
        }
    }

    pub fn value(&self) -> String {
        match self {
            AxisValue::Strategy(s) => s.name().to_string(),
            AxisValue::TemporalLength(t) => t.to_string(),
            AxisValue::Crop(c) => {
                let kind = serde_json::to_value(c.kind).expect("kind serializes");
                format!("{}[{}-{}]", kind.as_str().unwrap_or_default(), c.min_rate, c.max_rate)
            }
            AxisValue::Tm(v) => serde_json::to_value(v).expect("variant serializes").as_str().unwrap_or_default().to_string(),
            AxisValue::DecoderDepth(d) => d.to_string(),
            AxisValue::MaskRatio(r) => r.to_string(),
            AxisValue::NormalizeTarget(b) => b.to_string(),
            AxisValue::PosEmbed(p) => match p {
                PosEmbedKind::Sinusoidal => "sinusoidal".into(),
                PosEmbedKind::Learnable => "learnable".into(),
            },
        }
    }

    pub fn apply(&self, cfg: &mut PretrainConfig) {
        match *self {
            AxisValue::Strategy(s) => cfg.train.strategy = s,
            AxisValue::TemporalLength(t) => cfg.data.scene.seasons = t,
            AxisValue::Crop(c) => cfg.data.crop = c,
            AxisValue::Tm(v) => cfg.model.tm.variant = v,
            AxisValue::DecoderDepth(d) => cfg.model.decoder.depth = d,
            AxisValue::MaskRatio(r) => cfg.train.mask_ratio = r,
            AxisValue::NormalizeTarget(b) => cfg.model.decoder.normalize_target = b,
            AxisValue::PosEmbed(p) => cfg.model.pos_embed = p,
        }
    }
}

/// The seven pretraining strategies.
pub fn strategy_axis() -> Vec<AxisValue> {
    StrategyKind::ALL.into_iter().map(AxisValue::Strategy).collect()
}

pub fn temporal_axis(lengths: impl IntoIterator<Item = usize>) -> Vec<AxisValue> {
    lengths.into_iter().map(AxisValue::TemporalLength).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config_id: String,
    pub axis: String,
    pub value: String,
    pub final_loss: Option<f64>,
    pub probe_acc: Option<f64>,
    pub wall_s: f64,
    pub error: Option<String>,
}

/// Short content hash of a configuration.
pub fn config_id(cfg: &PretrainConfig, probe: &ProbeConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(probe).expect("config serializes"));
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn run_row(cfg: &PretrainConfig, probe: &ProbeConfig) -> Result<(Option<f64>, f64)> {
    cfg.validate()?;
    probe.validate("probe")?;
    let data = Dataset::generate(&cfg.data)?;
    let run = run_progressive(cfg, &data, |_, _| Ok(()))?;
    let split = SplitData::generate(&probe.split(), &cfg.data.scene)?;
    let report = evaluate(probe, &run.model, &split, cfg.data.scene.num_classes, cfg.seed)?;
    Ok((run.final_loss(), report.accuracy))
}

/// Runs every override against the same base config and seed. A failing row
/// records its error and the matrix continues.
pub fn run_ablation_matrix(base: &PretrainConfig, probe: &ProbeConfig, values: &[AxisValue]) -> Vec<AblationRow> {
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            v.apply(&mut cfg);
            let started = Instant::now();
            let outcome = run_row(&cfg, probe);
            let wall_s = started.elapsed().as_secs_f64();
            let (final_loss, probe_acc, error) = match outcome {
                Ok((loss, acc)) => (loss, Some(acc), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            AblationRow {
                config_id: config_id(&cfg, probe),
                axis: v.axis().to_string(),
                value: v.value(),
                final_loss,
                probe_acc,
                wall_s,
                error,
            }
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "config_id,axis,value,final_loss,probe_acc,wall_s,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_ablation_csv<'a>(mut out: impl Write, rows: impl IntoIterator<Item = &'a AblationRow>) -> Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.config_id,
            r.axis,
            csv_field(&r.value),
            num(r.final_loss),
            num(r.probe_acc),
            r.wall_s,
            csv_field(r.error.as_deref().unwrap_or("")),
        )?;
    }
    Ok(())
}
