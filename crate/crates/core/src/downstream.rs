//! Linear probing and fine-tuning of a pretrained encoder on scene labels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{patchify, Modality};
use crate::error::{Error, Result};
use crate::numerics::{
    accumulate_grads, AdamWConfig, Init, LrSchedule, OptimizerState, ParamStore, Session, Tensor, Trainable, Var,
};
use crate::pretrain::{derive_rng, encode_sample, full_view, Dataset, ModelState, Sample};
use crate::synthdata::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    LinearProbe,
    FineTune,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::LinearProbe => "linear_probe",
            ProbeMode::FineTune => "fine_tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Minibatch size for fine-tuning; the linear probe is full batch.
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the first training scene; test scenes follow the training range.
    pub first_seed: u64,
    /// Leading seasons averaged into each feature vector.
    pub seasons: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::LinearProbe,
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
            batch_size: 16,
            n_train: 160,
            n_test: 160,
            first_seed: 1_000_000,
            seasons: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config(format!("{path}.epochs"), "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{path}.lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        if self.batch_size == 0 || self.n_train == 0 || self.n_test == 0 || self.seasons == 0 {
            return Err(Error::config(path, "batch_size, n_train, n_test and seasons must be positive"));
        }
        Ok(())
    }

    pub fn split(&self) -> Split {
        let train = (0..self.n_train as u64).map(|i| self.first_seed + i).collect();
        let test = (0..self.n_test as u64).map(|i| self.first_seed + self.n_train as u64 + i).collect();
        Split { train, test }
    }
}

/// Scene seeds of the two partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

impl Split {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<_> = self.train.iter().collect();
        if let Some(s) = self.test.iter().find(|s| train.contains(s)) {
            return Err(Error::Invalid(format!("scene seed {s} is in both the train and test splits")));
        }
        Ok(())
    }
}

/// Generated scenes of a split. Normalization statistics come from the
/// training partition and are applied to both.
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn generate(split: &Split, scene: &SceneConfig) -> Result<Self> {
        split.check_disjoint()?;
        let make = |seeds: &[u64]| {
            seeds.iter().map(|&s| crate::synthdata::generate_scene(s, scene)).collect::<Result<Vec<_>>>()
        };
        let train = Dataset::from_scenes(make(&split.train)?)?;
        let mut test = Dataset::from_scenes(make(&split.test)?)?;
        test.optical_stats = train.optical_stats.clone();
        test.sar_stats = train.sar_stats.clone();
        Ok(SplitData { train, test })
    }
}

fn labels(data: &Dataset) -> Vec<usize> {
    data.scenes.iter().map(|s| s.latent_label).collect()
}

fn views(model: &ModelState, data: &Dataset, seasons: usize) -> Result<Vec<Sample>> {
    let m = &model.arch.model;
    (0..data.len()).map(|i| full_view(data, i, seasons, m.crop_size, m.encoder.patch_size)).collect()
}

/// `1 x D` mean of every encoder output token of an unmasked sample.
pub fn feature_var(s: &mut Session, model: &ModelState, sample: &Sample) -> Result<Var> {
    if sample.plan.masked.iter().any(|m| !m.is_empty()) {
        return Err(Error::Invalid("feature extraction takes unmasked views".into()));
    }
    let features = encode_sample(s, &model.arch, sample)?;
    let rows: Vec<Var> = features.iter().flat_map(|&(o, r)| std::iter::once(o).chain(r)).collect();
    let all = s.tape.concat_rows(&rows)?;
    s.tape.mean_rows(all)
}

pub fn extract_features(model: &ModelState, sample: &Sample) -> Result<Vec<f64>> {
    let mut s = Session::new(&model.params, Trainable::Nothing);
    let f = feature_var(&mut s, model, sample)?;
    Ok(s.tape.value(f).data().to_vec())
}

/// Mean patch vector of each used modality, concatenated and averaged over seasons.
pub fn raw_pixel_features(sample: &Sample, modalities: &[Modality], patch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &m in modalities {
        let mut acc: Vec<f64> = Vec::new();
        for t in 0..sample.seasons() {
            let p = patchify(sample.raster(m, t), patch)?;
            if acc.is_empty() {
                acc = vec![0.0; p.last_dim()];
            }
            for r in 0..p.rows() {
                acc.iter_mut().zip(p.row(r)).for_each(|(a, v)| *a += v);
            }
            let n = (p.rows() * sample.seasons()) as f64;
            if t + 1 == sample.seasons() {
                acc.iter_mut().for_each(|a| *a /= n);
            }
        }
        out.extend(acc);
    }
    Ok(out)
}

/// Per-column mean and std of the training features; zero-variance columns keep std 1.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Invalid("no feature rows".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

const HEAD: &str = "probe.head";

fn head_logits(s: &mut Session, x: Var) -> Result<Var> {
    crate::encoder::linear(s, HEAD, x)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.last_dim();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn optimizer(cfg: &ProbeConfig, total: usize) -> Result<OptimizerState> {
    let adam = AdamWConfig { base_lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    Ok(OptimizerState::new(adam, LrSchedule::new(cfg.lr, 0, total as u64)?))
}

/// Softmax regression on standardized features. Returns `(test, train)` accuracy.
pub fn fit_linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() || train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Invalid("probe features and labels disagree in count".into()));
    }
    let st = Standardizer::fit(train_x)?;
    let to_matrix = |rows: &[Vec<f64>]| {
        let d = rows[0].len();
        Tensor::matrix(rows.len(), d, rows.iter().flat_map(|r| st.apply(r)).collect())
    };
    let (xtr, xte) = (to_matrix(train_x)?, to_matrix(test_x)?);
    let d = xtr.last_dim();
    let mut head = ParamStore::new();
    head.insert(format!("{HEAD}.weight"), Tensor::zeros(&[d, classes]))?;
    head.insert(format!("{HEAD}.bias"), Tensor::zeros(&[classes]))?;
    let mut opt = optimizer(cfg, cfg.epochs)?;
    for _ in 0..cfg.epochs {
        let mut s = Session::new(&head, Trainable::All);
        let x = s.constant(xtr.clone())?;
        let logits = head_logits(&mut s, x)?;
        let loss = s.tape.softmax_cross_entropy(logits, train_y)?;
        let g = s.tape.backward(loss)?;
        let grads = s.param_grads(&g);
        drop(s);
        opt.step(&mut head, &grads)?;
    }
    let eval = |x: &Tensor, y: &[usize]| -> Result<f64> {
        let mut s = Session::new(&head, Trainable::Nothing);
        let xv = s.constant(x.clone())?;
        let logits = head_logits(&mut s, xv)?;
        Ok(accuracy(s.tape.value(logits), y))
    };
    Ok((eval(&xte, test_y)?, eval(&xtr, train_y)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_test: usize,
    pub seed: u64,
    /// Every training scene has the same label, so accuracy carries no signal.
    pub degenerate: bool,
}

impl ProbeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn is_degenerate(y: &[usize]) -> bool {
    y.iter().collect::<BTreeSet<_>>().len() < 2
}

/// Trains the configured probe and reports test accuracy. The encoder in
/// `model` is never modified; fine-tuning works on a copy.
pub fn evaluate(cfg: &ProbeConfig, model: &ModelState, data: &SplitData, classes: usize, seed: u64) -> Result<ProbeReport> {
    cfg.validate("probe")?;
    let seasons = cfg.seasons.min(data.train.scenes[0].seasons());
    let (ytr, yte) = (labels(&data.train), labels(&data.test));
    let (vtr, vte) = (views(model, &data.train, seasons)?, views(model, &data.test, seasons)?);
    let (accuracy, train_accuracy) = match cfg.mode {
        ProbeMode::LinearProbe => {
            let ftr = vtr.iter().map(|v| extract_features(model, v)).collect::<Result<Vec<_>>>()?;
            let fte = vte.iter().map(|v| extract_features(model, v)).collect::<Result<Vec<_>>>()?;
            fit_linear_probe(&ftr, &ytr, &fte, &yte, classes, cfg)?
        }
        ProbeMode::FineTune => fine_tune(cfg, model, &vtr, &ytr, &vte, &yte, classes, seed)?,
    };
    Ok(ProbeReport {
        mode: cfg.mode,
        accuracy,
        train_accuracy,
        n_test: yte.len(),
        seed,
        degenerate: is_degenerate(&ytr),
    })
}

/// Linear probe on raw patch statistics, bypassing the encoder.
pub fn raw_pixel_baseline(cfg: &ProbeConfig, model: &ModelState, data: &SplitData, classes: usize, seed: u64) -> Result<ProbeReport> {
    cfg.validate("probe")?;
    let seasons = cfg.seasons.min(data.train.scenes[0].seasons());
    let patch = model.arch.model.encoder.patch_size;
    let mods = model.arch.modalities();
    let feats = |d: &Dataset| -> Result<Vec<Vec<f64>>> {
        views(model, d, seasons)?.iter().map(|v| raw_pixel_features(v, mods, patch)).collect()
    };
    let (ytr, yte) = (labels(&data.train), labels(&data.test));
    let (accuracy, train_accuracy) =
        fit_linear_probe(&feats(&data.train)?, &ytr, &feats(&data.test)?, &yte, classes, cfg)?;
    Ok(ProbeReport {
        mode: ProbeMode::LinearProbe,
        accuracy,
        train_accuracy,
        n_test: yte.len(),
        seed,
        degenerate: is_degenerate(&ytr),
    })
}

fn standardized_logits(s: &mut Session, model: &ModelState, sample: &Sample, st: &Standardizer) -> Result<Var> {
    let f = feature_var(s, model, sample)?;
    let f = s.tape.reshape(f, vec![1, st.mean.len()])?;
    let shift = s.constant(Tensor::vector(st.mean.iter().map(|m| -m).collect())?)?;
    let scale = s.constant(Tensor::vector(st.std.iter().map(|v| 1.0 / v).collect())?)?;
    let f = s.tape.add_row(f, shift)?;
    let f = s.tape.mul_row(f, scale)?;
    head_logits(s, f)
}

#[allow(clippy::too_many_arguments)]
fn fine_tune(
    cfg: &ProbeConfig,
    model: &ModelState,
    train: &[Sample],
    ytr: &[usize],
    test: &[Sample],
    yte: &[usize],
    classes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let init_feats = train.iter().map(|v| extract_features(model, v)).collect::<Result<Vec<_>>>()?;
    let st = Standardizer::fit(&init_feats)?;
    let mut tuned = model.clone();
    let d = st.mean.len();
    Init::new(&mut tuned.params, seed).linear(HEAD, d, classes)?;
    let steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut opt = optimizer(cfg, steps)?;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut derive_rng(seed, &format!("finetune/{epoch}")));
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let mut s = Session::new(&tuned.params, Trainable::All);
                let logits = standardized_logits(&mut s, &tuned, &train[i], &st)?;
                let loss = s.tape.softmax_cross_entropy(logits, &[ytr[i]])?;
                let g = s.tape.backward(loss)?;
                accumulate_grads(&mut grads, s.param_grads(&g));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            opt.step(&mut tuned.params, &grads)?;
        }
    }
    let eval = |samples: &[Sample], y: &[usize]| -> Result<f64> {
        let mut rows = Vec::with_capacity(samples.len() * classes);
        for v in samples {
            let mut s = Session::new(&tuned.params, Trainable::Nothing);
            let l = standardized_logits(&mut s, &tuned, v, &st)?;
            rows.extend_from_slice(s.tape.value(l).data());
        }
        Ok(accuracy(&Tensor::matrix(samples.len(), classes, rows)?, y))
    };
    Ok((eval(test, yte)?, eval(train, ytr)?))
}
