use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seamo::downstream::{evaluate, ProbeConfig, ProbeMode, SplitData};
use seamo::encoder::{encode, init_encoder, EncoderConfig};
use seamo::harness::{load_checkpoint, save_checkpoint, Checkpoint, RunConfig};
use seamo::numerics::{Init, LrSchedule, OptimizerState, ParamStore, Session, Tensor, Trainable};
use seamo::pretrain::{
    arch_for, init_params, prepare_sample, run_progressive, run_stage, sample_loss, stage_scene_count, Dataset,
    ModelState, PretrainConfig, StageKind,
};
use seamo::synthdata::{generate_scene, SceneConfig};

fn small_desk(scenes: usize) -> PretrainConfig {
    let mut cfg = RunConfig::desk().pretrain();
    cfg.data.num_scenes = scenes;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_epochs = 1;
    cfg
}

#[test]
fn single_time_stage_uses_first_quarter_and_season_zero() {
    let cfg = small_desk(10);
    let data = Dataset::generate(&cfg.data).unwrap();
    let stage = cfg.stage_config(StageKind::SingleTime);
    assert_eq!(stage_scene_count(10, &stage), 3);
    let fresh = ModelState::fresh(arch_for(&cfg, false), 0).unwrap();
    let (_, report) = run_stage(fresh, &data, &stage).unwrap();
    let expected: BTreeSet<u64> = data.scenes[..3].iter().map(|s| s.seed).collect();
    assert_eq!(report.scene_seeds, expected);
    assert_eq!(report.seasons, BTreeSet::from([0]));
}

#[test]
fn zero_epochs_change_nothing() {
    let mut cfg = small_desk(4);
    cfg.train.stage1_epochs = 0;
    let data = Dataset::generate(&cfg.data).unwrap();
    let fresh = ModelState::fresh(arch_for(&cfg, false), 1).unwrap();
    let (after, report) = run_stage(fresh.clone(), &data, &cfg.stage_config(StageKind::SingleTime)).unwrap();
    assert!(report.metrics.is_empty());
    assert_eq!(after, fresh);
}

#[test]
fn fixed_batch_loss_falls() {
    let cfg = RunConfig::desk().pretrain();
    let data = Dataset::generate(&seamo::pretrain::DataConfig { num_scenes: 1, ..cfg.data.clone() }).unwrap();
    for seed in 0..3 {
        let mut model = ModelState::fresh(arch_for(&cfg, true), seed).unwrap();
        let sample = prepare_sample(
            &data,
            0,
            cfg.data.scene.seasons,
            &cfg.data.crop,
            cfg.model.crop_size,
            cfg.model.encoder.patch_size,
            cfg.train.mask_ratio,
            false,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let steps = 50;
        let mut opt = OptimizerState::new(cfg.train.optimizer.clone(), LrSchedule::new(1e-3, 0, steps).unwrap());
        let mut losses = Vec::new();
        for _ in 0..steps {
            let mut s = Session::new(&model.params, Trainable::All);
            let loss = sample_loss(&mut s, &model.arch, &sample).unwrap();
            losses.push(s.tape.value(loss.total).item());
            let g = s.tape.backward(loss.total).unwrap();
            let grads = s.param_grads(&g);
            drop(s);
            opt.step(&mut model.params, &grads).unwrap();
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last <= 0.7 * first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn warm_start_through_checkpoint_matches_memory() {
    let mut cfg = small_desk(8);
    cfg.model.decoder.depth = 1;
    let data = Dataset::generate(&cfg.data).unwrap();
    let fresh = ModelState::fresh(arch_for(&cfg, false), 2).unwrap();
    let (stage1, _) = run_stage(fresh, &data, &cfg.stage_config(StageKind::SingleTime)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    let run = RunConfig { seed: 2, ..RunConfig::desk() };
    save_checkpoint(&path, &Checkpoint { run, state: stage1.clone() }).unwrap();
    let restored = load_checkpoint(&path).unwrap().state;

    let arch2 = arch_for(&cfg, true);
    let a = stage1.warm_start(arch2.clone(), 2).unwrap();
    let b = restored.warm_start(arch2, 2).unwrap();
    assert_eq!(a.params, b.params);
    for (name, t) in stage1.params.iter() {
        assert_eq!(a.params.get(name), Some(t), "{name} not carried over");
    }
    assert!(a.params.names().any(|n| n.starts_with("tm.")));

    let stage2 = cfg.stage_config(StageKind::MultiTime);
    let (ra, la) = run_stage(a, &data, &stage2).unwrap();
    let (rb, lb) = run_stage(b, &data, &stage2).unwrap();
    assert_eq!(la.metrics, lb.metrics);
    assert_eq!(ra.params, rb.params);
}

#[test]
fn same_seed_same_metrics() {
    let cfg = small_desk(6);
    let data = Dataset::generate(&cfg.data).unwrap();
    let a = run_progressive(&cfg, &data, |_, _| Ok(())).unwrap();
    let b = run_progressive(&cfg, &data, |_, _| Ok(())).unwrap();
    assert!(a.metrics().eq(b.metrics()));
    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_progressive(&other, &data, |_, _| Ok(())).unwrap();
    assert!(!a.metrics().eq(c.metrics()));
}

#[test]
fn one_decoder_per_modality_for_any_length() {
    let names = |seasons: usize| -> BTreeSet<String> {
        let mut cfg = RunConfig::desk().pretrain();
        cfg.data.scene.seasons = seasons;
        init_params(&arch_for(&cfg, true), 0).unwrap().names().filter(|n| n.starts_with("decoder.")).cloned().collect()
    };
    let one = names(1);
    assert!(one.iter().any(|n| n.starts_with("decoder.optical.")) && one.iter().any(|n| n.starts_with("decoder.sar.")));
    for t in 2..=4 {
        assert_eq!(names(t), one);
    }
}

#[test]
fn joint_encoding_mixes_modalities() {
    let cfg = EncoderConfig { depth: 1, heads: 2, embed_dim: 8, mlp_ratio: 2.0, patch_size: 4 };
    let mut store = ParamStore::new();
    init_encoder(&mut Init::new(&mut store, 3), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = Session::new(&store, Trainable::Nothing);
    let mut leaf = |s: &mut Session, rows: usize| {
        let d = (0..rows * 8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        s.tape.leaf(Tensor::matrix(rows, 8, d).unwrap(), true).unwrap()
    };
    let vis_o = leaf(&mut s, 4);
    let vis_r = leaf(&mut s, 4);
    let pair = encode(&mut s, &cfg, vis_o, vis_r, 0).unwrap();
    let sq = s.tape.mul(pair.f_o, pair.f_o).unwrap();
    let total = s.tape.sum(sq).unwrap();
    let g = s.tape.backward(total).unwrap();
    let norm: f64 = g.get(vis_r).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
}

fn single_label_split(label: usize, cfg: &SceneConfig) -> SplitData {
    let scenes: Vec<_> = (0..200u64)
        .map(|s| generate_scene(s, cfg).unwrap())
        .filter(|s| s.latent_label == label)
        .take(8)
        .collect();
    let (train, test) = scenes.split_at(4);
    SplitData { train: Dataset::from_scenes(train.to_vec()).unwrap(), test: Dataset::from_scenes(test.to_vec()).unwrap() }
}

#[test]
fn probes_leave_the_encoder_untouched() {
    let cfg = small_desk(4);
    let model = ModelState::fresh(arch_for(&cfg, true), 4).unwrap();
    let before = model.clone();
    let probe = ProbeConfig { n_train: 12, n_test: 12, epochs: 30, ..ProbeConfig::default() };
    let split = SplitData::generate(&probe.split(), &cfg.data.scene).unwrap();
    let lp = evaluate(&probe, &model, &split, 4, 0).unwrap();
    let ft = evaluate(&ProbeConfig { mode: ProbeMode::FineTune, epochs: 2, ..probe.clone() }, &model, &split, 4, 0).unwrap();
    assert_eq!(model, before);
    for r in [&lp, &ft] {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(!r.degenerate);
    }

    let one = single_label_split(2, &cfg.data.scene);
    let r = evaluate(&probe, &model, &one, 4, 0).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn decayed_parameters_exclude_biases_and_norms() {
    let cfg = small_desk(4);
    let params = init_params(&arch_for(&cfg, true), 0).unwrap();
    let decays: BTreeMap<&String, bool> = params.iter().map(|(n, t)| (n, seamo::numerics::decays(n, t))).collect();
    for (name, d) in decays {
        let expect = name.ends_with(".weight");
        assert_eq!(d, expect, "{name}");
    }
}
