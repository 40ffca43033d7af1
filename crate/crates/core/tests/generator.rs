use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seamo::downstream::{fit_linear_probe, ProbeConfig};
use seamo::synthdata::{generate_scene, latent_fields, sample_crops, CropStrategy, SceneConfig};

/// Mean structure-tensor entries of the first season's latent field.
fn oracle_features(seed: u64, cfg: &SceneConfig) -> (Vec<f64>, usize) {
    let lat = latent_fields(seed, cfg).unwrap();
    let (h, w) = (cfg.height, cfg.width);
    let f = &lat.fields[0];
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = f[y * w + x + 1] - f[y * w + x];
            let gy = f[(y + 1) * w + x] - f[y * w + x];
            xx += gx * gx;
            yy += gy * gy;
            xy += gx * gy;
        }
    }
    let n = ((h - 1) * (w - 1)) as f64;
    (vec![xx / n, yy / n, xy / n], lat.label)
}

#[test]
fn oracle_probe_separates_classes() {
    let cfg = SceneConfig::default();
    let (xtr, ytr): (Vec<_>, Vec<_>) = (0..200).map(|s| oracle_features(s, &cfg)).unzip();
    let (xte, yte): (Vec<_>, Vec<_>) = (200..400).map(|s| oracle_features(s, &cfg)).unzip();
    let (test, _) = fit_linear_probe(&xtr, &ytr, &xte, &yte, cfg.num_classes, &ProbeConfig::default()).unwrap();
    assert!(test >= 0.95, "oracle accuracy {test}");
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn consecutive_seasons_are_correlated() {
    let cfg = SceneConfig::default();
    let mean = (0..100)
        .map(|s| {
            let lat = latent_fields(s, &cfg).unwrap();
            correlation(&lat.fields[0], &lat.fields[1])
        })
        .sum::<f64>()
        / 100.0;
    assert!(mean > 0.5, "mean correlation {mean}");
}

#[test]
fn sar_tracks_optical_structure() {
    let cfg = SceneConfig::default();
    let mean = (0..20)
        .map(|s| {
            let scene = generate_scene(s, &cfg).unwrap();
            let lat = latent_fields(s, &cfg).unwrap();
            correlation(scene.sar[0].channel(0), &lat.fields[0]).abs()
        })
        .sum::<f64>()
        / 20.0;
    assert!(mean > 0.3, "SAR / latent correlation {mean}");
}

#[test]
fn wide_rates_reach_zero_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let strategy = CropStrategy::partial_overlap(0.25, 1.0);
    let disjoint = (0..1000).any(|_| {
        let w = sample_crops(4, 264, 264, &strategy, 128, 128, &mut rng).unwrap();
        (0..4).any(|a| (a + 1..4).any(|b| w[a].intersection_area(&w[b]) == 0))
    });
    assert!(disjoint);
}

#[test]
fn paper_geometry_overlap_above_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let w = sample_crops(4, 264, 264, &CropStrategy::partial_overlap(0.51, 1.0), 128, 128, &mut rng).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(w[a].intersection_area(&w[b]) > 0);
            }
        }
    }
}
