//! Training-dependent properties of the toy model, on shortened schedules.

use intentlab::harness::metrics::smoothness;
use intentlab::harness::pipeline::{init_model, supervised_stage};
use intentlab::harness::{ExperimentConfig, SeedData};
use intentlab::rng::StreamRng;
use intentlab::toy::{Stage, ToyModel};

fn short_config(beta_max: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus_size = 1000;
    cfg.stage1.steps = 600;
    cfg.stage2.steps = 300;
    cfg.prior.beta_max = beta_max;
    cfg
}

fn stage2_model(cfg: &ExperimentConfig, sd: &SeedData) -> ToyModel {
    let seed = sd.seed;
    let mut m = init_model(cfg, seed, cfg.strategy, cfg.grounding).unwrap();
    let s1 = supervised_stage(cfg, &mut m, &sd.data.train, Stage::Stage1, seed, &StreamRng::new(seed, "stage1"))
        .unwrap();
    supervised_stage(cfg, &mut m, &sd.data.train, Stage::Stage2, seed, &s1.next_rng()).unwrap();
    m
}

/// Average ranks, ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn spearman_reference_values() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 40.0, 30.0]) - 0.8).abs() < 1e-12);
}

#[test]
fn intent_means_are_smoother_than_hidden_states() {
    let cfg = short_config(0.5);
    for seed in 0..2 {
        let sd = SeedData::new(&cfg, seed).unwrap();
        let m = stage2_model(&cfg, &sd);
        let (h, z, _) = smoothness(&m, &sd.data.heldout, cfg.prior.alpha).unwrap();
        let z = z.unwrap();
        assert!(z < h, "seed {seed}: smooth_z {z} vs smooth_h {h}");
    }
}

#[test]
fn stronger_bottleneck_lowers_the_ou_residual() {
    let betas = [0.0, 0.1, 0.5, 1.0];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let sd = SeedData::new(&short_config(0.0), seed).unwrap();
        for &b in &betas {
            let cfg = short_config(b);
            let m = stage2_model(&cfg, &sd);
            let (_, _, residual) = smoothness(&m, &sd.data.heldout, cfg.prior.alpha).unwrap();
            xs.push(b);
            ys.push(residual.unwrap());
        }
    }
    let rho = spearman(&xs, &ys);
    assert!(rho < 0.0, "rho {rho}: {ys:?}");
}
