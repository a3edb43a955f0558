//! 2-D mean-teacher demo: supervised reduction, zero-perturbation
//! consistency, and the two-moons smoke test.

use mtor_core::toy2d::{
    consistency_value, decision_raster, toy_train_step, MlpWeights, ToyConfig, ToyPair,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = core::f64::consts::PI * rng.gen_range(0.0..1.0);
        let (x, y, l) = if i % 2 == 0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        pts.push([x + noise * rng.gen_range(-1.0..1.0), y + noise * rng.gen_range(-1.0..1.0)]);
        labels.push(l);
    }
    (pts, labels)
}

#[test]
fn lambda_zero_matches_consistency_disabled_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let init = MlpWeights::init(8, &mut rng);
    let (pts, labels) = two_moons(20, 0.05, &mut rng);
    let labeled = &pts[..4];
    let unlabeled = &pts[4..];

    let run = |cfg: ToyConfig| {
        let mut pair = ToyPair::new(init.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            toy_train_step(&mut pair, labeled, &labels[..4], unlabeled, &cfg, &mut rng);
        }
        pair.student.flat()
    };
    let a = run(ToyConfig { lambda: 0.0, ..Default::default() });
    let b = run(ToyConfig { use_consistency: false, ..Default::default() });
    assert_eq!(a, b, "lambda=0 must reduce to pure supervised updates");
}

#[test]
fn supervised_only_step_matches_hand_sgd() {
    // one labeled point, no unlabeled: the update is plain CE-gradient SGD
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let init = MlpWeights::init(4, &mut rng);
    let cfg = ToyConfig { use_consistency: false, momentum: 0.0, lr: 0.1, ..Default::default() };
    let mut pair = ToyPair::new(init.clone());
    let m = toy_train_step(&mut pair, &[[0.3, -0.2]], &[1], &[], &cfg, &mut rng);
    assert!(m.ce > 0.0);
    assert_eq!(m.consistency, 0.0);
    assert_eq!(m.egl, 0.0);
    assert_eq!(m.agl, 0.0);
    assert!((m.total - m.ce).abs() < 1e-12);
    // finite-difference check of the step direction on one weight
    let eps = 1e-6;
    let ce_at = |w0: f64| {
        let mut w = init.clone();
        w.tensors[0].data_mut()[0] = w0;
        let mut pair = ToyPair::new(w);
        let cfg = ToyConfig { use_consistency: false, momentum: 0.0, lr: 0.0, ..Default::default() };
        toy_train_step(&mut pair, &[[0.3, -0.2]], &[1], &[], &cfg, &mut rng.clone()).ce
    };
    let w0 = init.tensors[0].data()[0];
    let g = (ce_at(w0 + eps) - ce_at(w0 - eps)) / (2.0 * eps);
    let taken = (w0 - pair.student.tensors[0].data()[0]) / cfg.lr;
    assert!((taken - g).abs() < 1e-4, "step {taken} vs numeric grad {g}");
}

#[test]
fn zero_jitter_identical_weights_zero_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pair = ToyPair::new(MlpWeights::init(8, &mut rng));
    let (pts, _) = two_moons(30, 0.05, &mut rng);
    let v = consistency_value(&pair, &pts, 0.0, &mut rng);
    assert_eq!(v, 0.0);
}

#[test]
fn two_moons_consistency_drops_three_seeds() {
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pts, labels) = two_moons(62, 0.08, &mut rng);
        // one labeled point per class: the sample nearest each moon's apex
        let apex = [[0.0, 1.0], [1.0, -0.5]];
        let mut pick = [0usize; 2];
        for c in 0..2 {
            let mut best = f64::INFINITY;
            for (i, (p, &l)) in pts.iter().zip(&labels).enumerate() {
                let d = (p[0] - apex[c][0]).powi(2) + (p[1] - apex[c][1]).powi(2);
                if l == c && d < best {
                    best = d;
                    pick[c] = i;
                }
            }
        }
        let labeled: Vec<[f64; 2]> = pick.iter().map(|&i| pts[i]).collect();
        let lab_labels = vec![0usize, 1];
        let unlabeled: Vec<[f64; 2]> = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| !pick.contains(i))
            .map(|(_, p)| *p)
            .collect();
        let mut pair = ToyPair::new(MlpWeights::init(32, &mut rng));
        let cfg = ToyConfig { jitter: 0.08, lambda: 2.0, lr: 0.05, momentum: 0.5, ..Default::default() };
        // average over several jitter draws: a single draw is too noisy
        let probe_mean = |pair: &ToyPair| {
            let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            (0..32)
                .map(|_| consistency_value(pair, &unlabeled, cfg.jitter, &mut probe))
                .sum::<f64>()
                / 32.0
        };
        let init_c = probe_mean(&pair);
        for _ in 0..2000 {
            toy_train_step(&mut pair, &labeled, &lab_labels, &unlabeled, &cfg, &mut rng);
        }
        let final_c = probe_mean(&pair);
        assert!(
            final_c < init_c,
            "seed {seed}: consistency did not drop ({init_c} -> {final_c})"
        );
    }
}

#[test]
fn graph_losses_populate_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (pts, labels) = two_moons(20, 0.05, &mut rng);
    let mut pair = ToyPair::new(MlpWeights::init(8, &mut rng));
    let cfg = ToyConfig { use_graph: true, ..Default::default() };
    let m = toy_train_step(&mut pair, &pts[..4], &labels[..4], &pts[4..], &cfg, &mut rng);
    assert!(m.egl >= 0.0 && m.agl >= 0.0);
    assert!(
        (m.total - (m.ce + cfg.lambda * (m.consistency + m.egl + m.agl))).abs() < 1e-9,
        "total must recompose from parts"
    );
}

#[test]
fn decision_raster_is_probability_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let w = MlpWeights::init(8, &mut rng);
    let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
    let ys: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
    let r = decision_raster(&w, &xs, &ys);
    assert_eq!(r.len(), 70);
    assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
}
