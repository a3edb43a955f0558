//! Two-moons mean-teacher demo: trains the four regimes (no regularization,
//! augmented source, mean teacher, graph-consistency) and emits decision
//! boundary rasters as CSV + PNG.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mtor_core::toy2d::{
    consistency_value, decision_raster, toy_train_step, MlpWeights, ToyConfig, ToyPair,
};
use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 80;

pub fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = std::f64::consts::PI * rng.gen_range(0.0..1.0);
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

/// Pick the sample nearest each moon apex as the labeled point of its class.
pub fn split_labeled(
    pts: &[[f64; 2]],
    labels: &[usize],
) -> (Vec<[f64; 2]>, Vec<usize>, Vec<[f64; 2]>) {
    let apex = [[0.0, 1.0], [1.0, -0.5]];
    let mut pick = [0usize; 2];
    for c in 0..2 {
        let mut best = f64::INFINITY;
        for (i, (p, &l)) in pts.iter().zip(labels).enumerate() {
            let d = (p[0] - apex[c][0]).powi(2) + (p[1] - apex[c][1]).powi(2);
            if l == c && d < best {
                best = d;
                pick[c] = i;
            }
        }
    }
    let labeled: Vec<[f64; 2]> = pick.iter().map(|&i| pts[i]).collect();
    let unlabeled: Vec<[f64; 2]> =
        pts.iter().enumerate().filter(|(i, _)| !pick.contains(i)).map(|(_, p)| *p).collect();
    (labeled, vec![0, 1], unlabeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    NoReg,
    AugmentedSource,
    MeanTeacher,
    GraphConsistency,
}

impl Regime {
    pub const ALL: [Regime; 4] =
        [Regime::NoReg, Regime::AugmentedSource, Regime::MeanTeacher, Regime::GraphConsistency];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::NoReg => "no_reg",
            Regime::AugmentedSource => "augmented_source",
            Regime::MeanTeacher => "mean_teacher",
            Regime::GraphConsistency => "graph_consistency",
        }
    }

    fn config(&self) -> ToyConfig {
        let base = ToyConfig {
            jitter: 0.08,
            lambda: 2.0,
            lr: 0.05,
            momentum: 0.5,
            ..Default::default()
        };
        match self {
            Regime::NoReg => ToyConfig { use_consistency: false, ..base },
            Regime::AugmentedSource => {
                ToyConfig { use_consistency: false, augment_labeled: true, ..base }
            }
            Regime::MeanTeacher => base,
            Regime::GraphConsistency => ToyConfig { use_graph: true, ..base },
        }
    }
}

pub struct RegimeResult {
    pub regime: Regime,
    pub init_consistency: f64,
    pub final_consistency: f64,
    pub raster: Vec<f64>,
}

pub fn run_regime(regime: Regime, seed: u64, steps: usize) -> RegimeResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, labels) = two_moons(62, 0.08, &mut rng);
    let (labeled, lab_labels, unlabeled) = split_labeled(&pts, &labels);
    let mut pair = ToyPair::new(MlpWeights::init(32, &mut rng));
    let cfg = regime.config();
    let probe = |pair: &ToyPair| {
        let mut pr = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        (0..32).map(|_| consistency_value(pair, &unlabeled, cfg.jitter, &mut pr)).sum::<f64>()
            / 32.0
    };
    let init_consistency = probe(&pair);
    for _ in 0..steps {
        toy_train_step(&mut pair, &labeled, &lab_labels, &unlabeled, &cfg, &mut rng);
    }
    let final_consistency = probe(&pair);
    let axis: Vec<f64> = (0..GRID).map(|i| -1.8 + 3.8 * i as f64 / (GRID - 1) as f64).collect();
    let raster = decision_raster(&pair.student, &axis, &axis);
    RegimeResult { regime, init_consistency, final_consistency, raster }
}

fn axis() -> Vec<f64> {
    (0..GRID).map(|i| -1.8 + 3.8 * i as f64 / (GRID - 1) as f64).collect()
}

pub fn write_raster_csv(result: &RegimeResult, path: &Path) -> Result<()> {
    let ax = axis();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "p_class1"])?;
    for (iy, &y) in ax.iter().enumerate() {
        for (ix, &x) in ax.iter().enumerate() {
            w.write_record([
                format!("{x:.4}"),
                format!("{y:.4}"),
                format!("{:.6}", result.raster[iy * GRID + ix]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn plot_raster(
    result: &RegimeResult,
    pts: &[[f64; 2]],
    labels: &[usize],
    path: &Path,
) -> Result<()> {
    crate::plotfont::ensure_fonts();
    let ax = axis();
    let root = BitMapBackend::new(path, (480, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(result.regime.name(), ("sans-serif", 22))
        .margin(8)
        .x_label_area_size(24)
        .y_label_area_size(30)
        .build_cartesian_2d(-1.8f64..2.0, -1.8f64..2.0)?;
    chart.configure_mesh().disable_mesh().draw()?;
    let cell = 3.8 / (GRID - 1) as f64;
    chart.draw_series((0..GRID * GRID).map(|k| {
        let (iy, ix) = (k / GRID, k % GRID);
        let p = result.raster[k];
        let c = (p * 255.0) as u8;
        Rectangle::new(
            [(ax[ix], ax[iy]), (ax[ix] + cell, ax[iy] + cell)],
            RGBColor(255 - c, 200, c).mix(0.6).filled(),
        )
    }))?;
    chart.draw_series(pts.iter().zip(labels).map(|(p, &l)| {
        let color = if l == 0 { RED.filled() } else { BLUE.filled() };
        Circle::new((p[0], p[1]), 3, color)
    }))?;
    root.present().context("writing demo raster plot")?;
    Ok(())
}

/// Run all four regimes and emit rasters + a consistency summary CSV.
pub fn run_demo(seed: u64, steps: usize, out_dir: &Path) -> Result<Vec<RegimeResult>> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, labels) = two_moons(62, 0.08, &mut rng);
    let mut results = Vec::new();
    for regime in Regime::ALL {
        let r = run_regime(regime, seed, steps);
        write_raster_csv(&r, &out_dir.join(format!("{}.csv", regime.name())))?;
        plot_raster(&r, &pts, &labels, &out_dir.join(format!("{}.png", regime.name())))?;
        results.push(r);
    }
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    w.write_record(["regime", "init_consistency", "final_consistency"])?;
    for r in &results {
        w.write_record([
            r.regime.name().to_string(),
            format!("{:.6}", r.init_consistency),
            format!("{:.6}", r.final_consistency),
        ])?;
    }
    w.flush()?;
    Ok(results)
}
