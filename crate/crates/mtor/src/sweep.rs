//! λ / α sensitivity sweeps: one short adaptation run per value from a
//! shared pre-trained starting point, mAP-vs-value CSV and curve plot.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use mtor_core::consistency::LossFlags;
use mtor_core::detector::{DetectorWeights, ProposalParams};
use mtor_core::ema::ModelPair;
use mtor_core::eval::GroundTruth;
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::dataset::{augment_pair, DomainSample};
use crate::evalcmd::evaluate_split;
use crate::trainer::{step_rng, supervised_step, train_step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lambda" => Ok(Self::Lambda),
            "alpha" => Ok(Self::Alpha),
            other => bail!("unknown sweep parameter '{other}' (expected lambda or alpha)"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Alpha => "alpha",
        }
    }

    pub fn default_values(&self) -> Vec<f64> {
        match self {
            Self::Lambda => vec![0.1, 0.5, 1.0, 2.0, 5.0],
            Self::Alpha => vec![0.92, 0.98, 0.99, 0.999, 0.9999],
        }
    }
}

pub struct SweepPoint {
    pub value: f64,
    pub map: f64,
}

/// Shared pre-training: λ and α only matter during adaptation, so every
/// sweep point adapts from the same supervised starting weights.
fn pretrain(cfg: &ExperimentConfig, source: &[DomainSample]) -> ModelPair {
    let arch = cfg.arch();
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut pair = ModelPair::new(DetectorWeights::init(arch, &mut rng), t.alpha);
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    for step in 0..t.pretrain_steps as u64 {
        let sample = &source[(step as usize) % source.len()];
        supervised_step(&mut pair, sample, t, &props, step);
    }
    pair.teacher = pair.student.clone();
    pair
}

fn adapt_and_eval(
    cfg: &ExperimentConfig,
    base: &ModelPair,
    source: &[DomainSample],
    target: &[DomainSample],
    gts: &[GroundTruth],
) -> f64 {
    let t = &cfg.train;
    let mut pair = base.clone();
    pair.alpha = t.alpha;
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let flags = LossFlags::default();
    for step in 0..t.adapt_steps as u64 {
        let src = &source[(step as usize) % source.len()];
        let tgt = &target[(step as usize) % target.len()];
        let mut rng = step_rng(t.seed, 2, step);
        let views = augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        train_step(
            &mut pair,
            src,
            &views.student_view,
            &views.teacher_view,
            views.size,
            t,
            &props,
            &flags,
            step,
        );
    }
    evaluate_split(&pair.teacher, target, gts, cfg).ap.map
}

/// Run the sweep; `parallel` > 1 evaluates points on worker threads. Points
/// are returned in the requested value order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    parallel: usize,
    source: &[DomainSample],
    target: &[DomainSample],
    gts: &[GroundTruth],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        bail!("sweep values list is empty");
    }
    for &v in values {
        if param == SweepParam::Alpha && !(0.0..1.0).contains(&v) {
            bail!("alpha value {v} outside [0,1)");
        }
        if param == SweepParam::Lambda && v < 0.0 {
            bail!("lambda value {v} must be >= 0");
        }
    }
    let base = pretrain(cfg, source);
    let results: Mutex<Vec<(usize, f64)>> = Mutex::new(Vec::new());
    let jobs: Mutex<std::vec::IntoIter<(usize, f64)>> =
        Mutex::new(values.iter().copied().enumerate().collect::<Vec<_>>().into_iter());
    let workers = parallel.max(1).min(values.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = jobs.lock().unwrap().next();
                let Some((i, v)) = job else { break };
                let mut point_cfg = cfg.clone();
                match param {
                    SweepParam::Lambda => point_cfg.train.lambda = v,
                    SweepParam::Alpha => point_cfg.train.alpha = v,
                }
                let map = adapt_and_eval(&point_cfg, &base, source, target, gts);
                results.lock().unwrap().push((i, map));
            });
        }
    });
    let mut points = results.into_inner().unwrap();
    points.sort_by_key(|&(i, _)| i);
    Ok(points
        .into_iter()
        .map(|(i, map)| SweepPoint { value: values[i], map })
        .collect())
}

pub fn write_sweep_csv(param: SweepParam, points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([param.name(), "map"])?;
    for p in points {
        w.write_record([format!("{}", p.value), format!("{:.6}", p.map)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn plot_sweep(param: SweepParam, points: &[SweepPoint], path: &Path) -> Result<()> {
    crate::plotfont::ensure_fonts();
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    // log-ish x axis via index positions, labeled with the actual values
    let ymax = points.iter().map(|p| p.map).fold(0.05, f64::max) * 1.15;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("target mAP@0.5 vs {}", param.name()), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5f64..points.len() as f64 - 0.5, 0f64..ymax)?;
    chart
        .configure_mesh()
        .x_labels(points.len())
        .x_label_formatter(&|x| {
            let i = x.round() as usize;
            points.get(i).map(|p| format!("{}", p.value)).unwrap_or_default()
        })
        .y_desc("mAP@0.5")
        .draw()?;
    chart.draw_series(LineSeries::new(
        points.iter().enumerate().map(|(i, p)| (i as f64, p.map)),
        BLUE.stroke_width(2),
    ))?;
    chart.draw_series(
        points.iter().enumerate().map(|(i, p)| Circle::new((i as f64, p.map), 4, BLUE.filled())),
    )?;
    root.present().context("writing sweep plot")?;
    fs::metadata(path)?;
    Ok(())
}
