//! Checkpoint evaluation: run the detector over a split, compute AP and the
//! error histogram, export the relational graph at ground-truth boxes, and
//! render the PNG plots.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mtor_core::boxes::{decode_deltas, nms, BoxCorners};
use mtor_core::consistency::affinity_matrix;
use mtor_core::detector::{
    anchor_grid, forward_backbone, rcnn_forward, roi_cells, rpn_forward, rpn_propose,
    DetectorVars, DetectorWeights, ProposalParams,
};
use mtor_core::eval::{
    average_precision, error_analysis, ApReport, Detection, ErrorHistogram, GroundTruth,
};
use mtor_core::tape::Tape;
use mtor_core::tensor::Tensor;
use plotters::prelude::*;

use crate::config::{EvalConfig, ExperimentConfig};
use crate::dataset::DomainSample;

/// Detections for one image: eval-capped proposals, RCNN classification,
/// per-class box decoding, score threshold, per-class NMS.
pub fn detect_image(
    weights: &DetectorWeights,
    sample: &DomainSample,
    image_id: u64,
    props: &ProposalParams,
    eval_cfg: &EvalConfig,
) -> Vec<Detection> {
    let arch = &weights.arch;
    let mut tape = Tape::new();
    let vars = DetectorVars::constants(&mut tape, weights);
    let img = tape.constant(Tensor::new(
        &[3, sample.size, sample.size],
        sample.image.clone(),
    ));
    let fm = forward_backbone(&mut tape, &vars, img);
    let (hf, wf) = {
        let s = tape.value(fm).shape();
        (s[1], s[2])
    };
    let (obj, deltas) = rpn_forward(&mut tape, &vars, fm);
    let anchors = anchor_grid(arch, hf, wf);
    let proposals = rpn_propose(arch, &anchors, tape.value(obj), tape.value(deltas), props);
    if proposals.is_empty() {
        return Vec::new();
    }
    let rects: Vec<BoxCorners> = proposals.iter().map(|p| p.rect).collect();
    let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
    let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
    let (_, dist, reg) = rcnn_forward(&mut tape, &vars, pooled);
    let dist = tape.value(dist).clone();
    let reg = tape.value(reg).clone();
    let size = arch.image_size as f64;

    let mut all = Vec::new();
    for category in 0..arch.num_classes {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, rect) in rects.iter().enumerate() {
            let score = dist.row(i)[category + 1];
            if score < eval_cfg.score_thresh {
                continue;
            }
            boxes.push(decode_deltas(rect, reg.row(i)).clip(size, size));
            scores.push(score);
        }
        for &k in &nms(&boxes, &scores, eval_cfg.nms_iou) {
            if boxes[k].width() > 0.0 && boxes[k].height() > 0.0 {
                all.push(Detection { rect: boxes[k], category, score: scores[k], image_id });
            }
        }
    }
    all
}

pub struct EvalArtifacts {
    pub detections: Vec<Detection>,
    pub ap: ApReport,
    pub errors: ErrorHistogram,
}

pub fn evaluate_split(
    weights: &DetectorWeights,
    samples: &[DomainSample],
    gts: &[GroundTruth],
    cfg: &ExperimentConfig,
) -> EvalArtifacts {
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_eval,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut detections = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        detections.extend(detect_image(weights, s, i as u64, &props, &cfg.eval));
    }
    let ap = average_precision(&detections, gts, cfg.eval.iou_thresh);
    let errors = error_analysis(&detections, gts);
    EvalArtifacts { detections, ap, errors }
}

/// ROI features at the ground-truth boxes of one sample, as a cosine
/// affinity matrix plus the category label row (Fig. 6-style export).
pub fn export_relational_graph(
    weights: &DetectorWeights,
    sample: &DomainSample,
    gts: &[GroundTruth],
    image_id: u64,
) -> (Vec<f64>, Vec<usize>) {
    let arch = &weights.arch;
    let boxes: Vec<BoxCorners> =
        gts.iter().filter(|g| g.image_id == image_id).map(|g| g.rect).collect();
    let labels: Vec<usize> =
        gts.iter().filter(|g| g.image_id == image_id).map(|g| g.category).collect();
    if boxes.is_empty() {
        return (Vec::new(), labels);
    }
    let mut tape = Tape::new();
    let vars = DetectorVars::constants(&mut tape, weights);
    let img = tape.constant(Tensor::new(
        &[3, sample.size, sample.size],
        sample.image.clone(),
    ));
    let fm = forward_backbone(&mut tape, &vars, img);
    let (hf, wf) = {
        let s = tape.value(fm).shape();
        (s[1], s[2])
    };
    let cells = roi_cells(&boxes, hf, wf, arch.roi_grid);
    let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
    (affinity_matrix(tape.value(pooled)), labels)
}

// ---------- CSV artifacts ----------

pub fn write_ap_csv(report: &ApReport, names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "name", "ap"])?;
    for &(c, ap) in &report.per_category {
        w.write_record([c.to_string(), names[c].clone(), format!("{ap:.6}")])?;
    }
    w.write_record(["map".to_string(), String::new(), format!("{:.6}", report.map)])?;
    w.flush()?;
    Ok(())
}

pub fn write_error_csv(hist: &ErrorHistogram, names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "name", "correct_pct", "mislocalized_pct", "background_pct"])?;
    for &(c, co, mi, bg) in &hist.per_category {
        w.write_record([
            c.to_string(),
            names[c].clone(),
            format!("{co:.3}"),
            format!("{mi:.3}"),
            format!("{bg:.3}"),
        ])?;
    }
    w.write_record([
        "mean".into(),
        "".into(),
        format!("{:.3}", hist.mean_correct),
        format!("{:.3}", hist.mean_mislocalized),
        format!("{:.3}", hist.mean_background),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_detections_csv(dets: &[Detection], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "category", "score", "x_min", "y_min", "x_max", "y_max"])?;
    for d in dets {
        w.write_record([
            d.image_id.to_string(),
            d.category.to_string(),
            format!("{:.6}", d.score),
            format!("{:.3}", d.rect.x_min),
            format!("{:.3}", d.rect.y_min),
            format!("{:.3}", d.rect.x_max),
            format!("{:.3}", d.rect.y_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Affinity matrix CSV: first row is the category label row, then the n×n
/// matrix.
pub fn write_graph_csv(matrix: &[f64], labels: &[usize], path: &Path) -> Result<()> {
    let n = labels.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(labels.iter().map(|l| l.to_string()))?;
    for i in 0..n {
        w.write_record((0..n).map(|j| format!("{:.6}", matrix[i * n + j])))?;
    }
    w.flush()?;
    Ok(())
}

// ---------- plots ----------

pub fn plot_ap_bars(report: &ApReport, names: &[String], path: &Path) -> Result<()> {
    crate::plotfont::ensure_fonts();
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = report.per_category.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("AP@0.5 per category (mAP {:.3})", report.map), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n as f64, 0f64..1f64)?;
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = *x as usize;
            report
                .per_category
                .get(i)
                .map(|&(c, _)| names[c].clone())
                .unwrap_or_default()
        })
        .y_desc("AP")
        .draw()?;
    chart.draw_series(report.per_category.iter().enumerate().map(|(i, &(_, ap))| {
        Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, ap)], BLUE.mix(0.6).filled())
    }))?;
    root.present().context("writing AP plot")?;
    Ok(())
}

pub fn plot_error_bars(hist: &ErrorHistogram, path: &Path) -> Result<()> {
    crate::plotfont::ensure_fonts();
    let root = BitMapBackend::new(path, (520, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let vals =
        [hist.mean_correct, hist.mean_mislocalized, hist.mean_background];
    let labels = ["correct", "mislocalized", "background"];
    let colors = [GREEN.mix(0.7), RGBColor(240, 160, 40).mix(0.7), RED.mix(0.7)];
    let mut chart = ChartBuilder::on(&root)
        .caption("Error types of top-K detections (%)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..3f64, 0f64..100f64)?;
    chart
        .configure_mesh()
        .x_labels(3)
        .x_label_formatter(&|x| labels.get(*x as usize).unwrap_or(&"").to_string())
        .y_desc("%")
        .draw()?;
    chart.draw_series((0..3).map(|i| {
        Rectangle::new(
            [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, vals[i])],
            colors[i].clone().filled(),
        )
    }))?;
    root.present().context("writing error plot")?;
    Ok(())
}

pub fn plot_affinity_heatmap(matrix: &[f64], labels: &[usize], path: &Path) -> Result<()> {
    crate::plotfont::ensure_fonts();
    let n = labels.len().max(1);
    let root = BitMapBackend::new(path, (440, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Region affinity (cosine)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(30)
        .build_cartesian_2d(0f64..n as f64, 0f64..n as f64)?;
    chart.configure_mesh().disable_mesh().draw()?;
    chart.draw_series((0..n * n).filter(|&k| k < matrix.len()).map(|k| {
        let (i, j) = (k / n, k % n);
        let v = matrix[k].clamp(-1.0, 1.0);
        let c = ((v + 1.0) / 2.0 * 255.0) as u8;
        Rectangle::new(
            [(j as f64, (n - i) as f64), ((j + 1) as f64, (n - i - 1) as f64)],
            RGBColor(255 - c, 64, c).filled(),
        )
    }))?;
    root.present().context("writing affinity heatmap")?;
    Ok(())
}

/// Full evaluation artifact set for one checkpointed weight set.
pub fn write_eval_artifacts(
    weights: &DetectorWeights,
    samples: &[DomainSample],
    gts: &[GroundTruth],
    names: &[String],
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<EvalArtifacts> {
    fs::create_dir_all(out_dir)?;
    let art = evaluate_split(weights, samples, gts, cfg);
    write_ap_csv(&art.ap, names, &out_dir.join("ap.csv"))?;
    write_error_csv(&art.errors, names, &out_dir.join("errors.csv"))?;
    write_detections_csv(&art.detections, &out_dir.join("detections.csv"))?;
    plot_ap_bars(&art.ap, names, &out_dir.join("ap.png"))?;
    plot_error_bars(&art.errors, &out_dir.join("errors.png"))?;
    // graph export on the first image that has >= 2 GT boxes (fall back to 1)
    let pick = (0..samples.len() as u64)
        .max_by_key(|&id| gts.iter().filter(|g| g.image_id == id).count().min(6))
        .unwrap_or(0);
    if let Some(sample) = samples.get(pick as usize) {
        let (matrix, labels) = export_relational_graph(weights, sample, gts, pick);
        write_graph_csv(&matrix, &labels, &out_dir.join("graph.csv"))?;
        plot_affinity_heatmap(&matrix, &labels, &out_dir.join("graph.png"))?;
    }
    Ok(art)
}
