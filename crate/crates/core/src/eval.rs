//! Detection evaluation: per-category average precision at a fixed IoU
//! threshold, and error-type analysis of the highest-confident detections.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{iou, BoxCorners};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rect: BoxCorners,
    pub category: usize,
    pub score: f64,
    pub image_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rect: BoxCorners,
    pub category: usize,
    pub image_id: u64,
}

/// AP of the categories that have at least one ground-truth box, plus the
/// mean over them. Categories present in detections but without GT are
/// reported in `empty_categories` and excluded from the mean.
#[derive(Debug, Clone, Default)]
pub struct ApReport {
    /// (category, AP) for categories with >= 1 GT, ascending by category.
    pub per_category: Vec<(usize, f64)>,
    pub map: f64,
    pub empty_categories: Vec<usize>,
}

/// Deterministic detection order: score descending, then image id, then box
/// coordinates. Makes the result independent of input order up to exact
/// duplicates.
fn sort_dets(dets: &mut [&Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.rect.x_min.partial_cmp(&b.rect.x_min).unwrap_or(core::cmp::Ordering::Equal))
            .then(a.rect.y_min.partial_cmp(&b.rect.y_min).unwrap_or(core::cmp::Ordering::Equal))
    });
}

/// All-point interpolated AP for one category with greedy score-ordered
/// matching; each GT matches at most one detection.
fn category_ap(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.to_vec();
    sort_dets(&mut order);
    let mut matched = vec![false; gts.len()];
    let mut tps: Vec<bool> = Vec::with_capacity(order.len());
    for d in &order {
        let mut best = (0.0, None);
        for (j, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id || matched[j] {
                continue;
            }
            let v = iou(&d.rect, &g.rect);
            if v > best.0 {
                best = (v, Some(j));
            }
        }
        match best {
            (v, Some(j)) if v >= iou_thresh => {
                matched[j] = true;
                tps.push(true);
            }
            _ => tps.push(false),
        }
    }
    // precision/recall points
    let npos = gts.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recalls = Vec::with_capacity(tps.len());
    let mut precisions = Vec::with_capacity(tps.len());
    for &is_tp in &tps {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recalls.push(tp / npos);
        precisions.push(tp / (tp + fp));
    }
    // area under the monotone precision envelope
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        let env = precisions[i..].iter().cloned().fold(0.0, f64::max);
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * env;
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Per-category AP and mAP at the given IoU threshold (detection order is
/// irrelevant; sorting is internal).
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ApReport {
    let cats: BTreeSet<usize> =
        gts.iter().map(|g| g.category).chain(dets.iter().map(|d| d.category)).collect();
    let mut report = ApReport::default();
    let mut sum = 0.0;
    for &c in &cats {
        let cgts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        if cgts.is_empty() {
            report.empty_categories.push(c);
            continue;
        }
        let cdets: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
        let ap = category_ap(&cdets, &cgts, iou_thresh);
        sum += ap;
        report.per_category.push((c, ap));
    }
    if !report.per_category.is_empty() {
        report.map = sum / report.per_category.len() as f64;
    }
    report
}

/// Error-type percentages of the top-K most confident detections per
/// category (K = number of GT boxes of that category).
#[derive(Debug, Clone, Default)]
pub struct ErrorHistogram {
    /// (category, correct %, mislocalized %, background %).
    pub per_category: Vec<(usize, f64, f64, f64)>,
    pub mean_correct: f64,
    pub mean_mislocalized: f64,
    pub mean_background: f64,
}

/// Bin detections as correct (IoU >= 0.5), mislocalized (0.3 <= IoU < 0.5)
/// or background (IoU < 0.3) against the best-overlapping same-category GT.
/// Missing detections (fewer than K available) count as background.
pub fn error_analysis(dets: &[Detection], gts: &[GroundTruth]) -> ErrorHistogram {
    let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    let mut hist = ErrorHistogram::default();
    let (mut sc, mut sm, mut sb) = (0.0, 0.0, 0.0);
    for &c in &cats {
        let cgts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        let k = cgts.len();
        let mut cdets: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
        sort_dets(&mut cdets);
        cdets.truncate(k);
        let (mut correct, mut misloc, mut background) = (0usize, 0usize, 0usize);
        for d in &cdets {
            let best = cgts
                .iter()
                .filter(|g| g.image_id == d.image_id)
                .map(|g| iou(&d.rect, &g.rect))
                .fold(0.0, f64::max);
            if best >= 0.5 {
                correct += 1;
            } else if best >= 0.3 {
                misloc += 1;
            } else {
                background += 1;
            }
        }
        background += k - cdets.len();
        let kf = k as f64;
        let (pc, pm, pb) = (
            100.0 * correct as f64 / kf,
            100.0 * misloc as f64 / kf,
            100.0 * background as f64 / kf,
        );
        sc += pc;
        sm += pm;
        sb += pb;
        hist.per_category.push((c, pc, pm, pb));
    }
    let n = hist.per_category.len().max(1) as f64;
    hist.mean_correct = sc / n;
    hist.mean_mislocalized = sm / n;
    hist.mean_background = sb / n;
    hist
}
