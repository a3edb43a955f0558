//! Simplified differentiable two-stage detector: small conv backbone, a
//! single-scale RPN, grid-average ROI pooling, and an MLP classification /
//! regression head, plus the supervised detection loss.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::boxes::{decode_deltas, encode_deltas, iou, nms, BoxCorners};
use crate::rng::gaussian;
use crate::tape::{CellRect, Tape, Var};
use crate::tensor::Tensor;

/// Architecture hyperparameters. Two weight sets are combinable only when
/// their configs are equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    /// Channel widths of the four backbone blocks; the first three convs have
    /// stride 2, the last stride 1, so the feature stride is 8.
    pub channels: [usize; 4],
    /// Anchor aspect ratios (height/width).
    pub aspect_ratios: Vec<f64>,
    /// Anchor side length in pixels at ratio 1.
    pub anchor_scale: f64,
    pub roi_grid: usize,
    pub hidden: usize,
    /// Number of foreground categories C; the RCNN head predicts C+1.
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            channels: [16, 32, 48, 64],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            anchor_scale: 40.0,
            roi_grid: 4,
            hidden: 128,
            num_classes: 3,
        }
    }
}

pub const FEATURE_STRIDE: usize = 8;

impl ArchConfig {
    pub fn feature_size(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn pooled_len(&self) -> usize {
        self.roi_grid * self.roi_grid * self.channels[3]
    }

    /// Named parameter shapes, in the canonical flat-view order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3, c4] = self.channels;
        let a = self.num_anchors_per_cell();
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize| {
            v.push((alloc::format!("{name}.w"), vec![o, i, 3, 3]));
            v.push((alloc::format!("{name}.b"), vec![o]));
        };
        conv("conv1", c1, 3);
        conv("conv2", c2, c1);
        conv("conv3", c3, c2);
        conv("conv4", c4, c3);
        v.push((String::from("rpn_obj.w"), vec![a, c4, 1, 1]));
        v.push((String::from("rpn_obj.b"), vec![a]));
        v.push((String::from("rpn_reg.w"), vec![4 * a, c4, 1, 1]));
        v.push((String::from("rpn_reg.b"), vec![4 * a]));
        v.push((String::from("fc1.w"), vec![self.pooled_len(), self.hidden]));
        v.push((String::from("fc1.b"), vec![self.hidden]));
        v.push((String::from("cls.w"), vec![self.hidden, self.num_classes + 1]));
        v.push((String::from("cls.b"), vec![self.num_classes + 1]));
        v.push((String::from("reg.w"), vec![self.hidden, 4]));
        v.push((String::from("reg.b"), vec![4]));
        v
    }
}

/// Full parameter set of one detector (`F_Conv`, `F_RPN`, `F_RCNN`).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub arch: ArchConfig,
    pub tensors: Vec<Tensor>,
}

impl DetectorWeights {
    /// He-style random init; classification/regression output layers start
    /// near zero.
    pub fn init<R: RngCore>(arch: ArchConfig, rng: &mut R) -> Self {
        let shapes = arch.param_shapes();
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[if shape.len() == 2 { 0 } else { 1 }..]
                        .iter()
                        .product::<usize>()
                        / if shape.len() == 2 { shape[1] } else { 1 };
                    let std = if name.starts_with("cls") || name.starts_with("reg") || name.starts_with("rpn") {
                        0.01
                    } else {
                        libm::sqrt(2.0 / fan_in as f64)
                    };
                    Tensor::new(shape, (0..n).map(|_| std * gaussian(rng)).collect())
                }
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Concatenation of all parameters in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild from a flat view; exact inverse of [`Self::flat`].
    pub fn from_flat(arch: ArchConfig, flat: &[f64]) -> Self {
        let shapes = arch.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (_, shape) in &shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[off..off + n].to_vec()));
            off += n;
        }
        assert_eq!(off, flat.len(), "flat view length mismatch");
        Self { arch, tensors }
    }
}

/// Tape handles of all detector parameters for one forward pass.
pub struct DetectorVars {
    pub vars: Vec<Var>,
}

impl DetectorVars {
    /// Register every parameter as a gradient-tracked leaf.
    pub fn leaves(tape: &mut Tape, w: &DetectorWeights) -> Self {
        Self { vars: w.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Register every parameter as a constant (teacher-side forward).
    pub fn constants(tape: &mut Tape, w: &DetectorWeights) -> Self {
        Self { vars: w.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    fn pair(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    pub fn conv(&self, block: usize) -> (Var, Var) {
        self.pair(block)
    }

    pub fn rpn_obj(&self) -> (Var, Var) {
        self.pair(4)
    }

    pub fn rpn_reg(&self) -> (Var, Var) {
        self.pair(5)
    }

    pub fn fc1(&self) -> (Var, Var) {
        self.pair(6)
    }

    pub fn cls(&self) -> (Var, Var) {
        self.pair(7)
    }

    pub fn reg(&self) -> (Var, Var) {
        self.pair(8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionProposal {
    pub rect: BoxCorners,
    pub objectness: f64,
}

/// Per-region classification output. `confidence` and `pseudo_label` are
/// computed over foreground categories only; argmax ties break to the lowest
/// category index.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub dist: Vec<f64>,
    pub confidence: f64,
    pub pseudo_label: Option<usize>,
}

impl RegionPrediction {
    /// Build from a `C+1` distribution (index 0 = background).
    pub fn from_dist(dist: Vec<f64>) -> Self {
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (j, &p) in dist.iter().enumerate().skip(1) {
            if p > best_p {
                best_p = p;
                best = j - 1;
            }
        }
        let (confidence, pseudo_label) =
            if dist.len() > 1 { (best_p, Some(best)) } else { (0.0, None) };
        Self { dist, confidence, pseudo_label }
    }
}

/// Backbone forward: image [3,H,W] -> feature map [c4, H/8, W/8].
pub fn forward_backbone(tape: &mut Tape, vars: &DetectorVars, image: Var) -> Var {
    let shape = tape.value(image).shape().to_vec();
    assert_eq!(shape[0], 3, "expected [3,H,W] image");
    let mut x = image;
    for block in 0..4 {
        let (w, b) = vars.conv(block);
        let stride = if block < 3 { 2 } else { 1 };
        x = tape.conv2d(x, w, b, stride, 1);
        x = tape.relu(x);
    }
    x
}

/// Anchor grid in image coordinates; index = a * (hf*wf) + y * wf + x,
/// matching the channel-major RPN conv output layout.
pub fn anchor_grid(arch: &ArchConfig, hf: usize, wf: usize) -> Vec<BoxCorners> {
    let mut anchors = Vec::with_capacity(arch.aspect_ratios.len() * hf * wf);
    for &ar in &arch.aspect_ratios {
        let h = arch.anchor_scale * libm::sqrt(ar);
        let w = arch.anchor_scale / libm::sqrt(ar);
        for y in 0..hf {
            let cy = (y as f64 + 0.5) * FEATURE_STRIDE as f64;
            for x in 0..wf {
                let cx = (x as f64 + 0.5) * FEATURE_STRIDE as f64;
                anchors.push(BoxCorners::new(
                    cx - 0.5 * w,
                    cy - 0.5 * h,
                    cx + 0.5 * w,
                    cy + 0.5 * h,
                ));
            }
        }
    }
    anchors
}

/// RPN heads on a feature map: objectness logits [n_anchors] and box deltas
/// [n_anchors, 4], anchor-aligned with [`anchor_grid`].
pub fn rpn_forward(tape: &mut Tape, vars: &DetectorVars, fm: Var) -> (Var, Var) {
    let (hf, wf) = {
        let s = tape.value(fm).shape();
        (s[1], s[2])
    };
    let (ow, ob) = vars.rpn_obj();
    let a = tape.value(ow).shape()[0];
    let obj_map = tape.conv2d(fm, ow, ob, 1, 0); // [A, hf, wf]
    let n = a * hf * wf;
    let idx: Vec<usize> = (0..n).collect();
    let obj = tape.reindex(obj_map, &idx, &[n]);
    let (rw, rb) = vars.rpn_reg();
    let reg_map = tape.conv2d(fm, rw, rb, 1, 0); // [4A, hf, wf], channel = a*4+k
    let mut ridx = Vec::with_capacity(n * 4);
    for anchor in 0..a {
        for y in 0..hf {
            for x in 0..wf {
                for k in 0..4 {
                    ridx.push(((anchor * 4 + k) * hf + y) * wf + x);
                }
            }
        }
    }
    let reg = tape.reindex(reg_map, &ridx, &[n, 4]);
    (obj, reg)
}

/// RPN proposal selection parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProposalParams {
    pub cap: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self { cap: 64, nms_iou: 0.7, min_size: 4.0 }
    }
}

/// Decode, clip, NMS-filter and cap RPN outputs into proposals sorted by
/// descending objectness.
pub fn rpn_propose(
    arch: &ArchConfig,
    anchors: &[BoxCorners],
    obj_logits: &Tensor,
    deltas: &Tensor,
    params: &ProposalParams,
) -> Vec<RegionProposal> {
    let size = arch.image_size as f64;
    let mut rects = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let rect = decode_deltas(anchor, deltas.row(i)).clip(size, size);
        rects.push(rect);
        scores.push(crate::tape::sigmoid(obj_logits.data()[i]));
    }
    let mut keep: Vec<usize> = nms(&rects, &scores, params.nms_iou)
        .into_iter()
        .filter(|&i| rects[i].width() >= params.min_size && rects[i].height() >= params.min_size)
        .collect();
    keep.truncate(params.cap);
    keep.into_iter()
        .map(|i| RegionProposal { rect: rects[i], objectness: scores[i] })
        .collect()
}

/// Project proposal boxes onto the feature map as per-cell pooling windows.
/// Boxes smaller than one cell are clamped to a single cell.
pub fn roi_cells(
    proposals: &[BoxCorners],
    hf: usize,
    wf: usize,
    grid: usize,
) -> Vec<Vec<CellRect>> {
    let s = FEATURE_STRIDE as f64;
    proposals
        .iter()
        .map(|b| {
            let fx0 = libm::floor(b.x_min / s).clamp(0.0, (wf - 1) as f64) as usize;
            let fy0 = libm::floor(b.y_min / s).clamp(0.0, (hf - 1) as f64) as usize;
            let fx1 = (libm::ceil(b.x_max / s) as usize).clamp(fx0 + 1, wf);
            let fy1 = (libm::ceil(b.y_max / s) as usize).clamp(fy0 + 1, hf);
            let (fw, fh) = (fx1 - fx0, fy1 - fy0);
            let mut cells = Vec::with_capacity(grid * grid);
            for gy in 0..grid {
                let y0 = fy0 + gy * fh / grid;
                let y1 = (fy0 + (gy + 1) * fh / grid).max(y0 + 1).min(fy1.max(y0 + 1));
                for gx in 0..grid {
                    let x0 = fx0 + gx * fw / grid;
                    let x1 = (fx0 + (gx + 1) * fw / grid).max(x0 + 1).min(fx1.max(x0 + 1));
                    cells.push(CellRect { y0, y1: y1.max(y0 + 1), x0, x1: x1.max(x0 + 1) });
                }
            }
            cells
        })
        .collect()
}

/// ROI features -> (class logits [n,C+1], softmax distributions [n,C+1],
/// box deltas [n,4]).
pub fn rcnn_forward(tape: &mut Tape, vars: &DetectorVars, roi_feats: Var) -> (Var, Var, Var) {
    let (w1, b1) = vars.fc1();
    let h = tape.matmul(roi_feats, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.relu(h);
    let (wc, bc) = vars.cls();
    let logits = tape.matmul(h, wc);
    let logits = tape.add_bias(logits, bc);
    let dist = tape.softmax_rows(logits);
    let (wr, br) = vars.reg();
    let reg = tape.matmul(h, wr);
    let reg = tape.add_bias(reg, br);
    (logits, dist, reg)
}

/// Convert distribution rows into [`RegionPrediction`]s.
pub fn rcnn_classify(dist: &Tensor) -> Vec<RegionPrediction> {
    (0..dist.shape()[0])
        .map(|i| RegionPrediction::from_dist(dist.row(i).to_vec()))
        .collect()
}

/// Anchor-to-GT assignment for RPN training.
/// `Some(true)`/`Some(false)` mark positive/negative anchors, `None` is
/// ignored; `matched[i]` is the GT index for positives.
pub struct AnchorTargets {
    pub label: Vec<Option<bool>>,
    pub matched: Vec<usize>,
}

pub fn match_anchors(
    anchors: &[BoxCorners],
    gts: &[BoxCorners],
    pos_iou: f64,
    neg_iou: f64,
) -> AnchorTargets {
    let n = anchors.len();
    let mut label = vec![Some(false); n];
    let mut matched = vec![0usize; n];
    if gts.is_empty() {
        return AnchorTargets { label, matched };
    }
    let mut best_iou = vec![0.0f64; n];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best_iou[i] {
                best_iou[i] = v;
                matched[i] = j;
            }
        }
    }
    for i in 0..n {
        label[i] = if best_iou[i] >= pos_iou {
            Some(true)
        } else if best_iou[i] < neg_iou {
            Some(false)
        } else {
            None
        };
    }
    // guarantee at least one positive per GT
    for (j, g) in gts.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = -1.0;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best_v > 0.0 {
            label[best] = Some(true);
            matched[best] = j;
        }
    }
    AnchorTargets { label, matched }
}

/// Proposal-to-GT assignment for the RCNN head: per-proposal class target
/// (0 = background, j+1 = foreground j) and regression target deltas.
pub struct ProposalTargets {
    pub class: Vec<usize>,
    pub reg_target: Vec<f64>,
    pub is_fg: Vec<bool>,
}

pub fn match_proposals(
    proposals: &[BoxCorners],
    gts: &[(BoxCorners, usize)],
    pos_iou: f64,
) -> ProposalTargets {
    let n = proposals.len();
    let mut class = vec![0usize; n];
    let mut reg_target = vec![0.0; n * 4];
    let mut is_fg = vec![false; n];
    for (i, p) in proposals.iter().enumerate() {
        let mut best_v = 0.0;
        let mut best_j = None;
        for (j, (g, _)) in gts.iter().enumerate() {
            let v = iou(p, g);
            if v > best_v {
                best_v = v;
                best_j = Some(j);
            }
        }
        if let Some(j) = best_j {
            if best_v >= pos_iou {
                class[i] = gts[j].1 + 1;
                is_fg[i] = true;
                let d = encode_deltas(p, &gts[j].0);
                reg_target[i * 4..i * 4 + 4].copy_from_slice(&d);
            }
        }
    }
    ProposalTargets { class, reg_target, is_fg }
}

/// Per-term values of the supervised loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct SupLossBreakdown {
    pub rpn_obj: f64,
    pub rpn_reg: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
}

impl SupLossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn_obj + self.rpn_reg + self.rcnn_cls + self.rcnn_reg
    }
}

/// Matching thresholds of the supervised loss.
#[derive(Debug, Clone, Copy)]
pub struct SupLossParams {
    pub anchor_pos_iou: f64,
    pub anchor_neg_iou: f64,
    pub rcnn_pos_iou: f64,
}

impl Default for SupLossParams {
    fn default() -> Self {
        Self { anchor_pos_iou: 0.7, anchor_neg_iou: 0.3, rcnn_pos_iou: 0.5 }
    }
}

/// Assemble the four supervised loss heads on the tape. All inputs are tape
/// variables from the student forward; targets are constants.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss(
    tape: &mut Tape,
    anchors: &[BoxCorners],
    rpn_obj_logits: Var,
    rpn_deltas: Var,
    proposals: &[BoxCorners],
    rcnn_logits: Var,
    rcnn_reg: Var,
    gts: &[(BoxCorners, usize)],
    params: &SupLossParams,
) -> (Var, SupLossBreakdown) {
    let gt_boxes: Vec<BoxCorners> = gts.iter().map(|(b, _)| *b).collect();
    let at = match_anchors(anchors, &gt_boxes, params.anchor_pos_iou, params.anchor_neg_iou);
    let obj_targets: Vec<f64> =
        at.label.iter().map(|l| if *l == Some(true) { 1.0 } else { 0.0 }).collect();
    let obj_mask: Vec<bool> = at.label.iter().map(|l| l.is_some()).collect();
    let rpn_obj = tape.bce_logits_mean(rpn_obj_logits, &obj_targets, &obj_mask);

    let mut rpn_reg_target = vec![0.0; anchors.len() * 4];
    let mut rpn_pos = vec![false; anchors.len()];
    for i in 0..anchors.len() {
        if at.label[i] == Some(true) {
            rpn_pos[i] = true;
            let d = encode_deltas(&anchors[i], &gt_boxes[at.matched[i]]);
            rpn_reg_target[i * 4..i * 4 + 4].copy_from_slice(&d);
        }
    }
    let rpn_reg = tape.smooth_l1_mean(rpn_deltas, &rpn_reg_target, &rpn_pos);

    let pt = match_proposals(proposals, gts, params.rcnn_pos_iou);
    let all = vec![true; proposals.len()];
    let rcnn_cls = tape.ce_softmax_mean(rcnn_logits, &pt.class, &all);
    let rcnn_reg = tape.smooth_l1_mean(rcnn_reg, &pt.reg_target, &pt.is_fg);

    let breakdown = SupLossBreakdown {
        rpn_obj: tape.value(rpn_obj).item(),
        rpn_reg: tape.value(rpn_reg).item(),
        rcnn_cls: tape.value(rcnn_cls).item(),
        rcnn_reg: tape.value(rcnn_reg).item(),
    };
    let s1 = tape.add(rpn_obj, rpn_reg);
    let s2 = tape.add(rcnn_cls, rcnn_reg);
    let total = tape.add(s1, s2);
    (total, breakdown)
}
