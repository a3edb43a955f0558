//! Consistency machinery between teacher and student: confidence filtering,
//! region-level consistency, relational-graph affinities, inter-graph and
//! intra-graph losses.

use alloc::vec;
use alloc::vec::Vec;

use crate::detector::RegionPrediction;
use crate::tape::{cosine_matrix, Tape, Var};
use crate::tensor::Tensor;

/// Per-image relational graph: region predictions plus the symmetric affinity
/// matrix of pairwise cosine similarities between region features.
#[derive(Debug, Clone)]
pub struct RelationalGraph {
    pub vertices: Vec<RegionPrediction>,
    /// |V| x |V| row-major affinity matrix.
    pub affinity: Vec<f64>,
    /// Number of zero-norm feature rows encountered while building the graph.
    pub zero_norm_features: usize,
}

impl RelationalGraph {
    /// Build from predictions and their region features ([n, d] tensor).
    pub fn build(vertices: Vec<RegionPrediction>, features: &Tensor) -> Self {
        assert_eq!(vertices.len(), features.shape()[0]);
        let zero_norm_features = (0..features.shape()[0])
            .filter(|&i| features.row(i).iter().all(|&v| v == 0.0))
            .count();
        let affinity = cosine_matrix(features);
        Self { vertices, affinity, zero_norm_features }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Indices of teacher predictions with foreground confidence >= epsilon,
/// order-preserving.
pub fn confidence_filter(preds: &[RegionPrediction], epsilon: f64) -> Vec<usize> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.confidence >= epsilon)
        .map(|(i, _)| i)
        .collect()
}

/// Plain affinity matrix of [n, d] features (no gradients).
pub fn affinity_matrix(features: &Tensor) -> Vec<f64> {
    cosine_matrix(features)
}

/// Binary matrix marking region pairs with equal pseudo labels.
/// Symmetric with an all-ones diagonal.
pub fn supervision_matrix(pseudo_labels: &[usize]) -> Vec<f64> {
    let n = pseudo_labels.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if pseudo_labels[i] == pseudo_labels[j] {
                m[i * n + j] = 1.0;
            }
        }
    }
    m
}

/// Region-level consistency loss on the tape: mean over regions of the
/// squared L2 distance between student and (constant) teacher distributions.
pub fn region_consistency_loss(tape: &mut Tape, student_dists: Var, teacher_dists: &Tensor) -> Var {
    let n = teacher_dists.shape()[0];
    assert_eq!(tape.value(student_dists).shape(), teacher_dists.shape());
    assert!(n >= 1);
    let t = tape.constant(teacher_dists.clone());
    let diff = tape.sub(student_dists, t);
    let ss = tape.sqsum(diff);
    tape.scale(ss, 1.0 / n as f64)
}

/// Inter-graph loss: squared Frobenius distance between student and teacher
/// affinity matrices, divided by n^2.
pub fn inter_graph_loss(tape: &mut Tape, student_affinity: Var, teacher_affinity: &[f64]) -> Var {
    let shape = tape.value(student_affinity).shape().to_vec();
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[0], shape[1], "affinity matrix must be square");
    let n = shape[0];
    assert_eq!(teacher_affinity.len(), n * n, "affinity shape mismatch");
    let t = tape.constant(Tensor::new(&[n, n], teacher_affinity.to_vec()));
    let diff = tape.sub(student_affinity, t);
    let ss = tape.sqsum(diff);
    tape.scale(ss, 1.0 / (n * n) as f64)
}

/// Intra-graph loss: sum over same-pseudo-label pairs (diagonal excluded) of
/// `1 - E_s`, normalized by the number of such pairs clamped to 1.
pub fn intra_graph_loss(tape: &mut Tape, student_affinity: Var, supervision: &[f64]) -> Var {
    let shape = tape.value(student_affinity).shape().to_vec();
    assert_eq!(shape[0], shape[1]);
    let n = shape[0];
    assert_eq!(supervision.len(), n * n, "supervision shape mismatch");
    // off-diagonal mask
    let mut mask = supervision.to_vec();
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let denom: f64 = mask.iter().sum::<f64>();
    let m = tape.constant(Tensor::new(&[n, n], mask));
    let one_minus = tape.affine(student_affinity, -1.0, 1.0);
    let weighted = tape.mul(one_minus, m);
    let s = tape.sum(weighted);
    tape.scale(s, 1.0 / denom.max(1.0))
}

/// Teacher-side outputs at the shared proposal set, already materialized as
/// plain tensors (detached by construction).
pub struct TeacherOutputs {
    pub preds: Vec<RegionPrediction>,
    /// [n, d] region features.
    pub features: Tensor,
}

/// Student-side tape variables at the same proposals, same order.
pub struct StudentOutputs {
    /// [n, C+1] softmax distributions.
    pub dists: Var,
    /// [n, d] region features.
    pub features: Var,
}

/// Scalar values of the three consistency terms for one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsistencyBreakdown {
    pub rcl: f64,
    pub egl: f64,
    pub agl: f64,
    pub surviving_regions: usize,
}

/// Which consistency terms are enabled (ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub rcl: bool,
    pub egl: bool,
    pub agl: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { rcl: true, egl: true, agl: true }
    }
}

/// Combined consistency forward: applies the confidence filter to teacher
/// predictions, restricts both branches to the surviving indices, and builds
/// the enabled losses on the tape. Returns the summed loss variable (`None`
/// when nothing survives or all terms are disabled) plus the breakdown.
pub fn consistency_forward(
    tape: &mut Tape,
    teacher: &TeacherOutputs,
    student: &StudentOutputs,
    epsilon: f64,
    flags: &LossFlags,
) -> (Option<Var>, ConsistencyBreakdown) {
    assert_eq!(teacher.preds.len(), teacher.features.shape()[0]);
    assert_eq!(teacher.preds.len(), tape.value(student.dists).shape()[0]);
    let keep = confidence_filter(&teacher.preds, epsilon);
    let mut out = ConsistencyBreakdown { surviving_regions: keep.len(), ..Default::default() };
    if keep.is_empty() {
        return (None, out);
    }
    let n = keep.len();
    let c1 = teacher.features.shape()[1];
    let mut terms: Vec<Var> = Vec::new();

    if flags.rcl {
        let width = tape.value(student.dists).shape()[1];
        let t_dists = Tensor::new(
            &[n, width],
            keep.iter().flat_map(|&i| teacher.preds[i].dist.iter().copied()).collect(),
        );
        let s_dists = tape.gather_rows(student.dists, &keep);
        let rcl = region_consistency_loss(tape, s_dists, &t_dists);
        out.rcl = tape.value(rcl).item();
        terms.push(rcl);
    }

    if flags.egl || flags.agl {
        let s_feats = tape.gather_rows(student.features, &keep);
        let s_aff = tape.cosine_rows(s_feats);
        if flags.egl {
            let t_feats = Tensor::new(
                &[n, c1],
                keep.iter().flat_map(|&i| teacher.features.row(i).iter().copied()).collect(),
            );
            let t_aff = affinity_matrix(&t_feats);
            let egl = inter_graph_loss(tape, s_aff, &t_aff);
            out.egl = tape.value(egl).item();
            terms.push(egl);
        }
        if flags.agl {
            let labels: Vec<usize> = keep
                .iter()
                .map(|&i| teacher.preds[i].pseudo_label.expect("foreground pseudo label"))
                .collect();
            let m = supervision_matrix(&labels);
            let agl = intra_graph_loss(tape, s_aff, &m);
            out.agl = tape.value(agl).item();
            terms.push(agl);
        }
    }

    let total = terms.into_iter().reduce(|a, b| tape.add(a, b));
    (total, out)
}
