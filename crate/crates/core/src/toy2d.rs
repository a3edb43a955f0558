//! 2-D toy mean teacher: a tiny MLP classifier pair trained with cross
//! entropy on a few labeled points plus an MSE consistency loss between
//! teacher and student predictions under Gaussian input jitter. Optional
//! graph-consistency terms reuse the same machinery as the detector.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::consistency::{inter_graph_loss, intra_graph_loss, supervision_matrix};
use crate::rng::gaussian;
use crate::tape::{cosine_matrix, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub hidden: usize,
    pub tensors: Vec<Tensor>, // w1 [2,h], b1 [h], w2 [h,2], b2 [2]
}

impl MlpWeights {
    pub fn init<R: RngCore>(hidden: usize, rng: &mut R) -> Self {
        let mk = |shape: &[usize], std: f64, rng: &mut R| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| std * gaussian(rng)).collect())
        };
        let tensors = vec![
            mk(&[2, hidden], 2.0, rng),
            Tensor::zeros(&[hidden]),
            mk(&[hidden, 2], 2.0, rng),
            Tensor::zeros(&[2]),
        ];
        Self { hidden, tensors }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Register weights on the tape; `trainable` controls gradient tracking.
pub fn mlp_vars(tape: &mut Tape, w: &MlpWeights, trainable: bool) -> Vec<Var> {
    w.tensors
        .iter()
        .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

/// Forward pass on [n,2] points: returns (hidden activations, logits, probs).
pub fn mlp_forward(tape: &mut Tape, vars: &[Var], points: Var) -> (Var, Var, Var) {
    let h = tape.matmul(points, vars[0]);
    let h = tape.add_bias(h, vars[1]);
    let h = tape.relu(h);
    let logits = tape.matmul(h, vars[2]);
    let logits = tape.add_bias(logits, vars[3]);
    let probs = tape.softmax_rows(logits);
    (h, logits, probs)
}

#[derive(Debug, Clone, Copy)]
pub struct ToyConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Std of the Gaussian input jitter applied to unlabeled views.
    pub jitter: f64,
    /// Jitter labeled points too (the "augmented source" regime).
    pub augment_labeled: bool,
    pub use_consistency: bool,
    pub use_graph: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.99,
            lr: 0.05,
            momentum: 0.9,
            jitter: 0.15,
            augment_labeled: false,
            use_consistency: true,
            use_graph: false,
        }
    }
}

pub struct ToyPair {
    pub student: MlpWeights,
    pub teacher: MlpWeights,
    pub momentum_buf: Vec<f64>,
    pub step: u64,
}

impl ToyPair {
    pub fn new(student: MlpWeights) -> Self {
        let n = student.flat().len();
        Self { teacher: student.clone(), student, momentum_buf: vec![0.0; n], step: 0 }
    }

    fn ema_update(&mut self, alpha: f64) {
        for (t, s) in self.teacher.tensors.iter_mut().zip(&self.student.tensors) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = alpha * *tv + (1.0 - alpha) * sv;
            }
        }
        self.step += 1;
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyStepMetrics {
    pub ce: f64,
    pub consistency: f64,
    pub egl: f64,
    pub agl: f64,
    pub total: f64,
}

fn jittered(points: &[[f64; 2]], sigma: f64, rng: &mut impl RngCore) -> Tensor {
    let data = points
        .iter()
        .flat_map(|p| [p[0] + sigma * gaussian(rng), p[1] + sigma * gaussian(rng)])
        .collect();
    Tensor::new(&[points.len(), 2], data)
}

/// One training step over the full labeled + unlabeled batch.
pub fn toy_train_step(
    pair: &mut ToyPair,
    labeled: &[[f64; 2]],
    labels: &[usize],
    unlabeled: &[[f64; 2]],
    cfg: &ToyConfig,
    rng: &mut impl RngCore,
) -> ToyStepMetrics {
    assert!(!labeled.is_empty());
    let mut tape = Tape::new();
    let svars = mlp_vars(&mut tape, &pair.student, true);

    let lab_t = if cfg.augment_labeled {
        jittered(labeled, cfg.jitter, rng)
    } else {
        jittered(labeled, 0.0, rng)
    };
    let lab = tape.constant(lab_t);
    let (_, lab_logits, _) = mlp_forward(&mut tape, &svars, lab);
    let mask = vec![true; labels.len()];
    let ce = tape.ce_softmax_mean(lab_logits, labels, &mask);
    let mut metrics = ToyStepMetrics { ce: tape.value(ce).item(), ..Default::default() };
    let mut total = ce;

    if cfg.use_consistency && !unlabeled.is_empty() && cfg.lambda > 0.0 {
        let n = unlabeled.len();
        let student_view = jittered(unlabeled, cfg.jitter, rng);
        let teacher_view = jittered(unlabeled, cfg.jitter, rng);
        // teacher forward with constant weights
        let tvars = mlp_vars(&mut tape, &pair.teacher, false);
        let tv = tape.constant(teacher_view);
        let (t_hidden, _, t_probs) = mlp_forward(&mut tape, &tvars, tv);
        let t_probs_t = tape.value(t_probs).clone();
        let t_hidden_t = tape.value(t_hidden).clone();

        let sv = tape.constant(student_view);
        let (s_hidden, _, s_probs) = mlp_forward(&mut tape, &svars, sv);
        let t_const = tape.constant(t_probs_t.clone());
        let diff = tape.sub(s_probs, t_const);
        let ss = tape.sqsum(diff);
        let cons = tape.scale(ss, cfg.lambda / n as f64);
        metrics.consistency = tape.value(cons).item() / cfg.lambda;
        total = tape.add(total, cons);

        if cfg.use_graph {
            let s_aff = tape.cosine_rows(s_hidden);
            let t_aff = cosine_matrix(&t_hidden_t);
            let egl = inter_graph_loss(&mut tape, s_aff, &t_aff);
            metrics.egl = tape.value(egl).item();
            let egl = tape.scale(egl, cfg.lambda);
            total = tape.add(total, egl);
            let pseudo: Vec<usize> = (0..n)
                .map(|i| if t_probs_t.row(i)[1] > t_probs_t.row(i)[0] { 1 } else { 0 })
                .collect();
            let m = supervision_matrix(&pseudo);
            let agl = intra_graph_loss(&mut tape, s_aff, &m);
            metrics.agl = tape.value(agl).item();
            let agl = tape.scale(agl, cfg.lambda);
            total = tape.add(total, agl);
        }
    }

    metrics.total = tape.value(total).item();
    let grads = tape.backward(total);
    let mut off = 0;
    for (t, v) in pair.student.tensors.iter_mut().zip(&svars) {
        if let Some(g) = grads.get(*v) {
            for (w, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                let m = cfg.momentum * pair.momentum_buf[off] + gv;
                pair.momentum_buf[off] = m;
                *w -= cfg.lr * m;
                off += 1;
            }
        } else {
            off += t.len();
        }
    }
    pair.ema_update(cfg.alpha);
    metrics
}

/// Unlabeled consistency value (no jitter randomness beyond the provided
/// rng): used to compare init vs converged consistency.
pub fn consistency_value(
    pair: &ToyPair,
    unlabeled: &[[f64; 2]],
    jitter: f64,
    rng: &mut impl RngCore,
) -> f64 {
    let mut tape = Tape::new();
    let n = unlabeled.len();
    let svars = mlp_vars(&mut tape, &pair.student, false);
    let tvars = mlp_vars(&mut tape, &pair.teacher, false);
    let sv = tape.constant(jittered(unlabeled, jitter, rng));
    let tv = tape.constant(jittered(unlabeled, jitter, rng));
    let (_, _, sp) = mlp_forward(&mut tape, &svars, sv);
    let (_, _, tp) = mlp_forward(&mut tape, &tvars, tv);
    let sp = tape.value(sp).clone();
    let tp = tape.value(tp).clone();
    sp.data().iter().zip(tp.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
}

/// Probability of class 1 at a grid of points, for boundary rasters.
pub fn decision_raster(
    weights: &MlpWeights,
    xs: &[f64],
    ys: &[f64],
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = mlp_vars(&mut tape, weights, false);
    let mut pts = Vec::with_capacity(xs.len() * ys.len() * 2);
    for &y in ys {
        for &x in xs {
            pts.push(x);
            pts.push(y);
        }
    }
    let n = xs.len() * ys.len();
    let p = tape.constant(Tensor::new(&[n, 2], pts));
    let (_, _, probs) = mlp_forward(&mut tape, &vars, p);
    let probs = tape.value(probs);
    (0..n).map(|i| probs.row(i)[1]).collect()
}
