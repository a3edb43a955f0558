//! Teacher-student weight pair: EMA tracking of the teacher and SGD with
//! momentum and weight decay for the student.

use alloc::vec;
use alloc::vec::Vec;

use crate::detector::DetectorWeights;

/// Student (gradient-trained) and teacher (EMA) weight sets plus the
/// optimizer's momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub student: DetectorWeights,
    pub teacher: DetectorWeights,
    pub alpha: f64,
    pub step: u64,
    pub momentum_buf: Vec<f64>,
}

impl ModelPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: DetectorWeights, alpha: f64) -> Self {
        assert!((0.0..1.0).contains(&alpha), "alpha must be in [0,1)");
        let teacher = student.clone();
        let n = student.num_params();
        Self { student, teacher, alpha, step: 0, momentum_buf: vec![0.0; n] }
    }

    /// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
    /// The student is untouched; the step counter increments.
    pub fn ema_update(&mut self) {
        assert_eq!(self.student.arch, self.teacher.arch, "architecture mismatch");
        for (t, s) in self.teacher.tensors.iter_mut().zip(&self.student.tensors) {
            for (tv, sv) in t.data_mut().iter_mut().zip(sv_iter(s)) {
                *tv = self.alpha * *tv + (1.0 - self.alpha) * sv;
            }
        }
        self.step += 1;
    }

    /// One SGD step on the student from a flat gradient (canonical parameter
    /// order). Teacher weights are not touched.
    pub fn sgd_step(&mut self, flat_grad: &[f64], opt: &SgdParams) {
        assert_eq!(flat_grad.len(), self.momentum_buf.len(), "gradient length mismatch");
        let mut off = 0;
        for t in self.student.tensors.iter_mut() {
            for v in t.data_mut() {
                let g = flat_grad[off] + opt.weight_decay * *v;
                let m = opt.momentum * self.momentum_buf[off] + g;
                self.momentum_buf[off] = m;
                *v -= opt.lr * m;
                off += 1;
            }
        }
    }
}

fn sv_iter(t: &crate::tensor::Tensor) -> impl Iterator<Item = f64> + '_ {
    t.data().iter().copied()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, weight_decay: 5e-4 }
    }
}
