//! Tape-based reverse-mode autograd over [`Tensor`].
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Leaves are
//! gradient-tracked, constants are not: anything entered with
//! [`Tape::constant`] structurally receives no gradient, which is how
//! teacher-side outputs are kept out of the gradient flow.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Handle to the node at a raw tape index.
    pub fn from_raw(index: usize) -> Self {
        Var(index)
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

/// Integer cell window of a pooled ROI grid cell, in feature-map coordinates.
/// Half-open in both axes; always at least one cell wide and tall.
#[derive(Debug, Clone, Copy)]
pub struct CellRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// k * a + b, elementwise with scalar k and b.
    Affine { a: usize, k: f64 },
    Sum(usize),
    /// Sum of squared entries.
    SqSum(usize),
    Relu(usize),
    Sigmoid(usize),
    /// a: [n,k] x b: [k,m] -> [n,m]
    MatMul(usize, usize),
    /// a: [n,m] + bias: [m], broadcast over rows.
    AddBias(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    SoftmaxRows(usize),
    GatherRows { a: usize, idx: Vec<usize> },
    /// output[i] = input[idx[i]] with an arbitrary output shape.
    Reindex { a: usize, idx: Vec<usize> },
    /// Average pooling of `grid*grid` cells per ROI over a [C,H,W] map.
    RoiAvgPool { fm: usize, cells: Vec<Vec<CellRect>>, grid: usize },
    /// Pairwise cosine similarity of the rows of [n,d] -> [n,n].
    CosineRows(usize),
    BceLogitsMean { logits: usize, targets: Vec<f64>, mask: Vec<bool> },
    CeSoftmaxMean { logits: usize, labels: Vec<usize>, mask: Vec<bool> },
    SmoothL1Mean { pred: usize, target: Vec<f64>, row_mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient if the variable is grad-tracked and reached by the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    pub fn wrt(&self, v: Var) -> &Tensor {
        self.g[v.0].as_ref().expect("no gradient recorded for variable")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { requires_grad: true })
    }

    /// Input treated as a constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { requires_grad: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    /// Elementwise `k * a + b`.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| k * x + b).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Affine { a: a.0, k })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn sqsum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SqSum(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push(t, Op::Sigmoid(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let av = ta.data()[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data()[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Tensor::new(&[n, m], out), Op::MatMul(a.0, b.0))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(ta.shape().len(), 2);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(tb.shape(), &[m]);
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tb.data()[j];
            }
        }
        self.push(Tensor::new(&[n, m], data), Op::AddBias(a.0, bias.0))
    }

    /// 2-D convolution: x [C,H,W], w [O,C,kh,kw], b [O] -> [O,Ho,Wo].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw, tb) =
            (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (c_in, h, wi) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, c_in2, kh, kw) =
            (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        assert_eq!(c_in, c_in2, "conv2d channel mismatch");
        assert_eq!(tb.shape(), &[c_out]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            let base_o = o * ho * wo;
            let bv = tb.data()[o];
            for v in &mut out[base_o..base_o + ho * wo] {
                *v = bv;
            }
            for c in 0..c_in {
                let xc = &tx.data()[c * h * wi..(c + 1) * h * wi];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = tw.data()[((o * c_in + c) * kh + i) * kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride + i) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xc[ih as usize * wi..(ih as usize + 1) * wi];
                            let orow = &mut out[base_o + oh * wo..base_o + (oh + 1) * wo];
                            for ow in 0..wo {
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                orow[ow] += wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[c_out, ho, wo], out),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// Row-wise softmax of [n,m].
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().len(), 2);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            softmax_into(&ta.data()[i * m..(i + 1) * m], &mut out[i * m..(i + 1) * m]);
        }
        self.push(Tensor::new(&[n, m], out), Op::SoftmaxRows(a.0))
    }

    /// Select rows of a 2-D tensor; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().len(), 2);
        let m = ta.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        self.push(
            Tensor::new(&[idx.len(), m], data),
            Op::GatherRows { a: a.0, idx: idx.to_vec() },
        )
    }

    /// Arbitrary element gather: out[i] = a[idx[i]], reshaped to `shape`.
    pub fn reindex(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(shape.iter().product::<usize>(), idx.len());
        let data = idx.iter().map(|&i| ta.data()[i]).collect();
        self.push(Tensor::new(shape, data), Op::Reindex { a: a.0, idx: idx.to_vec() })
    }

    /// Average-pool each ROI's grid of cells from a [C,H,W] feature map.
    /// `cells[r]` holds `grid*grid` windows (row-major over the grid); the
    /// output row layout is `[(gy*grid+gx)*C + c]`.
    pub fn roi_avg_pool(&mut self, fm: Var, cells: Vec<Vec<CellRect>>, grid: usize) -> Var {
        let tf = &self.nodes[fm.0].value;
        let (c_ch, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
        let n = cells.len();
        let d = grid * grid * c_ch;
        let mut out = vec![0.0; n * d];
        for (r, roi) in cells.iter().enumerate() {
            assert_eq!(roi.len(), grid * grid);
            for (g, rect) in roi.iter().enumerate() {
                debug_assert!(rect.y1 > rect.y0 && rect.x1 > rect.x0);
                debug_assert!(rect.y1 <= h && rect.x1 <= w);
                let area = ((rect.y1 - rect.y0) * (rect.x1 - rect.x0)) as f64;
                for c in 0..c_ch {
                    let mut s = 0.0;
                    for y in rect.y0..rect.y1 {
                        let row = &tf.data()[c * h * w + y * w..c * h * w + (y + 1) * w];
                        for x in rect.x0..rect.x1 {
                            s += row[x];
                        }
                    }
                    out[r * d + g * c_ch + c] = s / area;
                }
            }
        }
        self.push(Tensor::new(&[n, d], out), Op::RoiAvgPool { fm: fm.0, cells, grid })
    }

    /// Pairwise cosine similarity between the rows of [n,d]: symmetric [n,n]
    /// with unit diagonal. Zero-norm rows get 0 off-diagonal, 1 on the
    /// diagonal, and a zero gradient.
    pub fn cosine_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().len(), 2);
        let n = ta.shape()[0];
        let out = cosine_matrix(ta);
        self.push(Tensor::new(&[n, n], out), Op::CosineRows(a.0))
    }

    /// Mean binary cross-entropy with logits over masked entries.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Var {
        let tl = &self.nodes[logits.0].value;
        assert_eq!(tl.len(), targets.len());
        assert_eq!(tl.len(), mask.len());
        let cnt = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut s = 0.0;
        for ((&z, &y), &m) in tl.data().iter().zip(targets).zip(mask) {
            if m {
                // max(z,0) - z*y + ln(1 + e^{-|z|})
                s += z.max(0.0) - z * y + libm::log(1.0 + libm::exp(-libm::fabs(z)));
            }
        }
        self.push(
            Tensor::scalar(s / cnt),
            Op::BceLogitsMean { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec() },
        )
    }

    /// Mean softmax cross-entropy over masked rows of [n,m] logits.
    pub fn ce_softmax_mean(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Var {
        let tl = &self.nodes[logits.0].value;
        let (n, m) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(labels.len(), n);
        assert_eq!(mask.len(), n);
        let cnt = mask.iter().filter(|&&x| x).count().max(1) as f64;
        let mut s = 0.0;
        let mut p = vec![0.0; m];
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &tl.data()[i * m..(i + 1) * m];
            softmax_into(row, &mut p);
            s -= libm::log(p[labels[i]].max(1e-300));
        }
        self.push(
            Tensor::scalar(s / cnt),
            Op::CeSoftmaxMean { logits: logits.0, labels: labels.to_vec(), mask: mask.to_vec() },
        )
    }

    /// Smooth-L1 (Huber, delta 1) regression loss: sum over masked rows of
    /// [n,k], divided by the number of masked rows (clamped to 1).
    pub fn smooth_l1_mean(&mut self, pred: Var, target: &[f64], row_mask: &[bool]) -> Var {
        let tp = &self.nodes[pred.0].value;
        let (n, k) = (tp.shape()[0], tp.shape()[1]);
        assert_eq!(target.len(), n * k);
        assert_eq!(row_mask.len(), n);
        let cnt = row_mask.iter().filter(|&&x| x).count().max(1) as f64;
        let mut s = 0.0;
        for i in 0..n {
            if !row_mask[i] {
                continue;
            }
            for j in 0..k {
                let d = tp.data()[i * k + j] - target[i * k + j];
                let a = libm::fabs(d);
                s += if a < 1.0 { 0.5 * d * d } else { a - 0.5 };
            }
        }
        self.push(
            Tensor::scalar(s / cnt),
            Op::SmoothL1Mean { pred: pred.0, target: target.to_vec(), row_mask: row_mask.to_vec() },
        )
    }

    /// Reverse pass from a scalar loss. Constants receive no gradient.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(dy) = g[id].take() else { continue };
            self.accumulate(id, &dy, &mut g);
            g[id] = Some(dy);
        }
        // drop gradients of non-tracked nodes so only leaves report
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: false } = node.op {
                g[id] = None;
            }
        }
        Grads { g }
    }

    fn accumulate(&self, id: usize, dy: &Tensor, g: &mut [Option<Tensor>]) {
        let add_to = |g: &mut [Option<Tensor>], pid: usize, contrib: &[(usize, f64)]| {
            let shape = self.nodes[pid].value.shape().to_vec();
            let slot = g[pid].get_or_insert_with(|| Tensor::zeros(&shape));
            let d = slot.data_mut();
            for &(i, v) in contrib {
                d[i] += v;
            }
        };
        // dense accumulate helper
        let add_dense = |g: &mut [Option<Tensor>], pid: usize, contrib: Tensor| {
            match &mut g[pid] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_dense(g, *a, dy.clone());
                add_dense(g, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                add_dense(g, *a, dy.clone());
                let neg = Tensor::new(dy.shape(), dy.data().iter().map(|v| -v).collect());
                add_dense(g, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(tb.data()).map(|(d, v)| d * v).collect(),
                );
                let db = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(ta.data()).map(|(d, v)| d * v).collect(),
                );
                add_dense(g, *a, da);
                add_dense(g, *b, db);
            }
            Op::Affine { a, k } => {
                let da = Tensor::new(dy.shape(), dy.data().iter().map(|d| d * k).collect());
                add_dense(g, *a, da);
            }
            Op::Sum(a) => {
                let s = dy.item();
                let ta = &self.nodes[*a].value;
                add_dense(g, *a, Tensor::full(ta.shape(), s));
            }
            Op::SqSum(a) => {
                let s = dy.item();
                let ta = &self.nodes[*a].value;
                let da = Tensor::new(ta.shape(), ta.data().iter().map(|v| 2.0 * s * v).collect());
                add_dense(g, *a, da);
            }
            Op::Relu(a) => {
                let ta = &self.nodes[*a].value;
                let da = Tensor::new(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
                add_dense(g, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(y.data()).map(|(d, &s)| d * s * (1.0 - s)).collect(),
                );
                add_dense(g, *a, da);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                // da = dy (.) b^T ; db = a^T (.) dy
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let drow = &dy.data()[i * m..(i + 1) * m];
                    for l in 0..k {
                        let brow = &tb.data()[l * m..(l + 1) * m];
                        let mut s = 0.0;
                        for j in 0..m {
                            s += drow[j] * brow[j];
                        }
                        da[i * k + l] = s;
                        let av = ta.data()[i * k + l];
                        if av != 0.0 {
                            let dbrow = &mut db[l * m..(l + 1) * m];
                            for j in 0..m {
                                dbrow[j] += av * drow[j];
                            }
                        }
                    }
                }
                add_dense(g, *a, Tensor::new(&[n, k], da));
                add_dense(g, *b, Tensor::new(&[k, m], db));
            }
            Op::AddBias(a, bias) => {
                add_dense(g, *a, dy.clone());
                let m = self.nodes[*bias].value.len();
                let n = dy.len() / m;
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += dy.data()[i * m + j];
                    }
                }
                add_dense(g, *bias, Tensor::new(&[m], db));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, dy, g, add_dense);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (n, m) = (y.shape()[0], y.shape()[1]);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let yr = &y.data()[i * m..(i + 1) * m];
                    let dr = &dy.data()[i * m..(i + 1) * m];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        da[i * m + j] = yr[j] * (dr[j] - dot);
                    }
                }
                add_dense(g, *a, Tensor::new(&[n, m], da));
            }
            Op::Reindex { a, idx } => {
                let contrib: Vec<(usize, f64)> =
                    idx.iter().enumerate().map(|(o, &i)| (i, dy.data()[o])).collect();
                add_to(g, *a, &contrib);
            }
            Op::GatherRows { a, idx } => {
                let ta = &self.nodes[*a].value;
                let m = ta.shape()[1];
                let mut contrib = Vec::with_capacity(idx.len() * m);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        contrib.push((i * m + j, dy.data()[r * m + j]));
                    }
                }
                add_to(g, *a, &contrib);
            }
            Op::RoiAvgPool { fm, cells, grid } => {
                let tf = &self.nodes[*fm].value;
                let (c_ch, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
                let d = grid * grid * c_ch;
                let mut dfm = Tensor::zeros(&[c_ch, h, w]);
                let dd = dfm.data_mut();
                for (r, roi) in cells.iter().enumerate() {
                    for (gc, rect) in roi.iter().enumerate() {
                        let area = ((rect.y1 - rect.y0) * (rect.x1 - rect.x0)) as f64;
                        for c in 0..c_ch {
                            let gv = dy.data()[r * d + gc * c_ch + c] / area;
                            if gv == 0.0 {
                                continue;
                            }
                            for y in rect.y0..rect.y1 {
                                for x in rect.x0..rect.x1 {
                                    dd[c * h * w + y * w + x] += gv;
                                }
                            }
                        }
                    }
                }
                add_dense(g, *fm, dfm);
            }
            Op::CosineRows(a) => {
                let ta = &self.nodes[*a].value;
                let e = &self.nodes[id].value;
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let norms: Vec<f64> = (0..n)
                    .map(|i| libm::sqrt(ta.row(i).iter().map(|v| v * v).sum::<f64>()))
                    .collect();
                let mut da = vec![0.0; n * d];
                for m in 0..n {
                    for nn in 0..n {
                        if m == nn {
                            continue; // diagonal is constant 1
                        }
                        let gv = dy.data()[m * n + nn];
                        if gv == 0.0 || norms[m] == 0.0 || norms[nn] == 0.0 {
                            continue;
                        }
                        let emn = e.data()[m * n + nn];
                        let (fm_, fn_) = (ta.row(m), ta.row(nn));
                        for j in 0..d {
                            // dE/df_m = f_n/(|f_m||f_n|) - E * f_m/|f_m|^2
                            da[m * d + j] += gv
                                * (fn_[j] / (norms[m] * norms[nn])
                                    - emn * fm_[j] / (norms[m] * norms[m]));
                            da[nn * d + j] += gv
                                * (fm_[j] / (norms[m] * norms[nn])
                                    - emn * fn_[j] / (norms[nn] * norms[nn]));
                        }
                    }
                }
                add_dense(g, *a, Tensor::new(&[n, d], da));
            }
            Op::BceLogitsMean { logits, targets, mask } => {
                let tl = &self.nodes[*logits].value;
                let cnt = mask.iter().filter(|&&m| m).count().max(1) as f64;
                let s = dy.item() / cnt;
                let da = Tensor::new(
                    tl.shape(),
                    tl.data()
                        .iter()
                        .zip(targets)
                        .zip(mask)
                        .map(|((&z, &y), &m)| if m { s * (sigmoid(z) - y) } else { 0.0 })
                        .collect(),
                );
                add_dense(g, *logits, da);
            }
            Op::CeSoftmaxMean { logits, labels, mask } => {
                let tl = &self.nodes[*logits].value;
                let (n, m) = (tl.shape()[0], tl.shape()[1]);
                let cnt = mask.iter().filter(|&&x| x).count().max(1) as f64;
                let s = dy.item() / cnt;
                let mut da = vec![0.0; n * m];
                let mut p = vec![0.0; m];
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    softmax_into(&tl.data()[i * m..(i + 1) * m], &mut p);
                    for j in 0..m {
                        da[i * m + j] = s * (p[j] - if j == labels[i] { 1.0 } else { 0.0 });
                    }
                }
                add_dense(g, *logits, Tensor::new(&[n, m], da));
            }
            Op::SmoothL1Mean { pred, target, row_mask } => {
                let tp = &self.nodes[*pred].value;
                let (n, k) = (tp.shape()[0], tp.shape()[1]);
                let cnt = row_mask.iter().filter(|&&x| x).count().max(1) as f64;
                let s = dy.item() / cnt;
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    if !row_mask[i] {
                        continue;
                    }
                    for j in 0..k {
                        let d = tp.data()[i * k + j] - target[i * k + j];
                        da[i * k + j] = s * if d > 1.0 { 1.0 } else if d < -1.0 { -1.0 } else { d };
                    }
                }
                add_dense(g, *pred, Tensor::new(&[n, k], da));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        dy: &Tensor,
        g: &mut [Option<Tensor>],
        add_dense: impl Fn(&mut [Option<Tensor>], usize, Tensor),
    ) {
        let (tx, tw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (c_in, h, wi) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, _, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
        let mut dx = vec![0.0; c_in * h * wi];
        let mut dw = vec![0.0; c_out * c_in * kh * kw];
        let mut db = vec![0.0; c_out];
        for o in 0..c_out {
            let dyo = &dy.data()[o * ho * wo..(o + 1) * ho * wo];
            db[o] += dyo.iter().sum::<f64>();
            for c in 0..c_in {
                let xc = &tx.data()[c * h * wi..(c + 1) * h * wi];
                let dxc = &mut dx[c * h * wi..(c + 1) * h * wi];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = tw.data()[((o * c_in + c) * kh + i) * kw + j];
                        let mut dwv = 0.0;
                        for oh in 0..ho {
                            let ih = (oh * stride + i) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let ih = ih as usize;
                            let dyrow = &dyo[oh * wo..(oh + 1) * wo];
                            for ow in 0..wo {
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let iw = iw as usize;
                                let dv = dyrow[ow];
                                dwv += dv * xc[ih * wi + iw];
                                dxc[ih * wi + iw] += dv * wv;
                            }
                        }
                        dw[((o * c_in + c) * kh + i) * kw + j] += dwv;
                    }
                }
            }
        }
        add_dense(g, x, Tensor::new(&[c_in, h, wi], dx));
        add_dense(g, w, Tensor::new(&[c_out, c_in, kh, kw], dw));
        add_dense(g, b, Tensor::new(&[c_out], db));
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `row` into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - mx);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Plain (non-tracked) pairwise cosine matrix of the rows of a 2-D tensor.
/// Zero-norm rows give 0 off-diagonal and 1 on the diagonal.
pub fn cosine_matrix(t: &Tensor) -> Vec<f64> {
    let (n, _d) = (t.shape()[0], t.shape()[1]);
    let norms: Vec<f64> =
        (0..n).map(|i| libm::sqrt(t.row(i).iter().map(|v| v * v).sum::<f64>())).collect();
    let mut out = vec![0.0; n * n];
    for m in 0..n {
        out[m * n + m] = 1.0;
        for nn in (m + 1)..n {
            let v = if norms[m] == 0.0 || norms[nn] == 0.0 {
                0.0
            } else {
                let dot: f64 = t.row(m).iter().zip(t.row(nn)).map(|(a, b)| a * b).sum();
                dot / (norms[m] * norms[nn])
            };
            out[m * n + nn] = v;
            out[nn * n + m] = v;
        }
    }
    out
}
