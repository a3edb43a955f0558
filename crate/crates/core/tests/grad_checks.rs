//! Finite-difference verification of every differentiable op and of the
//! composed loss heads. The oracle is `gradcheck::central_diff`, which never
//! touches the tape.

use mtor_core::gradcheck::{central_diff, max_rel_error};
use mtor_core::tape::{CellRect, Tape};
use mtor_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Check d(f)/dx where f builds a scalar on a fresh tape from `x`.
fn check(build: impl Fn(&mut Tape, Tensor) -> mtor_core::tape::Var, shape: &[usize], x: &[f64]) {
    let f = |v: &[f64]| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, Tensor::new(shape, v.to_vec()));
        tape.value(loss).item()
    };
    let numeric = central_diff(f, x, EPS);
    let mut tape = Tape::new();
    let leaf_t = Tensor::new(shape, x.to_vec());
    // rebuild with a tracked leaf: `build` must call tape.leaf internally on x
    let loss = build(&mut tape, leaf_t);
    let grads = tape.backward(loss);
    // the leaf is always var 0 in these tests
    let analytic = grads.wrt(mtor_core::tape::Var::from_raw(0));
    let err = max_rel_error(analytic.data(), &numeric, FLOOR);
    assert!(err < TOL, "gradient mismatch: rel err {err}");
}

#[test]
fn relu_sum_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_vec(&mut rng, 12);
    check(
        |tape, t| {
            let v = tape.leaf(t);
            let r = tape.relu(v);
            tape.sqsum(r)
        },
        &[3, 4],
        &x,
    );
}

#[test]
fn sigmoid_affine_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_vec(&mut rng, 7);
    check(
        |tape, t| {
            let v = tape.leaf(t);
            let s = tape.sigmoid(v);
            let a = tape.affine(s, 2.5, -0.3);
            tape.sqsum(a)
        },
        &[7],
        &x,
    );
}

#[test]
fn matmul_bias_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_vec(&mut rng, 6);
    let w = Tensor::new(&[3, 4], rand_vec(&mut rng, 12));
    let b = Tensor::new(&[4], rand_vec(&mut rng, 4));
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.matmul(v, wv);
            let y = tape.add_bias(y, bv);
            tape.sqsum(y)
        },
        &[2, 3],
        &x,
    );
}

#[test]
fn matmul_weight_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::new(&[2, 3], rand_vec(&mut rng, 6));
    let w = rand_vec(&mut rng, 12);
    check(
        move |tape, t| {
            let wv = tape.leaf(t);
            let av = tape.constant(a.clone());
            let y = tape.matmul(av, wv);
            tape.sqsum(y)
        },
        &[3, 4],
        &w,
    );
}

#[test]
fn softmax_rows_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_vec(&mut rng, 8);
    let tgt = Tensor::new(&[2, 4], rand_vec(&mut rng, 8));
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            let p = tape.softmax_rows(v);
            let c = tape.constant(tgt.clone());
            let d = tape.sub(p, c);
            tape.sqsum(d)
        },
        &[2, 4],
        &x,
    );
}

#[test]
fn conv2d_input_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_vec(&mut rng, 2 * 6 * 6);
    let w = Tensor::new(&[3, 2, 3, 3], rand_vec(&mut rng, 54));
    let b = Tensor::new(&[3], rand_vec(&mut rng, 3));
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(v, wv, bv, 2, 1);
            tape.sqsum(y)
        },
        &[2, 6, 6],
        &x,
    );
}

#[test]
fn conv2d_weight_and_bias_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xin = Tensor::new(&[2, 5, 5], rand_vec(&mut rng, 50));
    let wdata = rand_vec(&mut rng, 2 * 2 * 3 * 3);
    let b = Tensor::new(&[2], rand_vec(&mut rng, 2));
    check(
        move |tape, t| {
            let wv = tape.leaf(t);
            let xv = tape.constant(xin.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(xv, wv, bv, 1, 1);
            tape.sqsum(y)
        },
        &[2, 2, 3, 3],
        &wdata,
    );
}

#[test]
fn roi_avg_pool_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_vec(&mut rng, 3 * 8 * 8);
    let cells = vec![
        (0..4)
            .map(|g| CellRect { y0: g / 2, y1: g / 2 + 2, x0: (g % 2) * 2, x1: (g % 2) * 2 + 2 })
            .collect::<Vec<_>>(),
        (0..4)
            .map(|g| CellRect { y0: 3 + g / 2, y1: 4 + g / 2, x0: 3 + g % 2, x1: 4 + g % 2 })
            .collect::<Vec<_>>(),
    ];
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            let p = tape.roi_avg_pool(v, cells.clone(), 2);
            tape.sqsum(p)
        },
        &[3, 8, 8],
        &x,
    );
}

#[test]
fn cosine_rows_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let n = rng.gen_range(2..=5);
        let d = rng.gen_range(2..=8);
        let x = rand_vec(&mut rng, n * d);
        let tgt = Tensor::new(&[n, n], rand_vec(&mut rng, n * n));
        check(
            {
                let tgt = tgt.clone();
                move |tape, t| {
                    let v = tape.leaf(t);
                    let e = tape.cosine_rows(v);
                    let c = tape.constant(tgt.clone());
                    let dd = tape.sub(e, c);
                    tape.sqsum(dd)
                }
            },
            &[n, d],
            &x,
        );
        let _ = trial;
    }
}

#[test]
fn bce_logits_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_vec(&mut rng, 9);
    let targets: Vec<f64> = (0..9).map(|i| f64::from(i % 2 == 0)).collect();
    let mask: Vec<bool> = (0..9).map(|i| i != 4).collect();
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            tape.bce_logits_mean(v, &targets, &mask)
        },
        &[9],
        &x,
    );
}

#[test]
fn ce_softmax_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_vec(&mut rng, 12);
    let labels = vec![0, 2, 1];
    let mask = vec![true, true, false];
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            tape.ce_softmax_mean(v, &labels, &mask)
        },
        &[3, 4],
        &x,
    );
}

#[test]
fn smooth_l1_grad_including_linear_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // spread values so both quadratic and linear branches are hit
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let target = vec![0.0; 8];
    let mask = vec![true, true];
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            tape.smooth_l1_mean(v, &target, &mask)
        },
        &[2, 4],
        &x,
    );
}

#[test]
fn gather_and_reindex_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_vec(&mut rng, 12);
    check(
        move |tape, t| {
            let v = tape.leaf(t);
            let g = tape.gather_rows(v, &[2, 0, 2]);
            let r = tape.reindex(g, &[0, 3, 7, 7], &[4]);
            tape.sqsum(r)
        },
        &[3, 4],
        &x,
    );
}
