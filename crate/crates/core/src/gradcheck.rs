//! Central finite differences for verifying analytic gradients.

use alloc::vec::Vec;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

/// Max relative error between analytic and numerical gradients, with an
/// absolute floor to avoid blowing up near-zero entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(floor);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}
