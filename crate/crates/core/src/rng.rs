//! Small sampling helpers over any [`RngCore`] source.

use rand_core::RngCore;

/// Uniform draw in [0, 1).
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    // 53 random mantissa bits
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform_in<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal draw (Box-Muller).
pub fn gaussian<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = uniform(rng).max(1e-300);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform integer in [0, n).
pub fn below<R: RngCore>(rng: &mut R, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}
