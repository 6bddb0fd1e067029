//! Special functions needed by the evidential objective.
//!
//! Both functions shift the argument upward with the recurrence until it is at
//! least 6, then evaluate the asymptotic (Bernoulli) expansion with eight
//! correction terms. Absolute accuracy is better than 1e-13 for `x >= 1`.

use crate::error::TensorError;

const SHIFT_THRESHOLD: f64 = 6.0;

/// B_{2n} / (2n) for n = 1..=8.
const DIGAMMA_COEFFS: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// B_{2n} for n = 1..=8.
const TRIGAMMA_COEFFS: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

/// Digamma function ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64, TensorError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(TensorError::Domain {
            func: "digamma",
            arg: x,
        });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner over powers of 1/x^2.
    let mut series = 0.0;
    for c in DIGAMMA_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv2;
    Ok(acc + x.ln() - 0.5 / x - series)
}

/// Trigamma function ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64, TensorError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(TensorError::Domain {
            func: "trigamma",
            arg: x,
        });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ'(x) ~ 1/x + 1/(2x^2) + Σ B_{2n} / x^{2n+1}
    let mut series = 0.0;
    for c in TRIGAMMA_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv2 * inv;
    Ok(acc + inv + 0.5 * inv2 + series)
}
