//! Digamma and trigamma.
//!
//! Both use upward recurrence until the argument reaches [`SHIFT`], then the
//! Bernoulli-number asymptotic series.

use crate::error::{Error, Result};

const SHIFT: f64 = 8.0;

// B_{2k} for k = 1..=9.
const BERNOULLI: [f64; 9] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
];

fn check_arg(x: f64, name: &str) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{name} requires a finite positive argument, got {x}"
        )));
    }
    Ok(())
}

/// trigamma(x) - 1/x for x >= SHIFT, without forming either term.
fn trigamma_tail(x: f64) -> f64 {
    // 1/(2x^2) + sum_k B_2k / x^(2k+1)
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv;
    let mut series = 0.0;
    for b in BERNOULLI {
        series += b * pow;
        pow *= inv2;
    }
    0.5 * inv2 + series
}

/// Returns `(shift_sum, shifted_x)` where `trigamma(x) = shift_sum + trigamma(shifted_x)`.
fn trigamma_shift(mut x: f64) -> (f64, f64) {
    let mut acc = 0.0;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    (acc, x)
}

pub fn trigamma(x: f64) -> Result<f64> {
    check_arg(x, "trigamma")?;
    let (acc, z) = trigamma_shift(x);
    Ok(acc + 1.0 / z + trigamma_tail(z))
}

/// trigamma(x) - 1/x, accurate when the two terms nearly cancel (large x).
pub fn trigamma_minus_recip(x: f64) -> Result<f64> {
    check_arg(x, "trigamma")?;
    if x >= SHIFT {
        return Ok(trigamma_tail(x));
    }
    let (acc, z) = trigamma_shift(x);
    Ok(acc + 1.0 / z + trigamma_tail(z) - 1.0 / x)
}

pub fn digamma(x: f64) -> Result<f64> {
    check_arg(x, "digamma")?;
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut pow = inv2;
    let mut series = 0.0;
    for (k, b) in BERNOULLI.iter().enumerate() {
        series += b / (2.0 * (k as f64 + 1.0)) * pow;
        pow *= inv2;
    }
    Ok(acc + z.ln() - 0.5 / z - series)
}
