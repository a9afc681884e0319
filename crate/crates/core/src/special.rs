//! Gamma-family special functions on the positive real axis.
//!
//! All three functions shift the argument upward with the standard recurrences
//! until it is large enough for the asymptotic (Stirling / Bernoulli) series to
//! converge to full double precision, then undo the shift.

use thiserror::Error;

/// Argument at and above which the asymptotic series are used directly.
const ASYMPTOTIC_MIN: f64 = 10.0;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `B_{2k} / (2k (2k-1))` for k = 1..=8 (Stirling series of ln Γ).
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

/// `B_{2k} / (2k)` for k = 1..=8 (asymptotic series of ψ).
const DIGAMMA_ASYM: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// `B_{2k}` for k = 1..=8 (asymptotic series of ψ′).
const TRIGAMMA_ASYM: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

/// ζ(k) for k = 2..=31, used by the Taylor expansion of ln Γ(1 + z).
#[allow(clippy::excessive_precision)]
const ZETA: [f64; 30] = [
    1.644_934_066_848_226_4,
    1.202_056_903_159_594_3,
    1.082_323_233_711_138_2,
    1.036_927_755_143_369_9,
    1.017_343_061_984_449_1,
    1.008_349_277_381_922_8,
    1.004_077_356_197_944_3,
    1.002_008_392_826_082_2,
    1.000_994_575_127_818_1,
    1.000_494_188_604_119_5,
    1.000_246_086_553_308,
    1.000_122_713_347_578_5,
    1.000_061_248_135_058_7,
    1.000_030_588_236_307,
    1.000_015_282_259_408_7,
    1.000_007_637_197_637_9,
    1.000_003_817_293_265,
    1.000_001_908_212_716_6,
    1.000_000_953_962_033_9,
    1.000_000_476_932_986_8,
    1.000_000_238_450_502_7,
    1.000_000_119_219_926,
    1.000_000_059_608_189,
    1.000_000_029_803_503_5,
    1.000_000_014_901_554_8,
    1.000_000_007_450_711_8,
    1.000_000_003_725_334,
    1.000_000_001_862_659_7,
    1.000_000_000_931_327_4,
    1.000_000_000_465_662_9,
];

/// Half-width of the neighbourhoods of 1 and 2 (the zeros of ln Γ) where the
/// Taylor expansion replaces the shifted Stirling series.
const ROOT_WINDOW: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("{function} is undefined at x = {x}")]
pub struct DomainError {
    pub function: &'static str,
    pub x: f64,
}

fn check_domain(function: &'static str, x: f64) -> Result<(), DomainError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(DomainError { function, x })
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64, DomainError> {
    check_domain("lgamma", x)?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    if (x - 1.0).abs() < ROOT_WINDOW {
        return lgamma_1p(x - 1.0);
    }
    if (x - 2.0).abs() < ROOT_WINDOW {
        let z = x - 2.0;
        return lgamma_1p(z) + z.ln_1p();
    }
    if x >= ASYMPTOTIC_MIN {
        return stirling(x);
    }
    // ln Γ(x) = ln Γ(x + n) − ln(x (x+1) ... (x+n−1))
    let mut shifted = x;
    let mut product = 1.0;
    while shifted < ASYMPTOTIC_MIN {
        product *= shifted;
        shifted += 1.0;
    }
    stirling(shifted) - product.ln()
}

fn stirling(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv;
    for c in STIRLING {
        series += c * power;
        power *= inv2;
    }
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series
}

/// ln Γ(1 + z) = −γ z + Σ_{k≥2} ζ(k) (−z)^k / k, truncated at k = 31 (|z| ≤ 0.2).
fn lgamma_1p(z: f64) -> f64 {
    let mut sum = 0.0;
    let mut power = z * z;
    for (i, zeta) in ZETA.iter().enumerate() {
        let k = (i + 2) as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * zeta * power / k;
        power *= z;
    }
    -EULER_GAMMA * z + sum
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, DomainError> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    // ψ(x) = ψ(x + 1) − 1/x
    let mut shift = 0.0;
    while x < ASYMPTOTIC_MIN {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv2;
    for c in DIGAMMA_ASYM {
        series += c * power;
        power *= inv2;
    }
    x.ln() - 0.5 * inv - series + shift
}

/// Trigamma ψ′(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64, DomainError> {
    check_domain("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    // ψ′(x) = ψ′(x + 1) + 1/x²
    let mut shift = 0.0;
    while x < ASYMPTOTIC_MIN {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv2 * inv;
    for c in TRIGAMMA_ASYM {
        series += c * power;
        power *= inv2;
    }
    inv + 0.5 * inv2 + series + shift
}
