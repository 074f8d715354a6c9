//! Normal and Gamma distribution functions with their inverses.
//!
//! Lower and upper tails are kept separate all the way through so that
//! quantiles far in either tail keep full relative precision.

use alloc::format;

use crate::error::{Error, Result};

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

pub fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / SQRT_2PI
}

/// `Φ(x)`
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `1 − Φ(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Acklam's rational approximation of the lower-tail quantile, `p ≤ 0.5`.
fn acklam_lower(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] =
        [-5.447_609_879_822_406e1, 1.615_858_368_580_409e2, -1.556_989_798_598_866e2, 6.680_131_188_771_972e1, -1.328_068_155_288_572e1];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
    if p < 0.02425 {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// `x` with `Φ(x) = p` for `p ∈ (0, 0.5]`, refined by Halley steps.
fn lower_quantile(p: f64) -> f64 {
    let mut x = acklam_lower(p);
    for _ in 0..3 {
        let dens = normal_pdf(x);
        if dens == 0.0 {
            break;
        }
        let u = (normal_cdf(x) - p) / dens;
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// `Φ⁻¹(p)`. Returns `±∞` at the endpoints and NaN outside `[0, 1]`.
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p <= 0.5 {
        lower_quantile(p)
    } else {
        -lower_quantile(1.0 - p)
    }
}

/// `x` with `1 − Φ(x) = q`, accurate for tiny `q`.
pub fn normal_quantile_upper(q: f64) -> f64 {
    -normal_quantile(q)
}

fn ln_gamma(a: f64) -> f64 {
    libm::lgamma(a)
}

/// `x^a e^{−x} / Γ(a)` evaluated in log space.
fn gamma_prefactor(a: f64, x: f64) -> f64 {
    libm::exp(a * libm::log(x) - x - ln_gamma(a))
}

fn gamma_series(a: f64, x: f64) -> Result<f64> {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..100_000 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            return Ok(sum * gamma_prefactor(a, x));
        }
    }
    Err(Error::NoConvergence(format!("incomplete gamma series (a = {a}, x = {x})")))
}

fn gamma_continued_fraction(a: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..100_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            return Ok(h * gamma_prefactor(a, x));
        }
    }
    Err(Error::NoConvergence(format!("incomplete gamma continued fraction (a = {a}, x = {x})")))
}

fn check_gamma_args(a: f64, x: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidInput(format!("Gamma shape must be positive, got {a}")));
    }
    if !(x >= 0.0) {
        return Err(Error::InvalidInput(format!("Gamma argument must be non-negative, got {x}")));
    }
    Ok(())
}

/// Regularized lower incomplete gamma `P(a, x) = F_{Γ_a}(x)`.
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        Ok(1.0 - gamma_continued_fraction(a, x)?)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 − P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    check_gamma_args(a, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    if x < a + 1.0 {
        Ok(1.0 - gamma_series(a, x)?)
    } else {
        gamma_continued_fraction(a, x)
    }
}

/// Density of the unit-scale Gamma distribution with shape `a`.
pub fn gamma_pdf(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    libm::exp((a - 1.0) * libm::log(x) - x - ln_gamma(a))
}

/// Solves `P(a, x) = p` (lower tail) or `Q(a, x) = p` (upper tail) for `x`.
///
/// Newton iterations inside a maintained bracket, falling back to bisection
/// (or bracket expansion) whenever a step leaves it. Stops at relative step
/// size 1e-12 or better.
fn gamma_inverse(a: f64, target: f64, upper: bool) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!("Gamma quantile level {target} outside (0, 1)")));
    }
    let z = if upper { normal_quantile_upper(target) } else { normal_quantile(target) };
    let wh = 1.0 - 1.0 / (9.0 * a) + z / (3.0 * libm::sqrt(a));
    let mut x = if wh > 0.0 { a * wh * wh * wh } else { 0.0 };
    if !(x > 0.0) || !x.is_finite() {
        // small-x asymptote P(a, x) ≈ x^a / Γ(a + 1)
        let p = if upper { 1.0 - target } else { target };
        x = libm::exp((libm::log(p) + ln_gamma(a + 1.0)) / a);
    }
    if !(x > 0.0) || !x.is_finite() {
        x = a.max(1e-300);
    }
    // Newton on the logarithm of the tail probability: nearly linear in the
    // far tails, where the plain residual decays exponentially.
    let tail = |x: f64| -> Result<f64> {
        if upper {
            gamma_q(a, x)
        } else {
            gamma_p(a, x)
        }
    };
    let log_target = libm::log(target);
    let newton = |x: f64, f: f64| -> f64 {
        let slope = gamma_pdf(a, x) / f;
        let r = libm::log(f) - log_target;
        if upper {
            x + r / slope
        } else {
            x - r / slope
        }
    };
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for _ in 0..400 {
        let f = tail(x)?;
        if f == target {
            return Ok(x);
        }
        // the root lies right of x when the lower tail is short or the upper tail long
        let root_right = if upper { f > target } else { f < target };
        if root_right {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = if f > 0.0 { newton(x, f) } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(lo) };
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-13 * x || (hi.is_finite() && hi - lo <= 1e-15 * hi) {
            let f = tail(x)?;
            if f > 0.0 {
                let polished = newton(x, f);
                if polished > lo && polished < hi {
                    x = polished;
                }
            }
            return Ok(x);
        }
    }
    Err(Error::NoConvergence(format!("Gamma quantile (a = {a}, level = {target:e})")))
}

/// `F_{Γ_a}⁻¹(p)`
pub fn gamma_p_inv(a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidInput(format!("Gamma shape must be positive, got {a}")));
    }
    gamma_inverse(a, p, false)
}

/// `x` with `Q(a, x) = q`.
pub fn gamma_q_inv(a: f64, q: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidInput(format!("Gamma shape must be positive, got {a}")));
    }
    gamma_inverse(a, q, true)
}
