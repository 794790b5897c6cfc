//! Finite-difference gradient auditing.
//!
//! The comparison metric divides the discrepancy by a floored magnitude so
//! that finite-difference noise on near-zero gradients does not read as
//! failure, while a genuinely wrong backward rule on a live gradient does.

/// Relative error with a magnitude floor of 1e-4.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-4);
    libm::fabs(analytic - numeric) / denom
}

/// Central finite difference of `f` around `x0` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}
