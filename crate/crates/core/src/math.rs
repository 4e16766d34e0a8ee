//! Scalar float helpers routed through `libm` so the crate builds without
//! `std`. All transcendentals in the crate go through here, which also keeps
//! results identical between test (std) and `no_std` builds.

pub use libm::{cos, exp, fabs as abs, log as ln, log1p as ln_1p, pow, sin, sqrt, tanh};

pub const PI: f64 = core::f64::consts::PI;

/// Numerically safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// x * sigmoid(x)
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// ln(1 + e^x), with the overflow-safe branch for large x.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        ln_1p(exp(x))
    }
}

/// d/dx softplus(x) = sigmoid(x)
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

pub fn is_finite(x: f64) -> bool {
    // Exponent bits all set means NaN or Inf.
    (x.to_bits() >> 52) & 0x7ff != 0x7ff
}
