//! First-order low-pass filter used on commanded trajectories.
//!
//! Discretized with the exact pole alpha = exp(-dt/tau) rather than an
//! Euler step, so a is exact for first-order dynamics and the DC gain is 1
//! at any sample period.

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    pub tau: f64,
    pub dt: f64,
    alpha: f64,
    y: f64,
}

impl LowPassFilter {
    pub fn new(tau: f64, dt: f64) -> Result<Self> {
        if tau <= 0.0 || dt <= 0.0 {
            return Err(CoreError::parameter(
                "lpf",
                alloc::format!("tau and dt must be positive, got tau={tau}, dt={dt}"),
            ));
        }
        Ok(Self {
            tau,
            dt,
            alpha: math::exp(-dt / tau),
            y: 0.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn reset(&mut self, y0: f64) {
        self.y = y0;
    }

    /// One filter step: y <- alpha * y + (1 - alpha) * x.
    pub fn step(&mut self, x: f64) -> f64 {
        self.y = self.alpha * self.y + (1.0 - self.alpha) * x;
        self.y
    }
}

/// Filter every column of [T, C] independently, states starting at the
/// first sample so a constant signal passes through unchanged.
pub fn lpf_columns(x: &Tensor, tau: f64, dt: f64) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if rows == 0 {
        return Err(CoreError::Empty { op: "lpf" });
    }
    let mut out = Tensor::zeros([rows, cols]);
    for c in 0..cols {
        let mut f = LowPassFilter::new(tau, dt)?;
        f.reset(x.at2(0, c));
        for r in 0..rows {
            out.set2(r, c, f.step(x.at2(r, c)));
        }
    }
    Ok(out)
}
