//! Model configurations. Every knob the experiments vary is config-exposed
//! so runs can pin them in one place.

use crate::error::{CoreError, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// How the SSM diagonal is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", deny_unknown_fields))]
pub enum AMode {
    /// Geometric ladder (ratio 0.4) from the most negative eigenvalue;
    /// excluded from the optimizer.
    #[cfg_attr(feature = "serde", serde(rename = "fixed"))]
    Fixed { a_min: f64 },
    /// a = -exp(log_a), trained, initialized at -1.
    #[cfg_attr(feature = "serde", serde(rename = "learned"))]
    Learned,
}

impl Default for AMode {
    fn default() -> Self {
        AMode::Fixed { a_min: -2.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MambaConfig {
    pub d_in: usize,
    /// Width after the input linear (the input linear reduces 16 -> d_model).
    pub d_model: usize,
    /// d_inner = expand * d_model.
    pub expand: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub n_blocks: usize,
    pub n_in_linear: usize,
    pub n_out_linear: usize,
    /// Dropout retention probability between the output linears.
    pub keep_prob: f64,
    /// Multiplicative gate branch inside the block; off in the
    /// low-dimensional configuration.
    pub gate_enabled: bool,
    /// Predict this many samples ahead.
    pub horizon: usize,
    /// Streaming window length.
    pub window: usize,
    pub a_mode: AMode,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 8,
            expand: 2,
            d_state: 4,
            conv_kernel: 4,
            n_blocks: 1,
            n_in_linear: 1,
            n_out_linear: 3,
            keep_prob: 0.75,
            gate_enabled: false,
            horizon: 1,
            window: 20,
            a_mode: AMode::default(),
        }
    }
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, detail: &'static str| {
            if ok {
                Ok(())
            } else {
                Err(CoreError::parameter("mamba_config", detail))
            }
        };
        check(self.d_in >= 1, "d_in must be positive")?;
        check(self.d_model >= 1, "d_model must be positive")?;
        check(self.expand >= 1, "expand must be positive")?;
        check(self.d_state >= 1, "d_state must be >= 1")?;
        check(self.conv_kernel >= 1, "conv_kernel must be >= 1")?;
        check(self.n_blocks >= 1, "n_blocks must be positive")?;
        check(self.n_in_linear >= 1, "n_in_linear must be positive")?;
        check(self.n_out_linear >= 1, "n_out_linear must be positive")?;
        check(self.horizon >= 1, "horizon must be >= 1")?;
        check(self.window >= 1, "window must be positive")?;
        check(
            self.keep_prob > 0.0 && self.keep_prob <= 1.0,
            "keep_prob must be in (0, 1]",
        )?;
        if let AMode::Fixed { a_min } = self.a_mode {
            check(a_min < 0.0, "fixed a_min must be negative")?;
        }
        Ok(())
    }
}

/// Which baseline and how much of the past it may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "window", deny_unknown_fields))]
pub enum WindowMode {
    /// Whole-sequence input (w = T).
    #[cfg_attr(feature = "serde", serde(rename = "full"))]
    Full,
    /// Only the trailing `w` inputs, recomputed each step, no carried state.
    #[cfg_attr(feature = "serde", serde(rename = "short"))]
    Short { w: usize },
}

impl Default for WindowMode {
    fn default() -> Self {
        WindowMode::Full
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LstmConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub layers: usize,
    pub horizon: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            hidden: 64,
            layers: 2,
            horizon: 1,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in < 1 || self.hidden < 1 || self.layers < 1 || self.horizon < 1 {
            return Err(CoreError::parameter("lstm_config", "all counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TransformerConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub window: WindowMode,
    pub horizon: usize,
    /// Windows sampled per trial and epoch when training in short mode.
    pub train_windows_per_trial: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            window: WindowMode::Full,
            horizon: 1,
            train_windows_per_trial: 5,
        }
    }
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in < 1
            || self.d_model < 1
            || self.layers < 1
            || self.heads < 1
            || self.d_ff < 1
            || self.horizon < 1
            || self.train_windows_per_trial < 1
        {
            return Err(CoreError::parameter(
                "transformer_config",
                "all counts must be positive",
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(CoreError::parameter(
                "transformer_config",
                "d_model must be divisible by heads",
            ));
        }
        if let WindowMode::Short { w } = self.window {
            if w < 1 {
                return Err(CoreError::parameter(
                    "transformer_config",
                    "short window must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_the_reference_setup() {
        let m = MambaConfig::default();
        m.validate().unwrap();
        assert_eq!(m.d_in, 16);
        assert_eq!(m.d_state, 4);
        assert_eq!(m.conv_kernel, 4);
        assert_eq!(m.keep_prob, 0.75);
        assert_eq!((m.n_in_linear, m.n_out_linear, m.n_blocks), (1, 3, 1));
        assert!(!m.gate_enabled);
        assert_eq!(m.window, 20);
        assert_eq!(m.d_inner(), 16);
        LstmConfig::default().validate().unwrap();
        TransformerConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut m = MambaConfig::default();
        m.keep_prob = 0.0;
        assert!(m.validate().is_err());
        m = MambaConfig::default();
        m.a_mode = AMode::Fixed { a_min: 0.5 };
        assert!(m.validate().is_err());
        let mut t = TransformerConfig::default();
        t.heads = 3;
        assert!(t.validate().is_err());
    }
}
