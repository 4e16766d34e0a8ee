//! Model zoo: the streaming SSM predictor plus LSTM / Transformer
//! baselines, behind one training and evaluation surface.

pub mod config;
pub mod lpf;
pub mod lstm;
pub mod mamba;
pub mod transformer;

use alloc::vec::Vec;

pub use config::{AMode, LstmConfig, MambaConfig, TransformerConfig, WindowMode};
pub use lpf::{lpf_columns, LowPassFilter};
pub use lstm::LstmModel;
pub use mamba::{MambaModel, StreamContext};
pub use transformer::TransformerModel;

use crate::error::{CoreError, Result};
use crate::rng::Trng;
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::Tensor;

/// N-ahead target alignment: row t of the target holds x[t + horizon];
/// rows in the warm-up region or without a future sample are masked out.
pub fn nstep_targets(x: &Tensor, horizon: usize, warmup: usize) -> Result<(Tensor, Vec<bool>)> {
    let (t_len, cols) = (x.rows(), x.cols());
    if t_len <= warmup + horizon {
        return Err(CoreError::SequenceTooShort {
            op: "nstep_targets",
            len: t_len,
            min: warmup + horizon + 1,
        });
    }
    let mut target = Tensor::zeros([t_len, cols]);
    let mut mask = alloc::vec![false; t_len];
    for t in 0..t_len {
        if t + horizon < t_len {
            let src = x.row(t + horizon).to_vec();
            target.data_mut()[t * cols..(t + 1) * cols].copy_from_slice(&src);
            mask[t] = t >= warmup;
        }
    }
    Ok((target, mask))
}

/// Offline prediction with its validity mask.
#[derive(Debug, Clone)]
pub struct OfflinePrediction {
    /// [T, d_in]; row t predicts x[t + horizon]. Masked rows are zero.
    pub pred: Tensor,
    pub mask: Vec<bool>,
}

/// Any model in the zoo. Enum dispatch keeps models clonable for
/// best-checkpoint selection.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Mamba(MambaModel),
    Lstm(LstmModel),
    Transformer(TransformerModel),
}

impl Predictor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Predictor::Mamba(_) => "mamba",
            Predictor::Lstm(_) => "lstm",
            Predictor::Transformer(m) => match m.cfg.window {
                WindowMode::Full => "transformer_full",
                WindowMode::Short { .. } => "transformer_short",
            },
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Predictor::Mamba(m) => m.cfg.horizon,
            Predictor::Lstm(m) => m.cfg.horizon,
            Predictor::Transformer(m) => m.cfg.horizon,
        }
    }

    pub fn warmup_len(&self) -> usize {
        match self {
            Predictor::Mamba(m) => m.warmup_len(),
            Predictor::Lstm(m) => m.warmup_len(),
            Predictor::Transformer(m) => m.warmup_len(),
        }
    }

    /// Causal forward over the given rows. For the short-window
    /// Transformer this sees exactly the rows it is given, which is the
    /// point: callers decide the window.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Trng,
    ) -> Result<TensorId> {
        match self {
            Predictor::Mamba(m) => m.forward(tape, x, mode, rng),
            Predictor::Lstm(m) => m.forward(tape, x, mode, rng),
            Predictor::Transformer(m) => m.forward(tape, x, mode, rng),
        }
    }

    /// Scalar training loss for one trial, honoring each model's input
    /// regime. Whole-sequence models compare their forward pass against the
    /// N-ahead targets; the short-window Transformer averages window losses
    /// (random windows in train mode, strided ones in eval mode).
    pub fn trial_loss(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Trng,
    ) -> Result<TensorId> {
        let horizon = self.horizon();
        match self {
            Predictor::Transformer(m) if m.short_window().is_some() => {
                let w = m.short_window().expect("checked");
                let t_len = x.rows();
                if t_len <= horizon + 1 {
                    return Err(CoreError::SequenceTooShort {
                        op: "trial_loss",
                        len: t_len,
                        min: horizon + 2,
                    });
                }
                let starts = if t_len <= w + horizon {
                    alloc::vec![0]
                } else {
                    let max_start = t_len - w - horizon;
                    match mode {
                        Mode::Train => (0..m.cfg.train_windows_per_trial)
                            .map(|_| rng.below(max_start + 1))
                            .collect::<Vec<_>>(),
                        Mode::Eval => {
                            let stride = (w / 2).max(1);
                            let mut s: Vec<usize> = (0..=max_start).step_by(stride).collect();
                            if *s.last().expect("nonempty") != max_start {
                                s.push(max_start);
                            }
                            s
                        }
                    }
                };
                let mut acc: Option<TensorId> = None;
                for s in &starts {
                    let len = w.min(t_len - s - horizon);
                    let win = x.slice_rows(*s, len + horizon)?;
                    let pred = m.forward(tape, &win.slice_rows(0, len)?, mode, rng)?;
                    let (target, mask) = nstep_targets(&win, horizon, 0)?;
                    let target = target.slice_rows(0, len)?;
                    let tid = tape.constant(&target);
                    let l = tape.mse_masked(pred, tid, &mask[..len])?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, l)?,
                        None => l,
                    });
                }
                tape.scale(acc.expect("at least one window"), 1.0 / starts.len() as f64)
            }
            _ => {
                let pred = self.forward(tape, x, mode, rng)?;
                let (target, mask) = nstep_targets(x, horizon, self.warmup_len())?;
                let tid = tape.constant(&target);
                tape.mse_masked(pred, tid, &mask)
            }
        }
    }

    /// Offline evaluation semantics: whole-sequence models run once in eval
    /// mode; the short-window Transformer recomputes per step over the
    /// trailing window and carries nothing.
    pub fn predict_offline(&self, x: &Tensor) -> Result<OfflinePrediction> {
        let horizon = self.horizon();
        let t_len = x.rows();
        let mut rng = Trng::seed_from(0);
        match self {
            Predictor::Transformer(m) if m.short_window().is_some() => {
                let w = m.short_window().expect("checked");
                let mut pred = Tensor::zeros([t_len, x.cols()]);
                let mut mask = alloc::vec![false; t_len];
                for t in 0..t_len {
                    if t + horizon >= t_len {
                        continue;
                    }
                    let len = w.min(t + 1);
                    if len <= horizon {
                        continue;
                    }
                    let win = x.slice_rows(t + 1 - len, len)?;
                    let mut tape = Tape::new();
                    let out = m.forward(&mut tape, &win, Mode::Eval, &mut rng)?;
                    let last = tape.data(out)[(len - 1) * x.cols()..len * x.cols()].to_vec();
                    pred.data_mut()[t * x.cols()..(t + 1) * x.cols()].copy_from_slice(&last);
                    mask[t] = true;
                }
                Ok(OfflinePrediction { pred, mask })
            }
            _ => {
                let mut tape = Tape::new();
                let out = self.forward(&mut tape, x, Mode::Eval, &mut rng)?;
                let (_, mask) = nstep_targets(x, horizon, self.warmup_len())?;
                Ok(OfflinePrediction {
                    pred: tape.to_tensor(out),
                    mask,
                })
            }
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        match self {
            Predictor::Mamba(m) => m.visit_params(f),
            Predictor::Lstm(m) => m.visit_params(f),
            Predictor::Transformer(m) => m.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        match self {
            Predictor::Mamba(m) => m.visit_params_mut(f),
            Predictor::Lstm(m) => m.visit_params_mut(f),
            Predictor::Transformer(m) => m.visit_params_mut(f),
        }
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Parameters as (name, values) in visit order.
    pub fn param_snapshot(&self) -> Vec<(alloc::string::String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((alloc::string::String::from(name), t.clone())));
        out
    }

    /// Restore a snapshot taken from an identically shaped model.
    pub fn load_snapshot(&mut self, snap: &[(alloc::string::String, Tensor)]) -> Result<()> {
        let mut i = 0;
        let mut err: Option<CoreError> = None;
        self.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match snap.get(i) {
                Some((n, v)) if n == name && v.shape() == t.shape() => {
                    t.data_mut().copy_from_slice(v.data());
                }
                _ => {
                    err = Some(CoreError::parameter(
                        "load_snapshot",
                        alloc::format!("snapshot mismatch at entry {i} ({name})"),
                    ));
                }
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != snap.len() {
            return Err(CoreError::parameter(
                "load_snapshot",
                alloc::format!("snapshot has {} entries, model visited {i}", snap.len()),
            ));
        }
        Ok(())
    }
}
