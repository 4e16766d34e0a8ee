//! Causal Transformer baseline, full-sequence or short-window.
//!
//! The short-window variant matches how such a model would actually run on
//! the robot: every step it recomputes attention over only the trailing `w`
//! samples and carries no state, so its prediction at step t is literally
//! invariant to anything older than the window.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::model::config::{TransformerConfig, WindowMode};
use crate::rng::Trng;
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Head {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct TfLayer {
    attn_gain: Tensor,
    heads: Vec<Head>,
    ff_gain: Tensor,
    w_ff1: Tensor,
    b_ff1: Tensor,
    w_ff2: Tensor,
    b_ff2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub cfg: TransformerConfig,
    w_embed: Tensor,
    b_embed: Tensor,
    layers: Vec<TfLayer>,
    final_gain: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

fn gain(n: usize) -> Tensor {
    let mut t = Tensor::full([n], 1.0);
    t.requires_grad = true;
    t
}

impl TransformerModel {
    pub fn new(cfg: &TransformerConfig, rng: &mut Trng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let std_d = 1.0 / math::sqrt(d as f64);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let heads = (0..cfg.heads)
                .map(|_| Head {
                    wq: Tensor::randn([d, dh], std_d, rng),
                    wk: Tensor::randn([d, dh], std_d, rng),
                    wv: Tensor::randn([d, dh], std_d, rng),
                    wo: Tensor::randn([dh, d], 1.0 / math::sqrt(dh as f64), rng),
                })
                .collect();
            layers.push(TfLayer {
                attn_gain: gain(d),
                heads,
                ff_gain: gain(d),
                w_ff1: Tensor::randn([d, cfg.d_ff], std_d, rng),
                b_ff1: Tensor::zeros_param([cfg.d_ff]),
                w_ff2: Tensor::randn([cfg.d_ff, d], 1.0 / math::sqrt(cfg.d_ff as f64), rng),
                b_ff2: Tensor::zeros_param([d]),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            w_embed: Tensor::randn([cfg.d_in, d], 1.0 / math::sqrt(cfg.d_in as f64), rng),
            b_embed: Tensor::zeros_param([d]),
            layers,
            final_gain: gain(d),
            w_out: Tensor::randn([d, cfg.d_in], std_d, rng),
            b_out: Tensor::zeros_param([cfg.d_in]),
        })
    }

    pub fn warmup_len(&self) -> usize {
        0
    }

    /// Sinusoidal position rows, window-relative.
    fn positions(&self, t_len: usize) -> Tensor {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            for j in 0..d {
                let pair = (j / 2) as f64;
                let rate = math::pow(10_000.0, -2.0 * pair / d as f64);
                let angle = t as f64 * rate;
                data.push(if j % 2 == 0 {
                    math::sin(angle)
                } else {
                    math::cos(angle)
                });
            }
        }
        Tensor::new([t_len, d], data).expect("position shape")
    }

    /// Causal forward over the given rows (window-relative positions).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        _mode: Mode,
        _rng: &mut Trng,
    ) -> Result<TensorId> {
        if x.rows() <= self.cfg.horizon {
            return Err(CoreError::SequenceTooShort {
                op: "transformer_forward",
                len: x.rows(),
                min: self.cfg.horizon + 1,
            });
        }
        if x.cols() != self.cfg.d_in {
            return Err(CoreError::shape(
                "transformer_forward",
                alloc::format!("input has {} channels, need {}", x.cols(), self.cfg.d_in),
            ));
        }
        let t_len = x.rows();
        let xid = tape.constant(x);
        let pos = tape.constant(&self.positions(t_len));

        let w_embed = tape.param("embed.w", &self.w_embed);
        let b_embed = tape.param("embed.b", &self.b_embed);
        let mut z = tape.matmul(xid, w_embed)?;
        z = tape.add(z, b_embed)?;
        z = tape.add(z, pos)?;

        let scale = 1.0 / math::sqrt(self.cfg.d_head() as f64);
        for (li, layer) in self.layers.iter().enumerate() {
            let p = alloc::format!("tf.{li}");
            // Pre-norm attention with residual.
            let g1 = tape.param(&alloc::format!("{p}.attn_gain"), &layer.attn_gain);
            let normed = tape.rmsnorm_rows(z, g1)?;
            let mut attn_sum: Option<TensorId> = None;
            for (hi, head) in layer.heads.iter().enumerate() {
                let hp = alloc::format!("{p}.h{hi}");
                let wq = tape.param(&alloc::format!("{hp}.wq"), &head.wq);
                let wk = tape.param(&alloc::format!("{hp}.wk"), &head.wk);
                let wv = tape.param(&alloc::format!("{hp}.wv"), &head.wv);
                let wo = tape.param(&alloc::format!("{hp}.wo"), &head.wo);
                let q = tape.matmul(normed, wq)?;
                let k = tape.matmul(normed, wk)?;
                let v = tape.matmul(normed, wv)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let probs = tape.causal_softmax_rows(scores, scale)?;
                let mixed = tape.matmul(probs, v)?;
                let proj = tape.matmul(mixed, wo)?;
                attn_sum = Some(match attn_sum {
                    Some(acc) => tape.add(acc, proj)?,
                    None => proj,
                });
            }
            z = tape.add(z, attn_sum.expect("at least one head"))?;

            // Pre-norm feed-forward with residual.
            let g2 = tape.param(&alloc::format!("{p}.ff_gain"), &layer.ff_gain);
            let normed = tape.rmsnorm_rows(z, g2)?;
            let w1 = tape.param(&alloc::format!("{p}.ff1.w"), &layer.w_ff1);
            let b1 = tape.param(&alloc::format!("{p}.ff1.b"), &layer.b_ff1);
            let w2 = tape.param(&alloc::format!("{p}.ff2.w"), &layer.w_ff2);
            let b2 = tape.param(&alloc::format!("{p}.ff2.b"), &layer.b_ff2);
            let ff = tape.matmul(normed, w1)?;
            let ff = tape.add(ff, b1)?;
            let ff = tape.silu(ff)?;
            let ff = tape.matmul(ff, w2)?;
            let ff = tape.add(ff, b2)?;
            z = tape.add(z, ff)?;
        }

        let gf = tape.param("final_gain", &self.final_gain);
        let normed = tape.rmsnorm_rows(z, gf)?;
        let w_out = tape.param("out.w", &self.w_out);
        let b_out = tape.param("out.b", &self.b_out);
        let y = tape.matmul(normed, w_out)?;
        tape.add(y, b_out)
    }

    /// Window length this model is allowed to see, if short.
    pub fn short_window(&self) -> Option<usize> {
        match self.cfg.window {
            WindowMode::Full => None,
            WindowMode::Short { w } => Some(w),
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("embed.w", &self.w_embed);
        f("embed.b", &self.b_embed);
        for (li, layer) in self.layers.iter().enumerate() {
            let p = alloc::format!("tf.{li}");
            f(&alloc::format!("{p}.attn_gain"), &layer.attn_gain);
            for (hi, head) in layer.heads.iter().enumerate() {
                let hp = alloc::format!("{p}.h{hi}");
                f(&alloc::format!("{hp}.wq"), &head.wq);
                f(&alloc::format!("{hp}.wk"), &head.wk);
                f(&alloc::format!("{hp}.wv"), &head.wv);
                f(&alloc::format!("{hp}.wo"), &head.wo);
            }
            f(&alloc::format!("{p}.ff_gain"), &layer.ff_gain);
            f(&alloc::format!("{p}.ff1.w"), &layer.w_ff1);
            f(&alloc::format!("{p}.ff1.b"), &layer.b_ff1);
            f(&alloc::format!("{p}.ff2.w"), &layer.w_ff2);
            f(&alloc::format!("{p}.ff2.b"), &layer.b_ff2);
        }
        f("final_gain", &self.final_gain);
        f("out.w", &self.w_out);
        f("out.b", &self.b_out);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("embed.w", &mut self.w_embed);
        f("embed.b", &mut self.b_embed);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let p = alloc::format!("tf.{li}");
            f(&alloc::format!("{p}.attn_gain"), &mut layer.attn_gain);
            for (hi, head) in layer.heads.iter_mut().enumerate() {
                let hp = alloc::format!("{p}.h{hi}");
                f(&alloc::format!("{hp}.wq"), &mut head.wq);
                f(&alloc::format!("{hp}.wk"), &mut head.wk);
                f(&alloc::format!("{hp}.wv"), &mut head.wv);
                f(&alloc::format!("{hp}.wo"), &mut head.wo);
            }
            f(&alloc::format!("{p}.ff_gain"), &mut layer.ff_gain);
            f(&alloc::format!("{p}.ff1.w"), &mut layer.w_ff1);
            f(&alloc::format!("{p}.ff1.b"), &mut layer.b_ff1);
            f(&alloc::format!("{p}.ff2.w"), &mut layer.w_ff2);
            f(&alloc::format!("{p}.ff2.b"), &mut layer.b_ff2);
        }
        f("final_gain", &mut self.final_gain);
        f("out.w", &mut self.w_out);
        f("out.b", &mut self.b_out);
    }
}
