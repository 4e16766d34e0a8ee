//! The streaming SSM predictor: input linear -> Mamba block(s) -> output
//! head, predicting the 16-channel signal `horizon` samples ahead.
//!
//! The same forward pass serves whole-sequence and streaming execution. A
//! [`StreamContext`] carries, per block, the conv input tail (the last
//! conv_kernel-1 rows, so chunk boundaries never pad) and the SSM state;
//! with a context the outputs are bit-identical to running the whole
//! sequence at once, which is the architectural point of the model.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::model::config::{AMode, MambaConfig};
use crate::rng::Trng;
use crate::ssm::{build_fixed_a, ADiag, SsmParams, SsmState};
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut Trng) -> Self {
        Self {
            w: Tensor::randn([d_in, d_out], 1.0 / math::sqrt(d_in as f64), rng),
            b: Tensor::zeros_param([d_out]),
        }
    }

    fn apply(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&alloc::format!("{prefix}.w"), &self.w);
        let b = tape.param(&alloc::format!("{prefix}.b"), &self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MambaBlock {
    expand: Linear,
    conv_kernel: Tensor,
    conv_bias: Tensor,
    ssm: SsmParams,
    gate: Option<Linear>,
    contract: Linear,
}

/// Per-block streaming carry-over.
#[derive(Debug, Clone, PartialEq)]
struct BlockCtx {
    /// [(conv_kernel - 1) * d_inner] most recent conv input rows, oldest first.
    conv_tail: Vec<f64>,
    state: SsmState,
}

/// Everything a stream needs to resume mid-trial.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamContext {
    blocks: Vec<BlockCtx>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaModel {
    pub cfg: MambaConfig,
    input: Vec<Linear>,
    blocks: Vec<MambaBlock>,
    head: Vec<Linear>,
}

impl MambaModel {
    pub fn new(cfg: &MambaConfig, rng: &mut Trng) -> Result<Self> {
        cfg.validate()?;
        let d_inner = cfg.d_inner();
        let mut input = Vec::with_capacity(cfg.n_in_linear);
        input.push(Linear::init(cfg.d_in, cfg.d_model, rng));
        for _ in 1..cfg.n_in_linear {
            input.push(Linear::init(cfg.d_model, cfg.d_model, rng));
        }

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let a = match cfg.a_mode {
                AMode::Fixed { a_min } => ADiag::Fixed(build_fixed_a(a_min, cfg.d_state)?),
                AMode::Learned => ADiag::Learned {
                    log_a: Tensor::zeros_param([cfg.d_state]),
                },
            };
            blocks.push(MambaBlock {
                expand: Linear::init(cfg.d_model, d_inner, rng),
                conv_kernel: Tensor::randn(
                    [cfg.conv_kernel, d_inner],
                    1.0 / math::sqrt(cfg.conv_kernel as f64),
                    rng,
                ),
                conv_bias: Tensor::zeros_param([d_inner]),
                ssm: SsmParams::init(a, d_inner, rng),
                gate: cfg
                    .gate_enabled
                    .then(|| Linear::init(cfg.d_model, d_inner, rng)),
                contract: Linear::init(d_inner, cfg.d_model, rng),
            });
        }

        let mut head = Vec::with_capacity(cfg.n_out_linear);
        for _ in 1..cfg.n_out_linear {
            head.push(Linear::init(cfg.d_model, cfg.d_model, rng));
        }
        head.push(Linear::init(cfg.d_model, cfg.d_in, rng));

        Ok(Self {
            cfg: cfg.clone(),
            input,
            blocks,
            head,
        })
    }

    /// Rows excluded from losses and metrics: the conv zero-padding region.
    pub fn warmup_len(&self) -> usize {
        self.cfg.conv_kernel - 1
    }

    pub fn fresh_context(&self) -> StreamContext {
        let d_inner = self.cfg.d_inner();
        StreamContext {
            blocks: self
                .blocks
                .iter()
                .map(|_| BlockCtx {
                    conv_tail: vec![0.0; (self.cfg.conv_kernel - 1) * d_inner],
                    state: SsmState::zeros(d_inner, self.cfg.d_state),
                })
                .collect(),
            step_index: 0,
        }
    }

    /// Whole-sequence forward: x is [T, d_in], output [T, d_in] where row t
    /// predicts x[t + horizon]. The first conv_kernel - 1 rows are warm-up.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Trng,
    ) -> Result<TensorId> {
        let min_len = self.cfg.conv_kernel + self.cfg.horizon;
        if x.rows() <= min_len {
            return Err(CoreError::SequenceTooShort {
                op: "mamba_forward",
                len: x.rows(),
                min: min_len + 1,
            });
        }
        let xid = tape.constant(x);
        Ok(self.forward_on_tape(tape, xid, mode, rng, None)?.out)
    }

    /// Streaming step over exactly one window of `cfg.window` rows; returns
    /// the prediction for the newest row and the per-row predictions.
    pub fn stream_step(
        &self,
        window: &Tensor,
        ctx: &mut StreamContext,
    ) -> Result<(Vec<f64>, Tensor)> {
        if window.rows() != self.cfg.window {
            return Err(CoreError::shape(
                "mamba_stream_step",
                alloc::format!(
                    "window has {} rows, configured w = {}",
                    window.rows(),
                    self.cfg.window
                ),
            ));
        }
        let preds = self.stream_chunk(window, ctx)?;
        let newest = preds.row(preds.rows() - 1).to_vec();
        Ok((newest, preds))
    }

    /// Streaming engine: process any chunk of rows with carried state.
    /// Eval-mode only; returns predictions for every chunk row.
    pub fn stream_chunk(&self, chunk: &Tensor, ctx: &mut StreamContext) -> Result<Tensor> {
        if chunk.rows() == 0 {
            return Err(CoreError::Empty {
                op: "mamba_stream",
            });
        }
        if chunk.cols() != self.cfg.d_in {
            return Err(CoreError::shape(
                "mamba_stream",
                alloc::format!("chunk has {} channels, need {}", chunk.cols(), self.cfg.d_in),
            ));
        }
        let mut tape = Tape::new();
        let xid = tape.constant(chunk);
        // Dropout is identity in eval mode; the rng is never drawn from.
        let mut rng = Trng::seed_from(0);
        let art = self.forward_on_tape(&mut tape, xid, Mode::Eval, &mut rng, Some(ctx))?;
        ctx.step_index += chunk.rows();
        Ok(tape.to_tensor(art.out))
    }

    /// Shared pipeline. With `ctx` the conv tails and SSM states are
    /// consumed and replaced (streaming); without it the sequence starts
    /// from zeros (whole-sequence mode).
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: TensorId,
        mode: Mode,
        rng: &mut Trng,
        mut ctx: Option<&mut StreamContext>,
    ) -> Result<ForwardArtifacts> {
        let d_inner = self.cfg.d_inner();
        let mut scans = Vec::with_capacity(self.blocks.len());
        let mut z = x;
        for (i, lin) in self.input.iter().enumerate() {
            if i > 0 {
                z = tape.silu(z)?;
            }
            z = lin.apply(tape, &alloc::format!("in.{i}"), z)?;
        }

        for (bi, block) in self.blocks.iter().enumerate() {
            let prefix = alloc::format!("block.{bi}");
            let skip = z;

            let e = block.expand.apply(tape, &alloc::format!("{prefix}.expand"), z)?;
            let kernel = tape.param(&alloc::format!("{prefix}.conv.k"), &block.conv_kernel);
            let tail_owned: Option<Vec<f64>> = ctx
                .as_ref()
                .map(|c| c.blocks[bi].conv_tail.clone());
            let conv = tape.conv1d_causal(e, kernel, tail_owned.as_deref())?;
            let cb = tape.param(&alloc::format!("{prefix}.conv.b"), &block.conv_bias);
            let conv = tape.add(conv, cb)?;
            let s = tape.silu(conv)?;

            // Selection: B_t, C_t linear in the SSM input, delta through a
            // softplus; one delta per channel.
            let w_b = tape.param(&alloc::format!("{prefix}.ssm.w_b"), &block.ssm.w_b);
            let w_c = tape.param(&alloc::format!("{prefix}.ssm.w_c"), &block.ssm.w_c);
            let w_dt = tape.param(&alloc::format!("{prefix}.ssm.w_dt"), &block.ssm.w_dt);
            let b_dt = tape.param(&alloc::format!("{prefix}.ssm.b_dt"), &block.ssm.b_dt);
            let b_seq = tape.matmul(s, w_b)?;
            let c_seq = tape.matmul(s, w_c)?;
            let pre_dt = tape.matmul(s, w_dt)?;
            let pre_dt = tape.add(pre_dt, b_dt)?;
            let delta = tape.softplus(pre_dt)?;

            let a_id = match &block.ssm.a {
                ADiag::Fixed(v) => {
                    let t = Tensor::new([v.len()], v.clone())?;
                    tape.constant(&t)
                }
                ADiag::Learned { log_a } => {
                    let l = tape.param(&alloc::format!("{prefix}.ssm.log_a"), log_a);
                    let e = tape.exp(l)?;
                    tape.scale(e, -1.0)?
                }
            };

            let h0: Vec<f64> = match ctx.as_ref() {
                Some(c) => c.blocks[bi].state.h.data().to_vec(),
                None => vec![0.0; d_inner * self.cfg.d_state],
            };
            let y_ssm = tape.selective_scan(s, b_seq, c_seq, delta, a_id, &h0)?;
            scans.push(y_ssm);

            if let Some(c) = ctx.as_mut() {
                // Advance the carried state and conv tail for the next chunk.
                let hist = tape.scan_state_history(y_ssm)?;
                let n = d_inner * self.cfg.d_state;
                let h_final = hist[hist.len() - n..].to_vec();
                let steps = tape.shape(y_ssm)[0];
                let bc = &mut c.blocks[bi];
                bc.state = SsmState {
                    h: Tensor::new([d_inner, self.cfg.d_state], h_final)?,
                    step_index: bc.state.step_index + steps,
                };
                bc.conv_tail = next_tail(
                    &bc.conv_tail,
                    tape.data(e),
                    self.cfg.conv_kernel - 1,
                    d_inner,
                );
            }

            let gated = match &block.gate {
                Some(g) => {
                    let gz = g.apply(tape, &alloc::format!("{prefix}.gate"), skip)?;
                    let gs = tape.silu(gz)?;
                    tape.mul(y_ssm, gs)?
                }
                None => y_ssm,
            };
            let contracted =
                block
                    .contract
                    .apply(tape, &alloc::format!("{prefix}.contract"), gated)?;
            // Identity skip connection around the block.
            z = tape.add(contracted, skip)?;
        }

        let mut h = z;
        for (i, lin) in self.head.iter().enumerate() {
            if i > 0 {
                h = tape.silu(h)?;
                h = tape.dropout(h, self.cfg.keep_prob, mode, rng)?;
            }
            h = lin.apply(tape, &alloc::format!("head.{i}"), h)?;
        }
        Ok(ForwardArtifacts { out: h, scans })
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        visit_linears(&self.input, "in", &mut |n, t| f(n, t));
        for (bi, b) in self.blocks.iter().enumerate() {
            let p = alloc::format!("block.{bi}");
            f(&alloc::format!("{p}.expand.w"), &b.expand.w);
            f(&alloc::format!("{p}.expand.b"), &b.expand.b);
            f(&alloc::format!("{p}.conv.k"), &b.conv_kernel);
            f(&alloc::format!("{p}.conv.b"), &b.conv_bias);
            f(&alloc::format!("{p}.ssm.w_b"), &b.ssm.w_b);
            f(&alloc::format!("{p}.ssm.w_c"), &b.ssm.w_c);
            f(&alloc::format!("{p}.ssm.w_dt"), &b.ssm.w_dt);
            f(&alloc::format!("{p}.ssm.b_dt"), &b.ssm.b_dt);
            if let ADiag::Learned { log_a } = &b.ssm.a {
                f(&alloc::format!("{p}.ssm.log_a"), log_a);
            }
            if let Some(g) = &b.gate {
                f(&alloc::format!("{p}.gate.w"), &g.w);
                f(&alloc::format!("{p}.gate.b"), &g.b);
            }
            f(&alloc::format!("{p}.contract.w"), &b.contract.w);
            f(&alloc::format!("{p}.contract.b"), &b.contract.b);
        }
        visit_linears(&self.head, "head", &mut |n, t| f(n, t));
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        visit_linears_mut(&mut self.input, "in", f);
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let p = alloc::format!("block.{bi}");
            f(&alloc::format!("{p}.expand.w"), &mut b.expand.w);
            f(&alloc::format!("{p}.expand.b"), &mut b.expand.b);
            f(&alloc::format!("{p}.conv.k"), &mut b.conv_kernel);
            f(&alloc::format!("{p}.conv.b"), &mut b.conv_bias);
            f(&alloc::format!("{p}.ssm.w_b"), &mut b.ssm.w_b);
            f(&alloc::format!("{p}.ssm.w_c"), &mut b.ssm.w_c);
            f(&alloc::format!("{p}.ssm.w_dt"), &mut b.ssm.w_dt);
            f(&alloc::format!("{p}.ssm.b_dt"), &mut b.ssm.b_dt);
            if let ADiag::Learned { log_a } = &mut b.ssm.a {
                f(&alloc::format!("{p}.ssm.log_a"), log_a);
            }
            if let Some(g) = &mut b.gate {
                f(&alloc::format!("{p}.gate.w"), &mut g.w);
                f(&alloc::format!("{p}.gate.b"), &mut g.b);
            }
            f(&alloc::format!("{p}.contract.w"), &mut b.contract.w);
            f(&alloc::format!("{p}.contract.b"), &mut b.contract.b);
        }
        visit_linears_mut(&mut self.head, "head", f);
    }

    /// Per-trial state trace [T, d_state] for diagnostics: channel mean of
    /// every state coordinate at each step (first block).
    pub fn state_trace(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let mut rng = Trng::seed_from(0);
        let art = self.forward_on_tape(&mut tape, xid, Mode::Eval, &mut rng, None)?;
        let hist = tape.scan_state_history(art.scans[0])?;
        let d_inner = self.cfg.d_inner();
        let n = self.cfg.d_state;
        let t_len = x.rows();
        let mut trace = vec![0.0; t_len * n];
        for t in 0..t_len {
            let base = (t + 1) * d_inner * n;
            for j in 0..n {
                let mut s = 0.0;
                for ch in 0..d_inner {
                    s += hist[base + ch * n + j];
                }
                trace[t * n + j] = s / d_inner as f64;
            }
        }
        Tensor::new([t_len, n], trace)
    }
}

struct ForwardArtifacts {
    out: TensorId,
    scans: Vec<TensorId>,
}

fn visit_linears(linears: &[Linear], prefix: &str, f: &mut impl FnMut(&str, &Tensor)) {
    for (i, l) in linears.iter().enumerate() {
        f(&alloc::format!("{prefix}.{i}.w"), &l.w);
        f(&alloc::format!("{prefix}.{i}.b"), &l.b);
    }
}

fn visit_linears_mut(
    linears: &mut [Linear],
    prefix: &str,
    f: &mut impl FnMut(&str, &mut Tensor),
) {
    for (i, l) in linears.iter_mut().enumerate() {
        f(&alloc::format!("{prefix}.{i}.w"), &mut l.w);
        f(&alloc::format!("{prefix}.{i}.b"), &mut l.b);
    }
}

/// Last `rows` conv-input rows of [tail ++ chunk], oldest first.
fn next_tail(tail: &[f64], chunk: &[f64], rows: usize, width: usize) -> Vec<f64> {
    if rows == 0 {
        return Vec::new();
    }
    let mut combined = Vec::with_capacity(tail.len() + chunk.len());
    combined.extend_from_slice(tail);
    combined.extend_from_slice(chunk);
    let total_rows = combined.len() / width;
    let keep_from = total_rows.saturating_sub(rows) * width;
    combined.split_off(keep_from)
}
