//! Stacked LSTM baseline for N-ahead trajectory prediction.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::model::config::LstmConfig;
use crate::rng::Trng;
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::Tensor;

/// One gate's affine maps: out = x . w_x + h . w_h + b.
#[derive(Debug, Clone, PartialEq)]
struct Gate {
    w_x: Tensor,
    w_h: Tensor,
    b: Tensor,
}

impl Gate {
    fn init(d_in: usize, hidden: usize, bias_init: f64, rng: &mut Trng) -> Self {
        let mut b = Tensor::full([hidden], bias_init);
        b.requires_grad = true;
        Self {
            w_x: Tensor::randn([d_in, hidden], 1.0 / math::sqrt(d_in as f64), rng),
            w_h: Tensor::randn([hidden, hidden], 1.0 / math::sqrt(hidden as f64), rng),
            b,
        }
    }

    fn register(&self, tape: &mut Tape, name: &str) -> GateIds {
        GateIds {
            w_x: tape.param(&alloc::format!("{name}.w_x"), &self.w_x),
            w_h: tape.param(&alloc::format!("{name}.w_h"), &self.w_h),
            b: tape.param(&alloc::format!("{name}.b"), &self.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LstmLayer {
    input: Gate,
    forget: Gate,
    cell: Gate,
    output: Gate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub cfg: LstmConfig,
    layers: Vec<LstmLayer>,
    w_out: Tensor,
    b_out: Tensor,
}

struct GateIds {
    w_x: TensorId,
    w_h: TensorId,
    b: TensorId,
}

impl LstmModel {
    pub fn new(cfg: &LstmConfig, rng: &mut Trng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let d_in = if l == 0 { cfg.d_in } else { cfg.hidden };
            layers.push(LstmLayer {
                input: Gate::init(d_in, cfg.hidden, 0.0, rng),
                // Positive forget bias keeps early memory open.
                forget: Gate::init(d_in, cfg.hidden, 1.0, rng),
                cell: Gate::init(d_in, cfg.hidden, 0.0, rng),
                output: Gate::init(d_in, cfg.hidden, 0.0, rng),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            w_out: Tensor::randn([cfg.hidden, cfg.d_in], 1.0 / math::sqrt(cfg.hidden as f64), rng),
            b_out: Tensor::zeros_param([cfg.d_in]),
        })
    }

    pub fn warmup_len(&self) -> usize {
        0
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        _mode: Mode,
        _rng: &mut Trng,
    ) -> Result<TensorId> {
        if x.rows() <= self.cfg.horizon {
            return Err(CoreError::SequenceTooShort {
                op: "lstm_forward",
                len: x.rows(),
                min: self.cfg.horizon + 1,
            });
        }
        if x.cols() != self.cfg.d_in {
            return Err(CoreError::shape(
                "lstm_forward",
                alloc::format!("input has {} channels, need {}", x.cols(), self.cfg.d_in),
            ));
        }
        let t_len = x.rows();
        let xid = tape.constant(x);

        // Register every parameter once up front.
        let mut gate_ids = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            gate_ids.push([
                layer.input.register(tape, &alloc::format!("lstm.{li}.i")),
                layer.forget.register(tape, &alloc::format!("lstm.{li}.f")),
                layer.cell.register(tape, &alloc::format!("lstm.{li}.g")),
                layer.output.register(tape, &alloc::format!("lstm.{li}.o")),
            ]);
        }
        let w_out = tape.param("out.w", &self.w_out);
        let b_out = tape.param("out.b", &self.b_out);

        let zero_h = tape.leaf_from(
            alloc::vec![1, self.cfg.hidden],
            alloc::vec![0.0; self.cfg.hidden],
            false,
        );
        let mut h: Vec<TensorId> = alloc::vec![zero_h; self.layers.len()];
        let mut c: Vec<TensorId> = alloc::vec![zero_h; self.layers.len()];

        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut inp = tape.row(xid, t)?;
            for (li, ids) in gate_ids.iter().enumerate() {
                let affine = |tape: &mut Tape, g: &GateIds, inp, hprev| -> Result<TensorId> {
                    let a = tape.matmul(inp, g.w_x)?;
                    let b = tape.matmul(hprev, g.w_h)?;
                    let s = tape.add(a, b)?;
                    tape.add(s, g.b)
                };
                let i_pre = affine(tape, &ids[0], inp, h[li])?;
                let f_pre = affine(tape, &ids[1], inp, h[li])?;
                let g_pre = affine(tape, &ids[2], inp, h[li])?;
                let o_pre = affine(tape, &ids[3], inp, h[li])?;
                let i_g = tape.sigmoid(i_pre)?;
                let f_g = tape.sigmoid(f_pre)?;
                let g_g = tape.tanh(g_pre)?;
                let o_g = tape.sigmoid(o_pre)?;
                let keep = tape.mul(f_g, c[li])?;
                let write = tape.mul(i_g, g_g)?;
                let c_new = tape.add(keep, write)?;
                let c_act = tape.tanh(c_new)?;
                let h_new = tape.mul(o_g, c_act)?;
                c[li] = c_new;
                h[li] = h_new;
                inp = h_new;
            }
            outputs.push(inp);
        }
        let stacked = tape.stack_rows(&outputs)?;
        let proj = tape.matmul(stacked, w_out)?;
        tape.add(proj, b_out)
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        for (li, layer) in self.layers.iter().enumerate() {
            for (tag, gate) in [
                ("i", &layer.input),
                ("f", &layer.forget),
                ("g", &layer.cell),
                ("o", &layer.output),
            ] {
                f(&alloc::format!("lstm.{li}.{tag}.w_x"), &gate.w_x);
                f(&alloc::format!("lstm.{li}.{tag}.w_h"), &gate.w_h);
                f(&alloc::format!("lstm.{li}.{tag}.b"), &gate.b);
            }
        }
        f("out.w", &self.w_out);
        f("out.b", &self.b_out);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (tag, gate) in [
                ("i", &mut layer.input),
                ("f", &mut layer.forget),
                ("g", &mut layer.cell),
                ("o", &mut layer.output),
            ] {
                f(&alloc::format!("lstm.{li}.{tag}.w_x"), &mut gate.w_x);
                f(&alloc::format!("lstm.{li}.{tag}.w_h"), &mut gate.w_h);
                f(&alloc::format!("lstm.{li}.{tag}.b"), &mut gate.b);
            }
        }
        f("out.w", &mut self.w_out);
        f("out.b", &mut self.b_out);
    }
}
