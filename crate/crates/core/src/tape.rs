//! Tape-based reverse-mode differentiation over a closed op set.
//!
//! The tape is an arena: every op appends one node holding the forward
//! value, and backward walks the nodes in reverse creation order, so an
//! op's inputs always precede it and gradient accumulation order is fixed.
//! Re-running the same graph therefore produces bit-identical gradients.
//!
//! Every forward op validates shapes and rejects non-finite outputs; a NaN
//! anywhere surfaces as an error instead of propagating silently.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Trng;
use crate::ssm;
use crate::tensor::Tensor;

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Training / evaluation switch. Dropout is the identity in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    /// Elementwise add; `b` may broadcast over the leading dims of `a`.
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// Elementwise multiply; `b` may broadcast over the leading dims of `a`.
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Silu {
        x: TensorId,
    },
    Softplus {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    MseMasked {
        pred: TensorId,
        target: TensorId,
        row_mask: Vec<bool>,
        count: usize,
    },
    Dropout {
        x: TensorId,
        /// Per-element factor: 0.0 (dropped) or 1/keep_prob (kept).
        mask: Vec<f64>,
    },
    /// Depthwise causal conv over time. `tail` holds the conv_kernel-1 rows
    /// preceding the first input row (zeros at trial start), so streaming
    /// chunks reproduce whole-sequence outputs exactly.
    ConvCausal {
        x: TensorId,
        kernel: TensorId,
        tail: Vec<f64>,
    },
    SelectiveScan {
        u: TensorId,
        b_seq: TensorId,
        c_seq: TensorId,
        delta: TensorId,
        a_diag: TensorId,
        /// [(T+1) * d_inner * d_state] state history saved for backward;
        /// row 0 is the carried-in state.
        h_hist: Vec<f64>,
    },
    Row {
        x: TensorId,
        index: usize,
    },
    StackRows {
        parts: Vec<TensorId>,
    },
    /// Row-wise softmax of `scale * x` with entries above the diagonal
    /// masked out (causal attention weights).
    CausalSoftmaxRows {
        x: TensorId,
        scale: f64,
    },
    RmsNormRows {
        x: TensorId,
        gain: TensorId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

const RMSNORM_EPS: f64 = 1e-5;

/// Reverse-mode tape. Single-owner: build a fresh one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, TensorId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        if !data.iter().all(|&v| math::is_finite(v)) {
            return Err(CoreError::NonFinite {
                op: op_name,
                step: None,
            });
        }
        Ok(self.push(shape, data, needs_grad, op))
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.idx()]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        let mut t = Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape consistent");
        t.grad = n.grad.clone();
        t.requires_grad = n.needs_grad;
        t
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Input whose gradient tracking follows `t.requires_grad`.
    pub fn var(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Named trainable parameter; its gradient can be collected after
    /// `backward` via [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> TensorId {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf);
        self.params.push((String::from(name), id));
        id
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        self.push(shape, data, needs_grad, Op::Leaf)
    }

    /// (name, gradient) pairs for all registered parameters, in registration
    /// order. Parameters never touched by backward yield zero gradients.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let n = self.node(*id);
                let g = n
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; n.data.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(CoreError::shape("matmul", "both inputs must be rank 2"));
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (k2, n) = (nb.shape[0], nb.shape[1]);
        if k != k2 {
            return Err(CoreError::shape(
                "matmul",
                alloc::format!("inner extents differ: {k} vs {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&na.data, &nb.data, m, k, n, &mut out);
        let needs = na.needs_grad || nb.needs_grad;
        self.push_checked("matmul", vec![m, n], out, needs, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let nx = self.node(x);
        if nx.shape.len() != 2 {
            return Err(CoreError::shape("transpose", "input must be rank 2"));
        }
        let (r, c) = (nx.shape[0], nx.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = nx.data[i * c + j];
            }
        }
        let needs = nx.needs_grad;
        self.push_checked("transpose", vec![c, r], out, needs, Op::Transpose { x })
    }

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        let reps = broadcast_reps(op_name, &na.shape, &nb.shape)?;
        let bn = nb.data.len();
        let mut out = Vec::with_capacity(na.data.len());
        for r in 0..reps {
            let base = r * bn;
            for j in 0..bn {
                out.push(f(na.data[base + j], nb.data[j]));
            }
        }
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        self.push_checked(op_name, shape, out, needs, op)
    }

    /// a + b with `b` broadcast over leading dims (same shape, suffix shape,
    /// or scalar).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// a * b, broadcast as in [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let nx = self.node(x);
        let out: Vec<f64> = nx.data.iter().map(|&v| v * c).collect();
        let needs = nx.needs_grad;
        let shape = nx.shape.clone();
        self.push_checked("scale", shape, out, needs, Op::Scale { x, c })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let nx = self.node(x);
        let out: Vec<f64> = nx.data.iter().map(|&v| f(v)).collect();
        let needs = nx.needs_grad;
        let shape = nx.shape.clone();
        self.push_checked(op_name, shape, out, needs, op)
    }

    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("silu", x, math::silu, Op::Silu { x })
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("softplus", x, math::softplus, Op::Softplus { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", x, math::sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, math::tanh, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, math::exp, Op::Exp { x })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let nx = self.node(x);
        let s: f64 = nx.data.iter().sum();
        let needs = nx.needs_grad;
        self.push_checked("sum", vec![1], vec![s], needs, Op::Sum { x })
    }

    /// Mean squared error over the unmasked rows of two equally shaped
    /// rank-2 tensors, mixing all channels without weighting.
    pub fn mse_masked(
        &mut self,
        pred: TensorId,
        target: TensorId,
        row_mask: &[bool],
    ) -> Result<TensorId> {
        let (np, nt) = (self.node(pred), self.node(target));
        if np.shape != nt.shape {
            return Err(CoreError::shape(
                "mse_loss",
                alloc::format!("{:?} vs {:?}", np.shape, nt.shape),
            ));
        }
        if np.shape.len() != 2 {
            return Err(CoreError::shape("mse_loss", "inputs must be rank 2"));
        }
        let (rows, cols) = (np.shape[0], np.shape[1]);
        if row_mask.len() != rows {
            return Err(CoreError::shape(
                "mse_loss",
                alloc::format!("mask has {} rows, tensor {}", row_mask.len(), rows),
            ));
        }
        let active = row_mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(CoreError::parameter("mse_loss", "all rows masked"));
        }
        let count = active * cols;
        let mut acc = 0.0;
        for r in 0..rows {
            if !row_mask[r] {
                continue;
            }
            for c in 0..cols {
                let d = np.data[r * cols + c] - nt.data[r * cols + c];
                acc += d * d;
            }
        }
        let needs = np.needs_grad || nt.needs_grad;
        self.push_checked(
            "mse_loss",
            vec![1],
            vec![acc / count as f64],
            needs,
            Op::MseMasked {
                pred,
                target,
                row_mask: row_mask.to_vec(),
                count,
            },
        )
    }

    /// Inverted dropout: elements kept with probability `keep_prob` and
    /// scaled by 1/keep_prob. Identity in eval mode or when keep_prob == 1.
    pub fn dropout(
        &mut self,
        x: TensorId,
        keep_prob: f64,
        mode: Mode,
        rng: &mut Trng,
    ) -> Result<TensorId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(CoreError::parameter(
                "dropout",
                alloc::format!("keep_prob must be in (0, 1], got {keep_prob}"),
            ));
        }
        if mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let nx = self.node(x);
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..nx.data.len())
            .map(|_| if rng.uniform01() < keep_prob { inv } else { 0.0 })
            .collect();
        let out: Vec<f64> = nx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = nx.needs_grad;
        let shape = nx.shape.clone();
        self.push_checked("dropout", shape, out, needs, Op::Dropout { x, mask })
    }

    /// Depthwise causal 1-D convolution over time: x is [T, C], kernel is
    /// [K, C], out[t, c] = sum_i kernel[i, c] * x[t - i, c]. Rows before the
    /// start come from `tail` ([K-1, C]); pass `None` for a trial start
    /// (zeros), in which case the first K-1 outputs are warm-up rows that
    /// callers exclude via the loss mask.
    pub fn conv1d_causal(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        tail: Option<&[f64]>,
    ) -> Result<TensorId> {
        let (nx, nk) = (self.node(x), self.node(kernel));
        if nx.shape.len() != 2 || nk.shape.len() != 2 {
            return Err(CoreError::shape("conv1d", "x and kernel must be rank 2"));
        }
        let (t_len, channels) = (nx.shape[0], nx.shape[1]);
        let (k_len, kc) = (nk.shape[0], nk.shape[1]);
        if kc != channels {
            return Err(CoreError::shape(
                "conv1d",
                alloc::format!("kernel channels {kc} != input channels {channels}"),
            ));
        }
        if k_len < 1 {
            return Err(CoreError::parameter("conv1d", "kernel length must be >= 1"));
        }
        let tail_rows = k_len - 1;
        let tail_buf: Vec<f64> = match tail {
            Some(t) => {
                if t.len() != tail_rows * channels {
                    return Err(CoreError::shape(
                        "conv1d",
                        alloc::format!(
                            "tail needs {} values, got {}",
                            tail_rows * channels,
                            t.len()
                        ),
                    ));
                }
                t.to_vec()
            }
            None => {
                if k_len > t_len {
                    return Err(CoreError::SequenceTooShort {
                        op: "conv1d",
                        len: t_len,
                        min: k_len,
                    });
                }
                vec![0.0; tail_rows * channels]
            }
        };
        let mut out = vec![0.0; t_len * channels];
        conv_causal_raw(&nx.data, &nk.data, &tail_buf, t_len, channels, k_len, &mut out);
        let needs = nx.needs_grad || nk.needs_grad;
        self.push_checked(
            "conv1d",
            vec![t_len, channels],
            out,
            needs,
            Op::ConvCausal {
                x,
                kernel,
                tail: tail_buf,
            },
        )
    }

    /// Input-dependent discretized diagonal scan (the selective SSM).
    ///
    /// * `u`:      [T, d_inner] per-channel inputs
    /// * `b_seq`:  [T, d_state] input projections B_t
    /// * `c_seq`:  [T, d_state] output projections C_t
    /// * `delta`:  [T, d_inner] positive step sizes
    /// * `a_diag`: [d_state] negative continuous-time eigenvalues
    /// * `h0`:     [d_inner * d_state] carried state (zeros at trial start)
    ///
    /// Output is y [T, d_inner]; the state trajectory is retrievable via
    /// [`Tape::scan_state_history`].
    pub fn selective_scan(
        &mut self,
        u: TensorId,
        b_seq: TensorId,
        c_seq: TensorId,
        delta: TensorId,
        a_diag: TensorId,
        h0: &[f64],
    ) -> Result<TensorId> {
        let dims = ssm::ScanDims::validate(
            self.shape(u),
            self.shape(b_seq),
            self.shape(c_seq),
            self.shape(delta),
            self.shape(a_diag),
            h0.len(),
        )?;
        let fwd = ssm::selective_scan_forward(
            self.data(u),
            self.data(b_seq),
            self.data(c_seq),
            self.data(delta),
            self.data(a_diag),
            h0,
            dims,
        )?;
        let needs = [u, b_seq, c_seq, delta, a_diag]
            .iter()
            .any(|id| self.node(*id).needs_grad);
        // Forward already rejects non-finite states step by step.
        Ok(self.push(
            vec![dims.t_len, dims.d_inner],
            fwd.y,
            needs,
            Op::SelectiveScan {
                u,
                b_seq,
                c_seq,
                delta,
                a_diag,
                h_hist: fwd.h_hist,
            },
        ))
    }

    /// State history of a [`Tape::selective_scan`] node as
    /// [(T+1) * d_inner * d_state]; row 0 is h0, row T the final state.
    pub fn scan_state_history(&self, scan: TensorId) -> Result<&[f64]> {
        match &self.node(scan).op {
            Op::SelectiveScan { h_hist, .. } => Ok(h_hist),
            _ => Err(CoreError::parameter(
                "scan_state_history",
                "node is not a selective scan",
            )),
        }
    }

    /// Single row of a rank-2 tensor as [1, C].
    pub fn row(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let nx = self.node(x);
        if nx.shape.len() != 2 {
            return Err(CoreError::shape("row", "input must be rank 2"));
        }
        let (rows, cols) = (nx.shape[0], nx.shape[1]);
        if index >= rows {
            return Err(CoreError::shape(
                "row",
                alloc::format!("row {index} out of {rows}"),
            ));
        }
        let data = nx.data[index * cols..(index + 1) * cols].to_vec();
        let needs = nx.needs_grad;
        self.push_checked("row", vec![1, cols], data, needs, Op::Row { x, index })
    }

    /// Stack [1, C] rows into [N, C].
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::Empty { op: "stack_rows" });
        }
        let cols = {
            let first = self.node(parts[0]);
            if first.shape.len() != 2 || first.shape[0] != 1 {
                return Err(CoreError::shape("stack_rows", "parts must be [1, C]"));
            }
            first.shape[1]
        };
        let mut data = Vec::with_capacity(parts.len() * cols);
        let mut needs = false;
        for &p in parts {
            let np = self.node(p);
            if np.shape != [1, cols] {
                return Err(CoreError::shape("stack_rows", "parts must share shape"));
            }
            data.extend_from_slice(&np.data);
            needs |= np.needs_grad;
        }
        self.push_checked(
            "stack_rows",
            vec![parts.len(), cols],
            data,
            needs,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Causal attention weights: row i gets softmax(scale * x[i, ..=i]);
    /// entries above the diagonal are zero.
    pub fn causal_softmax_rows(&mut self, x: TensorId, scale: f64) -> Result<TensorId> {
        let nx = self.node(x);
        if nx.shape.len() != 2 || nx.shape[0] != nx.shape[1] {
            return Err(CoreError::shape("causal_softmax", "input must be square"));
        }
        let n = nx.shape[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &nx.data[i * n..i * n + i + 1];
            let mx = row
                .iter()
                .map(|&v| v * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..=i {
                let e = math::exp(row[j] * scale - mx);
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..=i {
                out[i * n + j] /= denom;
            }
        }
        let needs = nx.needs_grad;
        self.push_checked(
            "causal_softmax",
            vec![n, n],
            out,
            needs,
            Op::CausalSoftmaxRows { x, scale },
        )
    }

    /// Row-wise RMS normalization with a learned gain: y[i] = gain * x[i] / rms(x[i]).
    pub fn rmsnorm_rows(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let (nx, ng) = (self.node(x), self.node(gain));
        if nx.shape.len() != 2 {
            return Err(CoreError::shape("rmsnorm", "input must be rank 2"));
        }
        let (rows, cols) = (nx.shape[0], nx.shape[1]);
        if ng.data.len() != cols {
            return Err(CoreError::shape(
                "rmsnorm",
                alloc::format!("gain length {} != cols {}", ng.data.len(), cols),
            ));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xs = &nx.data[r * cols..(r + 1) * cols];
            let ms = xs.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / math::sqrt(ms + RMSNORM_EPS);
            for c in 0..cols {
                out[r * cols + c] = ng.data[c] * xs[c] * inv;
            }
        }
        let needs = nx.needs_grad || ng.needs_grad;
        self.push_checked(
            "rmsnorm",
            vec![rows, cols],
            out,
            needs,
            Op::RmsNormRows { x, gain },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// reachable node with `needs_grad`, accumulating additively across
    /// uses in fixed (reverse creation) order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        {
            let ln = self.node(loss);
            if ln.data.len() != 1 {
                return Err(CoreError::shape(
                    "backward",
                    alloc::format!("loss must be scalar, got shape {:?}", ln.shape),
                ));
            }
            if !ln.needs_grad {
                return Err(CoreError::parameter(
                    "backward",
                    "loss does not depend on any tracked input",
                ));
            }
        }
        self.nodes[loss.idx()].grad = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = node.grad.as_ref() else {
                continue;
            };
            backprop_node(before, node, gy)?;
        }
        Ok(())
    }
}

/// Accumulate `contrib` into the grad buffer of `id` (must precede the
/// current node), respecting needs_grad.
fn acc_grad(before: &mut [Node], id: TensorId, f: impl FnOnce(&mut [f64])) {
    let n = &mut before[id.idx()];
    if !n.needs_grad {
        return;
    }
    let g = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
    f(g);
}

fn backprop_node(before: &mut [Node], node: &Node, gy: &[f64]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = before[a.idx()].shape[1];
            // dA += dY · B^T
            let b_data = before[b.idx()].data.clone();
            acc_grad(before, *a, |ga| {
                for i in 0..m {
                    let gyrow = &gy[i * n..(i + 1) * n];
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for (p, g) in garow.iter_mut().enumerate() {
                        let brow = &b_data[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for (&gv, &bv) in gyrow.iter().zip(brow) {
                            s += gv * bv;
                        }
                        *g += s;
                    }
                }
            });
            // dB += A^T · dY
            let a_data = before[a.idx()].data.clone();
            acc_grad(before, *b, |gb| {
                for i in 0..m {
                    let arow = &a_data[i * k..(i + 1) * k];
                    let gyrow = &gy[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for (g, &gv) in gbrow.iter_mut().zip(gyrow) {
                            *g += av * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose { x } => {
            let (r, c) = (node.shape[0], node.shape[1]); // output shape
            acc_grad(before, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += gy[i * c + j];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc_grad(before, *a, |ga| {
                for (g, &d) in ga.iter_mut().zip(gy) {
                    *g += d;
                }
            });
            let bn = before[b.idx()].data.len();
            acc_grad(before, *b, |gb| {
                for (i, &d) in gy.iter().enumerate() {
                    gb[i % bn] += d;
                }
            });
        }
        Op::Mul { a, b } => {
            let b_data = before[b.idx()].data.clone();
            let bn = b_data.len();
            acc_grad(before, *a, |ga| {
                for (i, &d) in gy.iter().enumerate() {
                    ga[i] += d * b_data[i % bn];
                }
            });
            let a_data = before[a.idx()].data.clone();
            acc_grad(before, *b, |gb| {
                for (i, &d) in gy.iter().enumerate() {
                    gb[i % bn] += d * a_data[i];
                }
            });
        }
        Op::Scale { x, c } => {
            let c = *c;
            acc_grad(before, *x, |gx| {
                for (g, &d) in gx.iter_mut().zip(gy) {
                    *g += c * d;
                }
            });
        }
        Op::Silu { x } => {
            let xs = before[x.idx()].data.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * math::silu_grad(xs[i]);
                }
            });
        }
        Op::Softplus { x } => {
            let xs = before[x.idx()].data.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * math::softplus_grad(xs[i]);
                }
            });
        }
        Op::Sigmoid { x } => {
            let ys = node.data.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * ys[i] * (1.0 - ys[i]);
                }
            });
        }
        Op::Tanh { x } => {
            let ys = node.data.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * (1.0 - ys[i] * ys[i]);
                }
            });
        }
        Op::Exp { x } => {
            let ys = node.data.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * ys[i];
                }
            });
        }
        Op::Sum { x } => {
            let d = gy[0];
            acc_grad(before, *x, |gx| {
                for g in gx.iter_mut() {
                    *g += d;
                }
            });
        }
        Op::MseMasked {
            pred,
            target,
            row_mask,
            count,
        } => {
            let d = gy[0] * 2.0 / *count as f64;
            let cols = node_cols(&before[pred.idx()]);
            let diff: Vec<f64> = {
                let p = &before[pred.idx()].data;
                let t = &before[target.idx()].data;
                p.iter().zip(t).map(|(&a, &b)| a - b).collect()
            };
            let mask = row_mask.clone();
            acc_grad(before, *pred, |gp| {
                for (i, &dv) in diff.iter().enumerate() {
                    if mask[i / cols] {
                        gp[i] += d * dv;
                    }
                }
            });
            acc_grad(before, *target, |gt| {
                for (i, &dv) in diff.iter().enumerate() {
                    if mask[i / cols] {
                        gt[i] -= d * dv;
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            let mask = mask.clone();
            acc_grad(before, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += gy[i] * mask[i];
                }
            });
        }
        Op::ConvCausal { x, kernel, tail } => {
            let (t_len, channels) = (node.shape[0], node.shape[1]);
            let k_len = before[kernel.idx()].shape[0];
            let kern = before[kernel.idx()].data.clone();
            acc_grad(before, *x, |gx| {
                for t in 0..t_len {
                    for i in 0..k_len {
                        if t >= i {
                            let src = t - i;
                            for c in 0..channels {
                                gx[src * channels + c] +=
                                    gy[t * channels + c] * kern[i * channels + c];
                            }
                        }
                    }
                }
            });
            let xs = before[x.idx()].data.clone();
            let tail = tail.clone();
            let tail_rows = k_len - 1;
            acc_grad(before, *kernel, |gk| {
                for t in 0..t_len {
                    for i in 0..k_len {
                        for c in 0..channels {
                            let v = if t >= i {
                                xs[(t - i) * channels + c]
                            } else {
                                // row index into tail: negative time offsets
                                let row = tail_rows + t - i;
                                tail[row * channels + c]
                            };
                            gk[i * channels + c] += gy[t * channels + c] * v;
                        }
                    }
                }
            });
        }
        Op::SelectiveScan {
            u,
            b_seq,
            c_seq,
            delta,
            a_diag,
            h_hist,
        } => {
            let dims = ssm::ScanDims {
                t_len: node.shape[0],
                d_inner: node.shape[1],
                d_state: before[a_diag.idx()].data.len(),
            };
            let grads = ssm::selective_scan_backward(
                &before[u.idx()].data,
                &before[b_seq.idx()].data,
                &before[c_seq.idx()].data,
                &before[delta.idx()].data,
                &before[a_diag.idx()].data,
                h_hist,
                gy,
                dims,
            );
            acc_grad(before, *u, |g| add_into(g, &grads.du));
            acc_grad(before, *b_seq, |g| add_into(g, &grads.db));
            acc_grad(before, *c_seq, |g| add_into(g, &grads.dc));
            acc_grad(before, *delta, |g| add_into(g, &grads.ddelta));
            acc_grad(before, *a_diag, |g| add_into(g, &grads.da));
        }
        Op::Row { x, index } => {
            let cols = node.shape[1];
            let index = *index;
            acc_grad(before, *x, |gx| {
                for c in 0..cols {
                    gx[index * cols + c] += gy[c];
                }
            });
        }
        Op::StackRows { parts } => {
            let cols = node.shape[1];
            for (r, &p) in parts.iter().enumerate() {
                acc_grad(before, p, |gp| {
                    for c in 0..cols {
                        gp[c] += gy[r * cols + c];
                    }
                });
            }
        }
        Op::CausalSoftmaxRows { x, scale } => {
            let n = node.shape[0];
            let probs = node.data.clone();
            let scale = *scale;
            acc_grad(before, *x, |gx| {
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += gy[i * n + j] * probs[i * n + j];
                    }
                    for j in 0..=i {
                        gx[i * n + j] += scale * probs[i * n + j] * (gy[i * n + j] - dot);
                    }
                }
            });
        }
        Op::RmsNormRows { x, gain } => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            let xs = before[x.idx()].data.clone();
            let gains = before[gain.idx()].data.clone();
            acc_grad(before, *x, |gx| {
                for r in 0..rows {
                    let row = &xs[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
                    let inv = 1.0 / math::sqrt(ms + RMSNORM_EPS);
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += gy[r * cols + c] * gains[c] * row[c];
                    }
                    let k = inv * inv * inv / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] += gains[c] * gy[r * cols + c] * inv - k * dot * row[c];
                    }
                }
            });
            let xs2 = xs;
            acc_grad(before, *gain, |gg| {
                for r in 0..rows {
                    let row = &xs2[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
                    let inv = 1.0 / math::sqrt(ms + RMSNORM_EPS);
                    for c in 0..cols {
                        gg[c] += gy[r * cols + c] * row[c] * inv;
                    }
                }
            });
        }
    }
    Ok(())
}

fn node_cols(n: &Node) -> usize {
    match n.shape.len() {
        0 | 1 => n.data.len(),
        _ => n.shape[n.shape.len() - 1],
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// How many copies of `b` tile `a` under suffix broadcasting.
fn broadcast_reps(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        return Ok(1);
    }
    if bn == 1 {
        return Ok(an);
    }
    if b.len() <= a.len() && &a[a.len() - b.len()..] == b {
        return Ok(an / bn);
    }
    Err(CoreError::shape(
        op,
        alloc::format!("cannot broadcast {:?} against {:?}", b, a),
    ))
}

/// out = a[m,k] · b[k,n]; out must be zeroed.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn conv_causal_raw(
    x: &[f64],
    kernel: &[f64],
    tail: &[f64],
    t_len: usize,
    channels: usize,
    k_len: usize,
    out: &mut [f64],
) {
    let tail_rows = k_len - 1;
    for t in 0..t_len {
        for i in 0..k_len {
            let krow = &kernel[i * channels..(i + 1) * channels];
            let xrow = if t >= i {
                &x[(t - i) * channels..(t - i + 1) * channels]
            } else {
                let row = tail_rows + t - i;
                &tail[row * channels..(row + 1) * channels]
            };
            let orow = &mut out[t * channels..(t + 1) * channels];
            for c in 0..channels {
                orow[c] += krow[c] * xrow[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new([rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&Tensor::eye(2));
        let m = tape.constant(&t2(2, 2, &[1., 2., 3., 4.]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(y), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(1, 2, &[1., 2.]));
        let b = tape.constant(&t2(2, 1, &[3., 4.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(2, 3, &[0.; 6]));
        let b = tape.constant(&t2(2, 2, &[0.; 4]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(CoreError::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(4, 2, &[1., 5., 2., 6., 3., 7., 4., 8.]));
        let k = tape.constant(&t2(1, 2, &[1., 1.]));
        let y = tape.conv1d_causal(x, k, None).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv_shift_kernel_hand_recurrence() {
        // kernel [0, 1] selects x[t-1]; t=0 is a warm-up row (zero padding).
        let mut tape = Tape::new();
        let x = tape.constant(&t2(3, 1, &[1., 2., 3.]));
        let k = tape.constant(&t2(2, 1, &[0., 1.]));
        let y = tape.conv1d_causal(x, k, None).unwrap();
        assert_eq!(tape.data(y), &[0., 1., 2.]);
    }

    #[test]
    fn conv_too_short_sequence_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(2, 1, &[1., 2.]));
        let k = tape.constant(&t2(4, 1, &[0.5; 4]));
        assert!(matches!(
            tape.conv1d_causal(x, k, None),
            Err(CoreError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn conv_causality_future_perturbation() {
        let xs = [0.3, -1.2, 0.7, 2.0, -0.4];
        let mut tape = Tape::new();
        let x = tape.constant(&t2(5, 1, &xs));
        let k = tape.constant(&t2(3, 1, &[0.5, -0.25, 0.125]));
        let y = tape.conv1d_causal(x, k, None).unwrap();
        let base = tape.data(y).to_vec();

        let mut xs2 = xs;
        xs2[3] = 99.0;
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(&t2(5, 1, &xs2));
        let k2 = tape2.constant(&t2(3, 1, &[0.5, -0.25, 0.125]));
        let y2 = tape2.conv1d_causal(x2, k2, None).unwrap();
        let pert = tape2.data(y2);
        for t in 0..3 {
            assert_eq!(base[t], pert[t], "output at t={t} changed by future input");
        }
        assert_ne!(base[3], pert[3]);
    }

    #[test]
    fn conv_prefix_bit_identical() {
        // Output at t computed on x[0..=t] equals output on the full x.
        let xs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let kern = [0.3, -0.2, 0.5, 0.1];
        let full = {
            let mut tape = Tape::new();
            let x = tape.constant(&t2(8, 1, &xs));
            let k = tape.constant(&t2(4, 1, &kern));
            let y = tape.conv1d_causal(x, k, None).unwrap();
            tape.data(y).to_vec()
        };
        for t in 3..8 {
            let mut tape = Tape::new();
            let x = tape.constant(&t2(t + 1, 1, &xs[..=t]));
            let k = tape.constant(&t2(4, 1, &kern));
            let y = tape.conv1d_causal(x, k, None).unwrap();
            assert_eq!(tape.data(y)[t], full[t]);
        }
    }

    #[test]
    fn dropout_keep_one_and_eval_are_identity() {
        let mut rng = Trng::seed_from(0);
        let mut tape = Tape::new();
        let x = tape.constant(&t2(2, 2, &[1., 2., 3., 4.]));
        let y = tape.dropout(x, 1.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        let z = tape.dropout(x, 0.25, Mode::Eval, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dropout_invalid_keep_prob() {
        let mut rng = Trng::seed_from(0);
        let mut tape = Tape::new();
        let x = tape.constant(&t2(1, 1, &[1.]));
        assert!(tape.dropout(x, 0.0, Mode::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.5, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_kept_fraction_law_of_large_numbers() {
        let n = 100_000;
        let mut rng = Trng::seed_from(42);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full([n], 1.0));
        let y = tape.dropout(x, 0.75, Mode::Train, &mut rng).unwrap();
        let kept = tape.data(y).iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.01, "kept fraction {frac}");
        // Kept elements are scaled by 1/keep.
        let scaled = tape.data(y).iter().find(|&&v| v != 0.0).unwrap();
        assert!((scaled - 1.0 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let run = || {
            let mut rng = Trng::seed_from(9);
            let mut tape = Tape::new();
            let x = tape.constant(&Tensor::full([64], 1.0));
            let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mse_zero_for_equal_inputs() {
        let mut tape = Tape::new();
        let p = tape.constant(&t2(2, 2, &[1., 2., 3., 4.]));
        let t = tape.constant(&t2(2, 2, &[1., 2., 3., 4.]));
        let l = tape.mse_masked(p, t, &[true, true]).unwrap();
        assert_eq!(tape.data(l), &[0.0]);
    }

    #[test]
    fn mse_uniform_offset() {
        let mut tape = Tape::new();
        let p = tape.constant(&t2(3, 2, &[0.1; 6]));
        let t = tape.constant(&t2(3, 2, &[0.0; 6]));
        let l = tape.mse_masked(p, t, &[true, true, true]).unwrap();
        assert!((tape.data(l)[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mse_all_masked_is_error() {
        let mut tape = Tape::new();
        let p = tape.constant(&t2(2, 1, &[1., 2.]));
        let t = tape.constant(&t2(2, 1, &[0., 0.]));
        assert!(tape.mse_masked(p, t, &[false, false]).is_err());
    }

    #[test]
    fn mse_matches_two_pass_oracle() {
        let mut rng = Trng::seed_from(5);
        let pd: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let td: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mask = [true, false, true, true, false, true, true, true, false, true];
        let mut tape = Tape::new();
        let p = tape.constant(&t2(10, 4, &pd));
        let t = tape.constant(&t2(10, 4, &td));
        let l = tape.mse_masked(p, t, &mask).unwrap();

        // Independent two-pass computation: gather then average.
        let mut sq = alloc::vec::Vec::new();
        for r in 0..10 {
            if mask[r] {
                for c in 0..4 {
                    let d = pd[r * 4 + c] - td[r * 4 + c];
                    sq.push(d * d);
                }
            }
        }
        let expected = sq.iter().sum::<f64>() / sq.len() as f64;
        assert!((tape.data(l)[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut x = t2(2, 3, &[1., -2., 3., 0.5, 0., 7.]);
        x.requires_grad = true;
        let xid = tape.var(&x);
        let s = tape.sum(xid).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let mut x = t2(1, 2, &[1., 2.]);
        x.requires_grad = true;
        let xid = tape.var(&x);
        assert!(tape.backward(xid).is_err());
    }

    #[test]
    fn backward_accumulates_across_uses() {
        // y = sum(x * x_used_twice): tensor used twice gets both paths.
        let mut tape = Tape::new();
        let mut x = t2(1, 3, &[2., 3., 4.]);
        x.requires_grad = true;
        let xid = tape.var(&x);
        let prod = tape.mul(xid, xid).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        // d/dx sum(x^2) = 2x
        assert_eq!(tape.grad(xid).unwrap(), &[4., 6., 8.]);
    }

    #[test]
    fn backward_bit_identical_on_rerun() {
        let build = || {
            let mut rng = Trng::seed_from(17);
            let mut tape = Tape::new();
            let w = Tensor::randn([4, 3], 0.5, &mut rng);
            let x = Tensor::randn([2, 4], 1.0, &mut rng);
            let wid = tape.param("w", &w);
            let xid = tape.constant(&x);
            let y = tape.matmul(xid, wid).unwrap();
            let z = tape.silu(y).unwrap();
            let s = tape.sum(z).unwrap();
            let mut drng = Trng::seed_from(3);
            let d = tape.dropout(s, 0.9, Mode::Train, &mut drng).unwrap();
            tape.backward(d).unwrap();
            tape.param_grads()
        };
        let g1 = build();
        let g2 = build();
        assert_eq!(g1, g2);
    }

    #[test]
    fn broadcast_add_bias_and_backward_reduction() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let mut bias = Tensor::new([2], vec![10., 20.]).unwrap();
        bias.requires_grad = true;
        let b = tape.var(&bias);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.data(y), &[11., 22., 13., 24., 15., 26.]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // Bias grad sums over the three rows.
        assert_eq!(tape.grad(b).unwrap(), &[3., 3.]);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_future() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(3, 3, &[0.5, 9., 9., 0.1, 0.2, 9., 1., 2., 3.]));
        let p = tape.causal_softmax_rows(x, 1.0).unwrap();
        let d = tape.data(p);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        for i in 0..3 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_input_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&t2(1, 2, &[1., f64::NAN]));
        assert!(matches!(
            tape.scale(x, 1.0),
            Err(CoreError::NonFinite { .. })
        ));
    }
}
