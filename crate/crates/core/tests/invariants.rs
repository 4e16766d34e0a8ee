//! Property tests for the spec-level invariants that hold over whole input
//! families, not just hand-picked examples.

use proptest::prelude::*;

use motionssm_core::model::{MambaConfig, MambaModel};
use motionssm_core::ssm::{
    build_fixed_a, discretize, inject_factor, ADiag, SsmParams, SsmState, TAYLOR_SWITCH,
};
use motionssm_core::tape::{Mode, Tape};
use motionssm_core::{Tensor, Trng};

fn toy_ssm(seed: u64, d_inner: usize, d_state: usize, a_min: f64) -> SsmParams {
    let mut rng = Trng::seed_from(seed);
    SsmParams::init(ADiag::Fixed(build_fixed_a(a_min, d_state).unwrap()), d_inner, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any chunking of any input reproduces the whole-sequence scan.
    #[test]
    fn chunked_scan_equivalence(
        seed in 0u64..1000,
        a_min in -10.0f64..-0.05,
        data in prop::collection::vec(-2.0f64..2.0, 3 * 40),
        splits in prop::collection::vec(1usize..12, 1..6),
    ) {
        let p = toy_ssm(seed, 3, 2, a_min);
        let u = Tensor::new([40, 3], data).unwrap();
        let whole = p.scan_sequential(&u, &SsmState::zeros(3, 2)).unwrap();

        let mut state = SsmState::zeros(3, 2);
        let mut outs = Vec::new();
        let mut start = 0usize;
        let mut si = 0usize;
        while start < 40 {
            let len = splits[si % splits.len()].min(40 - start);
            si += 1;
            let chunk = u.slice_rows(start, len).unwrap();
            let o = p.scan_chunked(&chunk, &state).unwrap();
            state = o.state;
            outs.push(o.y);
            start += len;
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let joined = Tensor::vstack(&refs).unwrap();
        prop_assert!(joined.max_abs_diff(&whole.y).unwrap() <= 1e-9);
    }

    /// Prefix-scan execution agrees with the sequential fold.
    #[test]
    fn prefix_scan_equivalence(
        seed in 0u64..1000,
        a_min in -10.0f64..-0.05,
        data in prop::collection::vec(-2.0f64..2.0, 2 * 33),
    ) {
        let p = toy_ssm(seed, 2, 3, a_min);
        let u = Tensor::new([33, 2], data).unwrap();
        let seq = p.scan_sequential(&u, &SsmState::zeros(2, 3)).unwrap();
        let par = p.scan_parallel(&u, &SsmState::zeros(2, 3)).unwrap();
        prop_assert!(seq.y.max_abs_diff(&par.y).unwrap() <= 1e-9);
    }

    /// Zero input kills the injection: y = 0 regardless of A or state age.
    #[test]
    fn zero_input_zero_output(seed in 0u64..1000, a_min in -12.5f64..-0.05, t_len in 1usize..80) {
        let p = toy_ssm(seed, 4, 3, a_min);
        let u = Tensor::zeros([t_len, 4]);
        let out = p.scan_sequential(&u, &SsmState::zeros(4, 3)).unwrap();
        prop_assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    /// Discretization branches join continuously at the Taylor switch.
    #[test]
    fn discretize_branch_continuity(a in -5.0f64..-0.01) {
        // Put |delta * a| just on either side of the switch.
        let d_hi = TAYLOR_SWITCH / -a * 1.0000001;
        let d_lo = TAYLOR_SWITCH / -a * 0.9999999;
        let g_hi = inject_factor(a, d_hi);
        let g_lo = inject_factor(a, d_lo);
        prop_assert!((g_hi - g_lo).abs() <= 1e-12, "gap {}", (g_hi - g_lo).abs());
    }

    /// abar in (0, 1) for any negative a and positive delta: stability.
    #[test]
    fn discretized_decay_is_contractive(a in -50.0f64..-1e-6, delta in 1e-6f64..10.0) {
        let (abar, _) = discretize(a, 1.0, delta).unwrap();
        prop_assert!(abar > 0.0 && abar < 1.0);
    }

    /// The fixed ladder is strictly increasing toward zero and negative.
    #[test]
    fn ladder_ordering(a_min in -100.0f64..-1e-3, d in 1usize..9) {
        let v = build_fixed_a(a_min, d).unwrap();
        prop_assert_eq!(v.len(), d);
        for w in v.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(v.iter().all(|&x| x < 0.0));
    }

    /// Dropout in eval mode is the identity for any keep probability.
    #[test]
    fn dropout_eval_identity(keep in 0.01f64..1.0, data in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let mut rng = Trng::seed_from(0);
        let mut tape = Tape::new();
        let n = data.len();
        let x = tape.constant(&Tensor::new([n], data).unwrap());
        let y = tape.dropout(x, keep, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(tape.data(y), tape.data(x));
    }

    /// Full-model streaming equivalence holds for arbitrary chunk sizes.
    #[test]
    fn model_stream_equivalence(seed in 0u64..200, w in 1usize..30) {
        let cfg = MambaConfig::default();
        let mut rng = Trng::seed_from(seed);
        let model = MambaModel::new(&cfg, &mut rng).unwrap();
        let x = motionssm_core::taskgen::gen_updown_twice(seed).channels();
        let whole = {
            let mut tape = Tape::new();
            let mut r = Trng::seed_from(0);
            let out = model.forward(&mut tape, &x, Mode::Eval, &mut r).unwrap();
            tape.to_tensor(out)
        };
        let mut ctx = model.fresh_context();
        let mut preds = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let len = w.min(x.rows() - start);
            let chunk = x.slice_rows(start, len).unwrap();
            preds.push(model.stream_chunk(&chunk, &mut ctx).unwrap());
            start += len;
        }
        let refs: Vec<&Tensor> = preds.iter().collect();
        let joined = Tensor::vstack(&refs).unwrap();
        prop_assert!(joined.max_abs_diff(&whole).unwrap() <= 1e-9);
    }
}
