//! Sequence-level training loop: MSE on N-ahead targets, AdamW with
//! decoupled weight decay, deterministic given (config, seed).
//!
//! Batching is whole trials: per optimizer step, gradients are averaged
//! over a fixed-order batch of trials, which keeps reduction order (and
//! therefore results) bit-reproducible.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::model::Predictor;
use crate::rng::Trng;
use crate::tape::{Mode, Tape};
use crate::taskgen::TrialLog;
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Trials per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Abort when the train loss exceeds this or goes non-finite.
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 150,
            batch_size: 6,
            seed: 0,
            divergence_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CoreError::parameter("train_config", "lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(CoreError::parameter(
                    "train_config",
                    alloc::format!("{name} must be in (0, 1)"),
                ));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::parameter(
                "train_config",
                "epochs and batch_size must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-parameter AdamW moments, aligned with the model's visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_model(model: &Predictor) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, t| m.push(alloc::vec![0.0; t.numel()]));
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step over named gradients (visit order).
/// Decay multiplies the weights directly; bias-corrected moments drive the
/// adaptive update.
pub fn adamw_step(
    model: &mut Predictor,
    grads: &[(String, Vec<f64>)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - math::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - math::pow(cfg.beta2, t as f64);
    let mut idx = 0;
    let mut err: Option<CoreError> = None;
    model.visit_params_mut(&mut |name, param| {
        if err.is_some() {
            return;
        }
        let (gname, grad) = &grads[idx];
        debug_assert_eq!(gname, name);
        if !grad.iter().all(|g| math::is_finite(*g)) {
            err = Some(CoreError::BadGradient {
                name: String::from(name),
            });
            return;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = param.data_mut();
        for i in 0..data.len() {
            // Decoupled decay: applied to the weight, not via the gradient.
            data[i] *= 1.0 - cfg.lr * cfg.weight_decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(())
}

/// Per-epoch train and test losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: LossCurve,
    pub best_test_loss: f64,
    pub best_epoch: usize,
}

/// Train in place; the model ends at the best-test-loss checkpoint.
/// Deterministic given (model, data, config): trial shuffling and dropout
/// streams derive from `cfg.seed`.
pub fn train(
    model: &mut Predictor,
    train_set: &[TrialLog],
    test_set: &[TrialLog],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::Empty { op: "train" });
    }
    let train_x: Vec<Tensor> = train_set.iter().map(|t| t.channels()).collect();
    let test_x: Vec<Tensor> = test_set.iter().map(|t| t.channels()).collect();

    let mut state = AdamState::for_model(model);
    let mut curve = LossCurve::default();
    let mut shuffle_rng = Trng::derive(cfg.seed, 101);
    let mut dropout_rng = Trng::derive(cfg.seed, 202);
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;

    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<(String, Vec<f64>)> = Vec::new();
            let mut batch_loss = 0.0;
            for &ti in batch {
                let mut tape = Tape::new();
                let loss =
                    model.trial_loss(&mut tape, &train_x[ti], Mode::Train, &mut dropout_rng)?;
                batch_loss += tape.data(loss)[0];
                tape.backward(loss)?;
                let grads = tape.param_grads();
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        debug_assert_eq!(a.0, g.0);
                        for (av, gv) in a.1.iter_mut().zip(&g.1) {
                            *av += *gv;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, g) in acc.iter_mut() {
                for gv in g.iter_mut() {
                    *gv *= inv;
                }
            }
            adamw_step(model, &acc, &mut state, cfg)?;
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_x.len() as f64;
        if !math::is_finite(train_loss) || train_loss > cfg.divergence_limit {
            return Err(CoreError::Diverged {
                epoch,
                loss: train_loss,
            });
        }

        let test_loss = if test_x.is_empty() {
            train_loss
        } else {
            eval_loss(model, &test_x)?
        };
        curve.train.push(train_loss);
        curve.test.push(test_loss);
        if best.as_ref().map_or(true, |(b, _, _)| test_loss < *b) {
            best = Some((test_loss, epoch, model.param_snapshot()));
        }
    }

    let (best_test_loss, best_epoch, snapshot) = best.expect("at least one epoch");
    model.load_snapshot(&snapshot)?;
    Ok(TrainOutcome {
        curve,
        best_test_loss,
        best_epoch,
    })
}

/// Mean eval-mode loss over a set of trials.
pub fn eval_loss(model: &Predictor, xs: &[Tensor]) -> Result<f64> {
    if xs.is_empty() {
        return Err(CoreError::Empty { op: "eval_loss" });
    }
    let mut rng = Trng::seed_from(0);
    let mut total = 0.0;
    for x in xs {
        let mut tape = Tape::new();
        let loss = model.trial_loss(&mut tape, x, Mode::Eval, &mut rng)?;
        total += tape.data(loss)[0];
    }
    Ok(total / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LstmConfig, LstmModel, MambaConfig, MambaModel};
    use crate::ssm::ADiag;
    use crate::taskgen::{gen_updown_repetitive, TaskKind, TaskSpec};

    fn tiny_mamba(seed: u64) -> Predictor {
        let cfg = MambaConfig::default();
        let mut rng = Trng::seed_from(seed);
        Predictor::Mamba(MambaModel::new(&cfg, &mut rng).unwrap())
    }

    #[test]
    fn adamw_zero_grad_zero_decay_keeps_params() {
        let mut model = tiny_mamba(1);
        let before = model.param_snapshot();
        let grads: Vec<(String, Vec<f64>)> = before
            .iter()
            .map(|(n, t)| (n.clone(), alloc::vec![0.0; t.numel()]))
            .collect();
        let mut state = AdamState::for_model(&model);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut model, &grads, &mut state, &cfg).unwrap();
        assert_eq!(model.param_snapshot(), before);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        // Scalar w = 1, g = 1, lr = 1e-3, wd = 0: bias-corrected first step
        // moves by exactly lr / (1 + eps').
        let mut w = 1.0f64;
        let mut m = 0.0;
        let mut v = 0.0;
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = 1.0f64;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        assert!((w - 0.999).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn adamw_decay_shrinks_by_factor() {
        let mut model = tiny_mamba(2);
        let before = model.param_snapshot();
        let grads: Vec<(String, Vec<f64>)> = before
            .iter()
            .map(|(n, t)| (n.clone(), alloc::vec![0.0; t.numel()]))
            .collect();
        let mut state = AdamState::for_model(&model);
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        adamw_step(&mut model, &grads, &mut state, &cfg).unwrap();
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        let after = model.param_snapshot();
        for ((_, b), (_, a)) in before.iter().zip(&after) {
            for (bv, av) in b.data().iter().zip(a.data()) {
                assert!((av - bv * factor).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adamw_matches_scalar_reference_over_100_steps() {
        // Reference: an independent textbook implementation on one scalar.
        let (lr, b1, b2, eps, wd) = (1e-3, 0.9, 0.999, 1e-8, 0.004);
        let mut w_ref = 0.7f64;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut grads_used = Vec::new();
        let mut rng = Trng::seed_from(9);
        for t in 1..=100u64 {
            let g = rng.uniform(-1.0, 1.0);
            grads_used.push(g);
            w_ref *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        // Same trajectory through the optimizer under test, on a model with
        // a single visited scalar parameter: reuse mamba and only check one
        // element by zeroing all other grads.
        let mut model = tiny_mamba(3);
        let snap = model.param_snapshot();
        let mut state = AdamState::for_model(&model);
        let cfg = TrainConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..TrainConfig::default()
        };
        // Set first parameter's first element to 0.7.
        let mut snap0 = snap.clone();
        snap0[0].1.data_mut()[0] = 0.7;
        let mut m2 = model.clone();
        m2.load_snapshot(&snap0).unwrap();
        for g in &grads_used {
            let grads: Vec<(String, Vec<f64>)> = snap0
                .iter()
                .enumerate()
                .map(|(i, (n, t))| {
                    let mut gv = alloc::vec![0.0; t.numel()];
                    if i == 0 {
                        gv[0] = *g;
                    }
                    (n.clone(), gv)
                })
                .collect();
            adamw_step(&mut m2, &grads, &mut state, &cfg).unwrap();
        }
        let got = m2.param_snapshot()[0].1.data()[0];
        assert!(
            (got - w_ref).abs() <= 1e-12,
            "optimizer {got} vs reference {w_ref}"
        );
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut model = tiny_mamba(4);
        let mut grads: Vec<(String, Vec<f64>)> = model
            .param_snapshot()
            .iter()
            .map(|(n, t)| (n.clone(), alloc::vec![0.0; t.numel()]))
            .collect();
        grads[2].1[0] = f64::NAN;
        let name = grads[2].0.clone();
        let mut state = AdamState::for_model(&model);
        match adamw_step(&mut model, &grads, &mut state, &TrainConfig::default()) {
            Err(CoreError::BadGradient { name: n }) => assert_eq!(n, name),
            other => panic!("expected BadGradient, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_curve() {
        let spec = TaskSpec::for_kind(TaskKind::UpdownRepetitive);
        let train: Vec<_> = (0..3).map(|i| spec.generate(i).unwrap()).collect();
        let test: Vec<_> = (10..12).map(|i| spec.generate(i).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_mamba(7);
            train_curve(&mut model, &train, &test, &cfg)
        };
        assert_eq!(run(), run());
    }

    fn train_curve(
        model: &mut Predictor,
        tr: &[TrialLog],
        te: &[TrialLog],
        cfg: &TrainConfig,
    ) -> LossCurve {
        train(model, tr, te, cfg).unwrap().curve
    }

    #[test]
    fn overfits_single_repeated_trial() {
        // One trial used for train and test; loss must fall below 10% of
        // the first epoch's loss within 200 optimizer steps. Dropout off so
        // the oracle measures optimization, not regularization noise.
        let trial = gen_updown_repetitive(42);
        let train_set = alloc::vec![trial.clone()];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let model_cfg = MambaConfig {
            keep_prob: 1.0,
            ..MambaConfig::default()
        };
        let mut rng = Trng::seed_from(8);
        let mut model = Predictor::Mamba(MambaModel::new(&model_cfg, &mut rng).unwrap());
        let out = train(&mut model, &train_set, &train_set, &cfg).unwrap();
        let first = out.curve.train[0];
        let last = *out.curve.train.last().unwrap();
        assert!(
            last < 0.1 * first,
            "loss {last} did not reach 10% of initial {first}"
        );
    }

    #[test]
    fn lstm_overfits_single_batch() {
        let trial = gen_updown_repetitive(43);
        let train_set = alloc::vec![trial.clone()];
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = Trng::seed_from(10);
        let mut model = Predictor::Lstm(LstmModel::new(&LstmConfig::default(), &mut rng).unwrap());
        let out = train(&mut model, &train_set, &train_set, &cfg).unwrap();
        let first = out.curve.train[0];
        let last = *out.curve.train.last().unwrap();
        assert!(last < 0.1 * first, "lstm loss {last} vs initial {first}");
    }

    #[test]
    fn horizon_alignment_on_constant_data() {
        // On constant signals, next-step equals current; the model must be
        // able to drive the loss essentially to the noise floor (zero).
        let mut angles = Tensor::zeros([60, 8]);
        for t in 0..60 {
            for j in 0..8 {
                angles.set2(t, j, 0.3 * (j as f64 + 1.0) / 8.0);
            }
        }
        let trial = TrialLog {
            dt: 0.1,
            angles: angles.clone(),
            torques: Tensor::zeros([60, 8]),
            task: TaskKind::UpdownRepetitive,
            trial_id: String::from("const"),
            seed: 0,
            phase_marks: alloc::vec::Vec::new(),
        };
        let train_set = alloc::vec![trial];
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let model_cfg = MambaConfig {
            keep_prob: 1.0,
            ..MambaConfig::default()
        };
        let mut rng = Trng::seed_from(11);
        let mut model = Predictor::Mamba(MambaModel::new(&model_cfg, &mut rng).unwrap());
        let out = train(&mut model, &train_set, &train_set.clone(), &cfg).unwrap();
        let last = *out.curve.train.last().unwrap();
        assert!(last < 1e-4, "constant-data loss {last}");
    }

    #[test]
    fn fixed_a_is_bit_unchanged_learned_a_stays_negative() {
        let spec = TaskSpec::for_kind(TaskKind::UpdownRepetitive);
        let train_set: Vec<_> = (0..2).map(|i| spec.generate(i).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };

        // Fixed mode: a is not in the parameter set at all.
        let mut fixed = tiny_mamba(12);
        let a_before = match &fixed {
            Predictor::Mamba(m) => m.clone(),
            _ => unreachable!(),
        };
        train(&mut fixed, &train_set, &train_set, &cfg).unwrap();
        if let (Predictor::Mamba(after), before) = (&fixed, a_before) {
            let collect = |m: &MambaModel| {
                let mut v = Vec::new();
                m.visit_params(&mut |n, t| {
                    if n.contains("log_a") {
                        v.extend_from_slice(t.data());
                    }
                });
                v
            };
            assert!(collect(after).is_empty());
            assert!(collect(&before).is_empty());
        }

        // Learned mode: a = -exp(log_a) < 0 always.
        let cfg_model = MambaConfig {
            a_mode: crate::model::AMode::Learned,
            ..MambaConfig::default()
        };
        let mut rng = Trng::seed_from(13);
        let mut learned = Predictor::Mamba(MambaModel::new(&cfg_model, &mut rng).unwrap());
        train(&mut learned, &train_set, &train_set, &cfg).unwrap();
        if let Predictor::Mamba(m) = &learned {
            m.visit_params(&mut |n, t| {
                if n.contains("log_a") {
                    for &l in t.data() {
                        let a = -crate::math::exp(l);
                        assert!(a < 0.0);
                    }
                }
            });
        }
        let _ = ADiag::Fixed(alloc::vec![-1.0]);
    }
}
