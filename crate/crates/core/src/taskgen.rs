//! Synthetic 16-channel trial generation for the four evaluation tasks.
//!
//! Trials are joint-space signal surrogates, not physics: task difficulty
//! is encoded as signal structure. The repetitive up-down task is solvable
//! from any window covering one period; the "twice then stop" task embeds a
//! window ambiguity (a pre-stop window that matches a mid-cycle window
//! bit-for-bit up to noise) so that no 20-step observer can predict the
//! stop — that ambiguity is a checkable dataset property, not a hope.
//! Cup placing and case loading are waypoint trajectories with phase marks;
//! case loading adds contact torque spikes and higher waypoint variability.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Trng;
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Control cycle of the demonstration data.
pub const DT: f64 = 0.1;
pub const N_JOINTS: usize = 8;
pub const N_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TaskKind {
    UpdownRepetitive,
    UpdownTwice,
    CupPlacing,
    CaseLoading,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::UpdownRepetitive,
        TaskKind::UpdownTwice,
        TaskKind::CupPlacing,
        TaskKind::CaseLoading,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::UpdownRepetitive => "updown-repetitive",
            TaskKind::UpdownTwice => "updown-twice",
            TaskKind::CupPlacing => "cup-placing",
            TaskKind::CaseLoading => "case-loading",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PhaseLabel {
    Posture,
    Approach,
    Grasp,
    Carry,
    Place,
    Release,
    Stop,
}

impl PhaseLabel {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseLabel::Posture => "posture",
            PhaseLabel::Approach => "approach",
            PhaseLabel::Grasp => "grasp",
            PhaseLabel::Carry => "carry",
            PhaseLabel::Place => "place",
            PhaseLabel::Release => "release",
            PhaseLabel::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Option<PhaseLabel> {
        [
            PhaseLabel::Posture,
            PhaseLabel::Approach,
            PhaseLabel::Grasp,
            PhaseLabel::Carry,
            PhaseLabel::Place,
            PhaseLabel::Release,
            PhaseLabel::Stop,
        ]
        .into_iter()
        .find(|l| l.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PhaseMark {
    pub step: usize,
    pub label: PhaseLabel,
}

/// One demonstration/rollout: 8 joint angles (rad) and 8 joint torques (Nm)
/// over time, with task metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub dt: f64,
    /// [T, 8]
    pub angles: Tensor,
    /// [T, 8]
    pub torques: Tensor,
    pub task: TaskKind,
    pub trial_id: String,
    pub seed: u64,
    pub phase_marks: Vec<PhaseMark>,
}

impl TrialLog {
    pub fn len(&self) -> usize {
        self.angles.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    /// All 16 channels as one [T, 16] tensor (angles then torques), the
    /// model input layout.
    pub fn channels(&self) -> Tensor {
        Tensor::hcat(&self.angles, &self.torques).expect("angle/torque rows match")
    }

    pub fn mark(&self, label: PhaseLabel) -> Option<usize> {
        self.phase_marks
            .iter()
            .find(|m| m.label == label)
            .map(|m| m.step)
    }

    /// Max |angle[t+1] - angle[t]| over all steps and joints.
    pub fn max_angle_slew(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.len().saturating_sub(1) {
            for j in 0..N_JOINTS {
                worst = worst.max(math::abs(self.angles.at2(t + 1, j) - self.angles.at2(t, j)));
            }
        }
        worst
    }
}

/// Contact disturbance parameters (case loading only).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ContactSpec {
    pub max_spikes: usize,
    pub magnitude: f64,
}

impl Default for ContactSpec {
    fn default() -> Self {
        Self {
            max_spikes: 3,
            magnitude: 0.8,
        }
    }
}

/// Generator parameters for one task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// White-noise std on torques; angles get half of it.
    pub noise_std: f64,
    /// Start-pose jitter std (rad); stays within the "placed with <= 5 mm
    /// error" regime of the setup.
    pub start_jitter: f64,
    /// Per-waypoint jitter std.
    pub waypoint_jitter: f64,
    /// Relative amplitude jitter for the periodic tasks.
    pub amp_jitter: f64,
    /// Start-phase jitter (steps) for the periodic tasks.
    pub phase_jitter_steps: usize,
    /// Max |angle step| the generator may produce.
    pub slew_limit: f64,
    pub contact: Option<ContactSpec>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::for_kind(TaskKind::UpdownRepetitive)
    }
}

impl TaskSpec {
    pub fn for_kind(kind: TaskKind) -> Self {
        let base = Self {
            kind,
            noise_std: 0.004,
            start_jitter: 0.02,
            waypoint_jitter: 0.02,
            amp_jitter: 0.05,
            phase_jitter_steps: 5,
            slew_limit: 0.3,
            contact: None,
        };
        match kind {
            TaskKind::CaseLoading => Self {
                waypoint_jitter: 0.06,
                contact: Some(ContactSpec::default()),
                ..base
            },
            _ => base,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<TrialLog> {
        let trial = match self.kind {
            TaskKind::UpdownRepetitive => self.gen_updown(seed, UPDOWN_CYCLES_FOREVER)?,
            TaskKind::UpdownTwice => self.gen_updown(seed, 2)?,
            TaskKind::CupPlacing => self.gen_waypoint_task(seed, false)?,
            TaskKind::CaseLoading => self.gen_waypoint_task(seed, true)?,
        };
        debug_assert!(trial.max_angle_slew() <= self.slew_limit);
        Ok(trial)
    }

    // ── Up-and-down tasks ───────────────────────────────────────────

    fn gen_updown(&self, seed: u64, cycles: usize) -> Result<TrialLog> {
        let t_len = UPDOWN_STEPS;
        let period = UPDOWN_PERIOD_STEPS;
        let mut noise = Trng::derive(seed, 1);
        let mut jit = Trng::derive(seed, 2);

        let phase_off = if self.phase_jitter_steps > 0 {
            jit.below(self.phase_jitter_steps + 1)
        } else {
            0
        };
        let base_jitter: Vec<f64> = (0..N_JOINTS)
            .map(|_| jit.normal_scaled(self.start_jitter))
            .collect();
        let amps: Vec<f64> = UPDOWN_AMPS
            .iter()
            .map(|&a| a * (1.0 + jit.normal_scaled(self.amp_jitter)))
            .collect();

        // Active motion covers [phase_off, phase_off + cycles*period); the
        // repetitive variant never stops inside the trial.
        let active_until = if cycles == UPDOWN_CYCLES_FOREVER {
            t_len
        } else {
            phase_off + cycles * period
        };

        let mut angles = Tensor::zeros([t_len, N_JOINTS]);
        let mut torques = Tensor::zeros([t_len, N_JOINTS]);
        let mut marks = Vec::new();
        if active_until < t_len {
            marks.push(PhaseMark {
                step: active_until,
                label: PhaseLabel::Stop,
            });
        }
        for t in 0..t_len {
            for j in 0..N_JOINTS {
                let (offset, vel) = if t >= phase_off && t < active_until {
                    updown_wave(t - phase_off, period, amps[j])
                } else {
                    (0.0, 0.0)
                };
                let q = UPDOWN_BASE[j] + base_jitter[j] + offset;
                let tau = TORQUE_GAIN[j] * vel;
                angles.set2(t, j, q + noise.normal_scaled(self.noise_std * 0.5));
                torques.set2(t, j, tau + noise.normal_scaled(self.noise_std));
            }
        }
        Ok(TrialLog {
            dt: DT,
            angles,
            torques,
            task: self.kind,
            trial_id: String::new(),
            seed,
            phase_marks: marks,
        })
    }

    // ── Waypoint tasks ──────────────────────────────────────────────

    fn gen_waypoint_task(&self, seed: u64, loading: bool) -> Result<TrialLog> {
        let t_len = WAYPOINT_STEPS;
        let mut noise = Trng::derive(seed, 1);
        let mut jit = Trng::derive(seed, 2);
        let mut contact_rng = Trng::derive(seed, 3);

        // Object-position jitter shifts the approach/grasp/place poses
        // coherently; waypoint jitter is independent per knot.
        let obj_jitter: Vec<f64> = (0..N_JOINTS)
            .map(|_| jit.normal_scaled(self.start_jitter))
            .collect();

        let knot_steps: &[usize] = &WAYPOINT_KNOT_STEPS;
        let poses: &[[f64; N_JOINTS]] = if loading { &CASE_POSES } else { &CUP_POSES };

        // Per-joint knot values with jitter.
        let mut paths: Vec<WaypointPath> = Vec::with_capacity(7);
        for j in 0..7 {
            let mut knots = Vec::with_capacity(knot_steps.len());
            for (ki, &ks) in knot_steps.iter().enumerate() {
                let mut v = poses[ki][j];
                // Knots tied to the object pose (approach through set-down).
                if (2..=6).contains(&ki) {
                    v += obj_jitter[j];
                }
                if ki > 0 {
                    v += jit.normal_scaled(self.waypoint_jitter);
                }
                knots.push((ks, v));
            }
            paths.push(WaypointPath { knots });
        }

        let marks = vec![
            PhaseMark {
                step: WAYPOINT_KNOT_STEPS[1],
                label: PhaseLabel::Posture,
            },
            PhaseMark {
                step: WAYPOINT_KNOT_STEPS[2],
                label: PhaseLabel::Approach,
            },
            PhaseMark {
                step: GRASP_START,
                label: PhaseLabel::Grasp,
            },
            PhaseMark {
                step: CARRY_START,
                label: PhaseLabel::Carry,
            },
            PhaseMark {
                step: PLACE_START,
                label: PhaseLabel::Place,
            },
            PhaseMark {
                step: RELEASE_START,
                label: PhaseLabel::Release,
            },
        ];

        // Contact spikes on the shoulder/elbow torques during insertion.
        let mut spikes: Vec<(usize, usize, f64)> = Vec::new();
        if let Some(c) = self.contact {
            let n = 1 + contact_rng.below(c.max_spikes.max(1));
            for _ in 0..n {
                let at = PLACE_START + contact_rng.below(RELEASE_START - PLACE_START);
                let joint = 1 + contact_rng.below(3);
                let mag = c.magnitude * (0.5 + contact_rng.uniform01());
                let sign = if contact_rng.uniform01() < 0.5 { -1.0 } else { 1.0 };
                spikes.push((at, joint, sign * mag));
            }
        }

        let mut angles = Tensor::zeros([t_len, N_JOINTS]);
        let mut torques = Tensor::zeros([t_len, N_JOINTS]);
        for t in 0..t_len {
            for j in 0..7 {
                let (q, vel) = paths[j].eval(t);
                let mut tau = TORQUE_GAIN[j] * vel;
                // Payload while holding the object.
                if (1..=2).contains(&j) {
                    tau += HOLD_LOAD * hold_fraction(t);
                }
                for &(at, sj, mag) in &spikes {
                    if sj == j && (t == at || t == at + 1) {
                        tau += if t == at { mag } else { mag * 0.4 };
                    }
                }
                angles.set2(t, j, q + noise.normal_scaled(self.noise_std * 0.5));
                torques.set2(t, j, tau + noise.normal_scaled(self.noise_std));
            }
            // Gripper: closes monotonically over the grasp phase, opens at
            // release.
            let g = gripper_value(t);
            let gv = gripper_rate(t);
            angles.set2(t, 7, g + noise.normal_scaled(self.noise_std * 0.25));
            torques.set2(
                t,
                7,
                TORQUE_GAIN[7] * gv
                    + GRIP_LOAD * hold_fraction(t)
                    + noise.normal_scaled(self.noise_std),
            );
        }
        Ok(TrialLog {
            dt: DT,
            angles,
            torques,
            task: self.kind,
            trial_id: String::new(),
            seed,
            phase_marks: marks,
        })
    }
}

const UPDOWN_CYCLES_FOREVER: usize = usize::MAX;
const UPDOWN_STEPS: usize = 100;
const UPDOWN_PERIOD_STEPS: usize = 20;
const UPDOWN_BASE: [f64; N_JOINTS] = [0.1, 0.4, -0.2, 0.8, 0.0, 0.5, 0.0, 0.0];
const UPDOWN_AMPS: [f64; N_JOINTS] = [0.0, 0.5, 0.0, 0.8, 0.0, 0.3, 0.0, 0.0];
const TORQUE_GAIN: [f64; N_JOINTS] = [1.2, 1.5, 0.8, 1.0, 0.5, 0.4, 0.3, 0.2];

const WAYPOINT_STEPS: usize = 100;
/// Knot steps: start hold, posture, above object, descend, lift, transfer,
/// set down, retreat, end.
const WAYPOINT_KNOT_STEPS: [usize; 9] = [0, 10, 25, 45, 55, 70, 78, 90, 99];
const GRASP_START: usize = 45;
const GRASP_END: usize = 55;
const CARRY_START: usize = 55;
const PLACE_START: usize = 70;
const RELEASE_START: usize = 78;
const RELEASE_END: usize = 86;
const HOLD_LOAD: f64 = 0.35;
const GRIP_LOAD: f64 = 0.15;
const GRIP_CLOSED: f64 = 0.8;

/// Joint poses at each knot for cup placing.
const CUP_POSES: [[f64; N_JOINTS]; 9] = [
    [0.10, 0.40, -0.20, 0.80, 0.00, 0.50, 0.00, 0.0],
    [0.10, 0.40, -0.20, 0.80, 0.00, 0.50, 0.00, 0.0],
    [0.45, 0.65, -0.10, 1.10, 0.10, 0.35, 0.05, 0.0],
    [0.60, 0.85, 0.00, 1.30, 0.15, 0.20, 0.10, 0.0],
    [0.60, 0.70, 0.00, 1.15, 0.15, 0.30, 0.10, 0.0],
    [-0.20, 0.55, 0.15, 0.95, -0.10, 0.45, -0.05, 0.0],
    [-0.35, 0.75, 0.20, 1.20, -0.15, 0.30, -0.10, 0.0],
    [-0.10, 0.45, 0.00, 0.85, 0.00, 0.50, 0.00, 0.0],
    [0.10, 0.40, -0.20, 0.80, 0.00, 0.50, 0.00, 0.0],
];

/// Case loading reaches further and inserts lower.
const CASE_POSES: [[f64; N_JOINTS]; 9] = [
    [0.10, 0.40, -0.20, 0.80, 0.00, 0.50, 0.00, 0.0],
    [0.10, 0.45, -0.15, 0.85, 0.00, 0.50, 0.00, 0.0],
    [0.55, 0.75, -0.05, 1.20, 0.12, 0.30, 0.08, 0.0],
    [0.70, 0.95, 0.05, 1.40, 0.18, 0.15, 0.12, 0.0],
    [0.70, 0.78, 0.05, 1.22, 0.18, 0.28, 0.12, 0.0],
    [-0.30, 0.60, 0.20, 1.00, -0.12, 0.42, -0.08, 0.0],
    [-0.45, 0.90, 0.28, 1.35, -0.18, 0.22, -0.14, 0.0],
    [-0.15, 0.50, 0.05, 0.90, 0.00, 0.48, 0.00, 0.0],
    [0.10, 0.40, -0.20, 0.80, 0.00, 0.50, 0.00, 0.0],
];

/// (position offset, velocity rad/s) of the raised-cosine up-down waveform,
/// exactly periodic in integer steps.
fn updown_wave(t_active: usize, period: usize, amp: f64) -> (f64, f64) {
    let phase = (t_active % period) as f64 / period as f64;
    let ang = 2.0 * math::PI * phase;
    let pos = amp * 0.5 * (1.0 - math::cos(ang));
    let vel = amp * math::PI / (period as f64 * DT) * math::sin(ang);
    (pos, vel)
}

/// Quintic minimum-jerk ease 0 -> 1.
fn minjerk(tau: f64) -> f64 {
    tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau))
}

fn minjerk_rate(tau: f64) -> f64 {
    tau * tau * (30.0 + tau * (-60.0 + 30.0 * tau))
}

#[derive(Debug, Clone)]
struct WaypointPath {
    knots: Vec<(usize, f64)>,
}

impl WaypointPath {
    /// Position and velocity (per second) at integer step t.
    fn eval(&self, t: usize) -> (f64, f64) {
        let last = self.knots[self.knots.len() - 1];
        if t >= last.0 {
            return (last.1, 0.0);
        }
        let mut seg = 0;
        while self.knots[seg + 1].0 <= t {
            seg += 1;
        }
        let (t0, q0) = self.knots[seg];
        let (t1, q1) = self.knots[seg + 1];
        let span = (t1 - t0) as f64;
        let tau = (t - t0) as f64 / span;
        let pos = q0 + (q1 - q0) * minjerk(tau);
        let vel = (q1 - q0) * minjerk_rate(tau) / (span * DT);
        (pos, vel)
    }
}

/// Gripper closing/opening profile shared by the waypoint tasks.
fn gripper_value(t: usize) -> f64 {
    if t < GRASP_START {
        0.0
    } else if t < GRASP_END {
        let tau = (t - GRASP_START) as f64 / (GRASP_END - GRASP_START) as f64;
        GRIP_CLOSED * minjerk(tau)
    } else if t < RELEASE_START {
        GRIP_CLOSED
    } else if t < RELEASE_END {
        let tau = (t - RELEASE_START) as f64 / (RELEASE_END - RELEASE_START) as f64;
        GRIP_CLOSED * (1.0 - minjerk(tau))
    } else {
        0.0
    }
}

fn gripper_rate(t: usize) -> f64 {
    let span_close = (GRASP_END - GRASP_START) as f64 * DT;
    let span_open = (RELEASE_END - RELEASE_START) as f64 * DT;
    if (GRASP_START..GRASP_END).contains(&t) {
        let tau = (t - GRASP_START) as f64 / (GRASP_END - GRASP_START) as f64;
        GRIP_CLOSED * minjerk_rate(tau) / span_close
    } else if (RELEASE_START..RELEASE_END).contains(&t) {
        let tau = (t - RELEASE_START) as f64 / (RELEASE_END - RELEASE_START) as f64;
        -GRIP_CLOSED * minjerk_rate(tau) / span_open
    } else {
        0.0
    }
}

/// Fraction of the payload carried: load transfers smoothly while the
/// gripper tightens and falls away as it opens.
fn hold_fraction(t: usize) -> f64 {
    if t < GRASP_START || t >= RELEASE_END {
        0.0
    } else if t < GRASP_END {
        minjerk((t - GRASP_START) as f64 / (GRASP_END - GRASP_START) as f64)
    } else if t < RELEASE_START {
        1.0
    } else {
        1.0 - minjerk((t - RELEASE_START) as f64 / (RELEASE_END - RELEASE_START) as f64)
    }
}

// ── Spec-level convenience generators ────────────────────────────────

pub fn gen_updown_repetitive(seed: u64) -> TrialLog {
    TaskSpec::for_kind(TaskKind::UpdownRepetitive)
        .generate(seed)
        .expect("default spec generates")
}

pub fn gen_updown_twice(seed: u64) -> TrialLog {
    TaskSpec::for_kind(TaskKind::UpdownTwice)
        .generate(seed)
        .expect("default spec generates")
}

pub fn gen_cup_placing(seed: u64) -> TrialLog {
    TaskSpec::for_kind(TaskKind::CupPlacing)
        .generate(seed)
        .expect("default spec generates")
}

pub fn gen_case_loading(seed: u64) -> TrialLog {
    TaskSpec::for_kind(TaskKind::CaseLoading)
        .generate(seed)
        .expect("default spec generates")
}

// ── Datasets ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<TrialLog>,
    pub test: Vec<TrialLog>,
}

pub const DEFAULT_TRAIN_TRIALS: usize = 18;
pub const DEFAULT_TEST_TRIALS: usize = 6;

/// Split sizes follow the experimental protocol: 18 train / 6 test by
/// default. Trial seeds are derived disjointly from the base seed.
pub fn make_dataset(spec: &TaskSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(CoreError::parameter(
            "make_dataset",
            "train and test sizes must be positive",
        ));
    }
    let gen = |group: &str, offset: u64, count: usize| -> Result<Vec<TrialLog>> {
        (0..count)
            .map(|i| {
                let trial_seed = crate::rng::mix(seed, offset + i as u64);
                let mut t = spec.generate(trial_seed)?;
                t.trial_id = alloc::format!("{}-{}-{:03}", spec.kind.name(), group, i);
                Ok(t)
            })
            .collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: gen("train", 0, n_train)?,
        test: gen("test", 1_000_000, n_test)?,
    })
}

/// Mean across-trial variance of the angle channels at the given probe
/// steps; the inter-trial variability statistic.
pub fn angle_variance_across_trials(trials: &[TrialLog], probe_steps: &[usize]) -> f64 {
    if trials.is_empty() || probe_steps.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0;
    for &t in probe_steps {
        for j in 0..N_JOINTS {
            let vals: Vec<f64> = trials.iter().map(|tr| tr.angles.at2(t, j)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            total += var;
            count += 1;
        }
    }
    total / count as f64
}

// ── Window-ambiguity certificate ─────────────────────────────────────

/// Proof that a w-step observer cannot decide the stop: a window ending
/// just before the stop whose values match an earlier mid-cycle window,
/// while their continuations diverge.
#[derive(Debug, Clone, Copy)]
pub struct AmbiguityCert {
    /// Last step of the pre-stop window.
    pub pre_stop_end: usize,
    /// Last step of the matching mid-cycle window.
    pub twin_end: usize,
    /// Sup-norm distance between the two windows over all 16 channels.
    pub window_dist: f64,
    /// Sup-norm distance between the two continuations.
    pub continuation_gap: f64,
}

/// Search an updown-twice trial for the certificate. `horizon` is how far
/// past the window the continuations are compared.
pub fn window_ambiguity_certificate(
    trial: &TrialLog,
    w: usize,
    horizon: usize,
    eps_window: f64,
    min_gap: f64,
) -> Result<Option<AmbiguityCert>> {
    let stop = trial
        .mark(PhaseLabel::Stop)
        .ok_or(CoreError::MissingPhaseMark {
            label: "stop",
            trial: trial.trial_id.clone(),
        })?;
    let x = trial.channels();
    let t_len = x.rows();
    if stop < w || stop + horizon > t_len {
        return Ok(None);
    }
    let pre_end = stop - 1;
    let dist = |e0: usize, e1: usize, len: usize, forward: bool| -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..len {
            let (r0, r1) = if forward {
                (e0 + 1 + k, e1 + 1 + k)
            } else {
                (e0 + 1 - len + k, e1 + 1 - len + k)
            };
            for c in 0..N_CHANNELS {
                worst = worst.max(math::abs(x.at2(r0, c) - x.at2(r1, c)));
            }
        }
        worst
    };
    let mut best: Option<AmbiguityCert> = None;
    for twin_end in (w - 1)..pre_end {
        if twin_end + 1 + horizon > t_len || twin_end == pre_end {
            continue;
        }
        let wd = dist(pre_end, twin_end, w, false);
        if wd > eps_window {
            continue;
        }
        let gap = dist(pre_end, twin_end, horizon, true);
        if gap < min_gap {
            continue;
        }
        let cert = AmbiguityCert {
            pre_stop_end: pre_end,
            twin_end,
            window_dist: wd,
            continuation_gap: gap,
        };
        if best.map_or(true, |b| wd < b.window_dist) {
            best = Some(cert);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn updown_repetitive_duration() {
        let t = gen_updown_repetitive(7);
        assert_eq!(t.len(), 100);
        assert!((t.duration() - 10.0).abs() < 1e-12);
        assert_eq!(t.dt, DT);
    }

    #[test]
    fn updown_noiseless_exact_periodicity() {
        let mut spec = TaskSpec::for_kind(TaskKind::UpdownRepetitive);
        spec.noise_std = 0.0;
        spec.phase_jitter_steps = 0;
        let t = spec.generate(3).unwrap();
        let x = t.channels();
        let p = UPDOWN_PERIOD_STEPS;
        for step in 0..(t.len() - p) {
            for c in 0..N_CHANNELS {
                let d = (x.at2(step, c) - x.at2(step + p, c)).abs();
                assert!(d <= 1e-12, "step {step} chan {c}: {d}");
            }
        }
    }

    #[test]
    fn updown_seeds_share_waveform_family() {
        let a = gen_updown_repetitive(11);
        let b = gen_updown_repetitive(12);
        // Align phases by trying all offsets; keep the best correlation on
        // the most active joint.
        let j = 3;
        let mut best = -1.0f64;
        for off in 0..UPDOWN_PERIOD_STEPS {
            let n = a.len() - off;
            let xa: Vec<f64> = (0..n).map(|t| a.angles.at2(t, j)).collect();
            let xb: Vec<f64> = (0..n).map(|t| b.angles.at2(t + off, j)).collect();
            best = best.max(correlation(&xa, &xb));
        }
        assert!(best > 0.9, "best aligned correlation {best}");
    }

    #[test]
    fn updown_twice_holds_tail_constant() {
        let t = gen_updown_twice(5);
        let stop = t.mark(PhaseLabel::Stop).unwrap();
        assert!(stop <= 46, "stop at {stop}");
        // Final 30% of samples constant to noise level.
        let from = t.len() - t.len() * 3 / 10;
        let spec = TaskSpec::for_kind(TaskKind::UpdownTwice);
        for j in 0..N_JOINTS {
            let v0 = t.angles.at2(from, j);
            for step in from..t.len() {
                let d = (t.angles.at2(step, j) - v0).abs();
                assert!(d < 8.0 * spec.noise_std, "joint {j} step {step}: {d}");
            }
        }
        // Duration decomposes into two periods plus the hold.
        let hold = t.len() - stop;
        assert!(hold >= 54);
    }

    #[test]
    fn updown_twice_certificate_exists_for_many_seeds() {
        let spec = TaskSpec::for_kind(TaskKind::UpdownTwice);
        for seed in 0..40u64 {
            let t = spec.generate(crate::rng::mix(99, seed)).unwrap();
            let cert = window_ambiguity_certificate(&t, 20, 8, 8.0 * spec.noise_std, 0.1)
                .unwrap()
                .unwrap_or_else(|| panic!("no certificate for seed {seed}"));
            assert!(cert.window_dist <= 8.0 * spec.noise_std);
            assert!(cert.continuation_gap >= 0.1);
        }
    }

    #[test]
    fn gripper_closes_monotonically_during_grasp() {
        let t = gen_cup_placing(21);
        let grasp = t.mark(PhaseLabel::Grasp).unwrap();
        assert_eq!(grasp, GRASP_START);
        for step in GRASP_START..GRASP_END {
            assert!(gripper_value(step + 1) >= gripper_value(step));
        }
        assert!(gripper_value(GRASP_END) > gripper_value(GRASP_START));
        // And the noisy channel still rises across the phase.
        assert!(t.angles.at2(GRASP_END, 7) > t.angles.at2(GRASP_START, 7) + 0.5);
    }

    #[test]
    fn waypoint_tasks_have_phase_marks() {
        for t in [gen_cup_placing(4), gen_case_loading(4)] {
            for label in [
                PhaseLabel::Posture,
                PhaseLabel::Approach,
                PhaseLabel::Grasp,
                PhaseLabel::Release,
            ] {
                assert!(t.mark(label).is_some(), "{:?} missing {label:?}", t.task);
            }
        }
    }

    #[test]
    fn case_loading_has_higher_waypoint_variance() {
        let cup = make_dataset(&TaskSpec::for_kind(TaskKind::CupPlacing), 18, 6, 31).unwrap();
        let case = make_dataset(&TaskSpec::for_kind(TaskKind::CaseLoading), 18, 6, 31).unwrap();
        let probes: Vec<usize> = vec![30, 50, 65, 80];
        let v_cup = angle_variance_across_trials(&cup.train, &probes);
        let v_case = angle_variance_across_trials(&case.train, &probes);
        assert!(v_case > v_cup, "case variance {v_case} not above cup {v_cup}");
    }

    #[test]
    fn dataset_split_sizes_and_disjoint_seeds() {
        let ds = make_dataset(
            &TaskSpec::for_kind(TaskKind::UpdownTwice),
            DEFAULT_TRAIN_TRIALS,
            DEFAULT_TEST_TRIALS,
            7,
        )
        .unwrap();
        assert_eq!(ds.train.len(), 18);
        assert_eq!(ds.test.len(), 6);
        let mut seeds: Vec<u64> = ds
            .train
            .iter()
            .chain(ds.test.iter())
            .map(|t| t.seed)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 24, "trial seeds overlap");
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = TaskSpec::for_kind(TaskKind::CaseLoading);
        let a = spec.generate(123).unwrap();
        let b = spec.generate(123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slew_limit_respected() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::for_kind(kind);
            for seed in 0..5 {
                let t = spec.generate(seed).unwrap();
                assert!(
                    t.max_angle_slew() <= spec.slew_limit,
                    "{kind:?} seed {seed}: slew {}",
                    t.max_angle_slew()
                );
                assert!(t.torques.is_finite());
            }
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        num / (va.sqrt() * vb.sqrt()).max(1e-300)
    }
}
