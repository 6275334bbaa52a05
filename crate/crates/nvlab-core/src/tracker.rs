//! Closed-loop resonance tracking: the demodulated output serves as the
//! error signal of a quantized feedback loop that steps the carrier to
//! follow a drifting resonance, turning step history into a field record.

use serde::{Deserialize, Serialize};

use crate::analysis::field_from_shift;
use crate::nv::{resonance_frequencies, EnsembleParams, MagneticEnvironment};
use crate::signal::{
    demodulate, disturbance_axis, drift_offsets, snap_to_periods, synthesize_window,
    ChainInputs, DetectionConfig, MwDriveConfig, NoiseConfig, WindowCtx,
};
use crate::{Error, Result};

/// Noise streams reserved for the one-time slope probe, far above the
/// per-iteration streams.
const PROBE_STREAM_BASE: u64 = 1 << 63;

/// Configuration of the tracking loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Frequency adjustment per correction (Hz).
    pub step_quantum: f64,
    /// Integration time per loop iteration (s).
    pub t_int_per_iter: f64,
    /// Error threshold below which no step is taken (V). `None` derives it
    /// from the probed slope as half a quantum's worth of signal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_deadband: Option<f64>,
    /// Microwave drive template used while tracking.
    pub drive: MwDriveConfig,
    /// Starting carrier (Hz). `None` locks onto the center of the
    /// disturbance-axis resonance (upper branch, central hyperfine line).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_f_c: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            step_quantum: 250.0,
            t_int_per_iter: 1e-3,
            error_deadband: None,
            drive: MwDriveConfig::default(),
            initial_f_c: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_quantum > 0.0) {
            return Err(Error::invalid(format!(
                "step quantum must be positive, got {}",
                self.step_quantum
            )));
        }
        if let Some(db) = self.error_deadband {
            if !(db >= 0.0) {
                return Err(Error::invalid(format!(
                    "deadband must be >= 0, got {db}"
                )));
            }
        }
        if !(self.t_int_per_iter > 0.0) {
            return Err(Error::invalid(format!(
                "per-iteration integration time must be positive, got {}",
                self.t_int_per_iter
            )));
        }
        self.drive.validate()
    }
}

/// One node of a piecewise-linear field profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    /// Time (s).
    pub t: f64,
    /// Scalar field along the disturbance axis (T).
    pub delta_b: f64,
    /// Phase label active from this node on.
    pub label: String,
}

/// Time-dependent scalar field along the disturbance axis, linearly
/// interpolated between labeled nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScenario {
    pub nodes: Vec<ScenarioNode>,
}

impl FieldScenario {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() < 2 {
            return Err(Error::invalid(
                "scenario needs at least two nodes".to_string(),
            ));
        }
        if self.nodes[0].t != 0.0 {
            return Err(Error::invalid(format!(
                "scenario must start at t = 0, got {}",
                self.nodes[0].t
            )));
        }
        for w in self.nodes.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::invalid(
                    "scenario node times must be strictly increasing".to_string(),
                ));
            }
        }
        if !self.nodes.iter().all(|n| n.delta_b.is_finite()) {
            return Err(Error::invalid("scenario fields must be finite".to_string()));
        }
        Ok(())
    }

    /// Total scenario duration (s).
    pub fn duration(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.t)
    }

    /// Field at time `t`, clamped to the end values outside the profile.
    pub fn value_at(&self, t: f64) -> f64 {
        let nodes = &self.nodes;
        if t <= nodes[0].t {
            return nodes[0].delta_b;
        }
        for w in nodes.windows(2) {
            if t <= w[1].t {
                let frac = (t - w[0].t) / (w[1].t - w[0].t);
                return w[0].delta_b + frac * (w[1].delta_b - w[0].delta_b);
            }
        }
        nodes.last().unwrap().delta_b
    }

    /// Label of the phase containing `t`.
    pub fn label_at(&self, t: f64) -> &str {
        let mut label = self.nodes[0].label.as_str();
        for n in &self.nodes {
            if n.t <= t {
                label = n.label.as_str();
            } else {
                break;
            }
        }
        label
    }

    /// Peak slew rate of the profile (T/s).
    pub fn max_slew(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| ((w[1].delta_b - w[0].delta_b) / (w[1].t - w[0].t)).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-iteration record of a tracking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLog {
    /// Iteration start times (s).
    pub timestamps: Vec<f64>,
    /// Applied carrier per iteration (Hz).
    pub f_c: Vec<f64>,
    /// Field inferred from the carrier motion,
    /// `(f_c - f_c[0]) / gamma_NV` (T).
    pub delta_b: Vec<f64>,
    /// Raw error signal per iteration (V).
    pub s_demod: Vec<f64>,
    /// Whether the carrier had strayed more than three linewidths from the
    /// true center at this iteration.
    pub lock_lost: Vec<bool>,
    /// Ground-truth scenario field per iteration (T).
    pub true_delta_b: Vec<f64>,
    /// Scenario phase label per iteration.
    pub phase: Vec<String>,
    /// Step size the loop was run with (Hz).
    pub step_quantum: f64,
    /// Error threshold the loop actually used (V).
    pub deadband: f64,
}

/// A stereotypical elevator ride as a field profile: quiet floor, upward
/// acceleration, doors at the top, a waiting phase, doors closing, the
/// downward leg, and doors at the ground floor. Amplitudes are tens of nT
/// with 0.2 s ramps between the levels.
pub fn elevator_scenario() -> FieldScenario {
    let node = |t: f64, b: f64, label: &str| ScenarioNode {
        t,
        delta_b: b,
        label: label.to_string(),
    };
    FieldScenario {
        nodes: vec![
            node(0.0, 0.0, "ground"),
            node(3.0, 0.0, "up-move"),
            node(3.2, 40e-9, "up-move"),
            node(6.0, 40e-9, "doors-open-up"),
            node(6.2, 15e-9, "doors-open-up"),
            node(8.0, 15e-9, "wait"),
            node(8.2, 22e-9, "wait"),
            node(10.0, 22e-9, "doors-close"),
            node(10.2, 30e-9, "doors-close"),
            node(12.0, 30e-9, "down-move"),
            node(12.2, -25e-9, "down-move"),
            node(15.0, -25e-9, "doors-open-down"),
            node(15.2, -5e-9, "doors-open-down"),
            node(17.0, -5e-9, "doors-open-down"),
        ],
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Run the tracking loop over a field scenario.
///
/// Each iteration integrates the demodulated error signal for one loop
/// period at the current carrier; if it exceeds the deadband, the carrier
/// steps one quantum toward the zero-crossing (direction from the error
/// sign and a one-time two-point slope probe). Loss of lock (more than
/// three linewidths off the true center) is flagged in the log but does
/// not stop the loop.
#[allow(clippy::too_many_arguments)]
pub fn track(
    scenario: &FieldScenario,
    cfg: &TrackerConfig,
    env: &MagneticEnvironment,
    params: &EnsembleParams,
    det: &DetectionConfig,
    noise: &NoiseConfig,
    linewidth: f64,
    b1: f64,
) -> Result<TrackLog> {
    scenario.validate()?;
    cfg.validate()?;
    let lines = resonance_frequencies(env, params, linewidth)?;
    let gamma = params.constants.gamma_nv;
    let axis = disturbance_axis(env);

    let (t_eff, _) = snap_to_periods(cfg.t_int_per_iter, cfg.drive.f_mod)?;
    let sample_rate = 100.0 * cfg.drive.f_mod;

    // Lock target: the requested carrier's nearest line, or the central
    // hyperfine line of the disturbance axis' upper branch.
    let target = match cfg.initial_f_c {
        Some(f0) => lines
            .iter()
            .min_by(|a, b| {
                (a.center - f0)
                    .abs()
                    .partial_cmp(&(b.center - f0).abs())
                    .unwrap()
            })
            .unwrap(),
        None => lines
            .iter()
            .find(|l| l.orientation_index == axis && l.branch == 1 && l.hyperfine_index == 0)
            .unwrap(),
    };
    let u = params.orientations[target.orientation_index];
    let kappa = f64::from(target.branch)
        * gamma
        * dot(env.b0_vector, u).signum()
        * dot(params.orientations[axis], u);
    let f_c0 = cfg.initial_f_c.unwrap_or(target.center);

    let inp = ChainInputs {
        drive: &cfg.drive,
        lines: &lines,
        env,
        params,
        det,
        noise,
        b1,
    };

    // One-time slope probe half a modulation depth to each side.
    let d = (cfg.drive.f_depth / 2.0).max(cfg.step_quantum);
    let probe = |f: f64, stream: u64| -> Result<f64> {
        let ctx = WindowCtx {
            f_c: f,
            t0: 0.0,
            stream,
            drift_offset: scenario.value_at(0.0),
            b1,
        };
        let w = synthesize_window(&inp, &ctx, t_eff, sample_rate)?;
        demodulate(&w, cfg.drive.f_mod, t_eff)
    };
    let s_lo = probe(f_c0 - d, PROBE_STREAM_BASE)?;
    let s_hi = probe(f_c0 + d, PROBE_STREAM_BASE + 2)?;
    let slope_est = (s_hi - s_lo) / (2.0 * d);
    if slope_est == 0.0 {
        return Err(Error::invalid(
            "slope probe found no error-signal slope at the starting carrier"
                .to_string(),
        ));
    }
    let deadband = cfg
        .error_deadband
        .unwrap_or(slope_est.abs() * cfg.step_quantum / 2.0);

    let n_iters = ((scenario.duration() / t_eff).round() as usize).max(1);
    let drift = drift_offsets(noise, n_iters, t_eff);

    let mut log = TrackLog {
        timestamps: Vec::with_capacity(n_iters),
        f_c: Vec::with_capacity(n_iters),
        delta_b: Vec::with_capacity(n_iters),
        s_demod: Vec::with_capacity(n_iters),
        lock_lost: Vec::with_capacity(n_iters),
        true_delta_b: Vec::with_capacity(n_iters),
        phase: Vec::with_capacity(n_iters),
        step_quantum: cfg.step_quantum,
        deadband,
    };
    let mut f_c = f_c0;
    for i in 0..n_iters {
        let t_i = i as f64 * t_eff;
        let field = scenario.value_at(t_i);
        let ctx = WindowCtx {
            f_c,
            t0: t_i,
            stream: 2 * i as u64,
            drift_offset: field + drift[i],
            b1,
        };
        let window = synthesize_window(&inp, &ctx, t_eff, sample_rate)?;
        let s = demodulate(&window, cfg.drive.f_mod, t_eff)?;

        let true_center = target.center + kappa * (field + drift[i]);
        log.timestamps.push(t_i);
        log.f_c.push(f_c);
        log.delta_b.push(field_from_shift(f_c - f_c0, gamma));
        log.s_demod.push(s);
        log.lock_lost.push((f_c - true_center).abs() > 3.0 * linewidth);
        log.true_delta_b.push(field);
        log.phase.push(scenario.label_at(t_i).to_string());

        if s.abs() > deadband {
            f_c -= s.signum() * slope_est.signum() * cfg.step_quantum;
        }
    }
    Ok(log)
}
