//! Time-domain simulation of the detection path: FM microwave drive,
//! fluorescence photocurrents, logarithmic balanced amplification, band
//! response, noise injection, lock-in demodulation, and spectrum
//! reconstruction by integration.
//!
//! Determinism contract: every acquisition window derives its noise from a
//! counter-based generator seeded by (seed, stream), so sweep points can be
//! evaluated in parallel in any order and still produce bit-identical
//! traces for a fixed configuration.

use std::f64::consts::{LN_10, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hardware::{b1_factor, reflection_s11, ResonatorModel};
use crate::nv::{EnsembleParams, MagneticEnvironment, ResonanceLine};
use crate::{Error, Result};

/// Microwave synthesis state: a carrier at `f_lo + f_bb`, sinusoidally
/// frequency-modulated, with optional three-tone hyperfine drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MwDriveConfig {
    /// Local-oscillator frequency (Hz).
    pub f_lo: f64,
    /// Baseband offset frequency (Hz); the carrier is `f_lo + f_bb`.
    pub f_bb: f64,
    /// Modulation frequency (Hz).
    pub f_mod: f64,
    /// Modulation depth (Hz).
    pub f_depth: f64,
    /// Total microwave power (W).
    pub p_mw: f64,
    /// Drive all three hyperfine components with one tone each.
    pub hfs_on: bool,
    /// Per-tone drive weights (low, center, high); 1.0 each is the
    /// balanced drive.
    pub tone_weights: [f64; 3],
    /// Tone separation (Hz) of the three-tone drive.
    pub tone_spacing: f64,
}

impl Default for MwDriveConfig {
    fn default() -> Self {
        MwDriveConfig {
            f_lo: 2.82e9,
            f_bb: 50e6,
            f_mod: 1.0e3,
            f_depth: 40e3,
            p_mw: 58e-6,
            hfs_on: false,
            tone_weights: [1.0, 1.0, 1.0],
            tone_spacing: 2.16e6,
        }
    }
}

impl MwDriveConfig {
    /// Carrier (mean probe) frequency `f_lo + f_bb` (Hz).
    pub fn f_c(&self) -> f64 {
        self.f_lo + self.f_bb
    }

    /// Re-center the carrier by adjusting the baseband offset.
    pub fn set_f_c(&mut self, f_c: f64) {
        self.f_bb = f_c - self.f_lo;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_mod > 0.0) {
            return Err(Error::invalid(format!(
                "f_mod must be positive, got {}",
                self.f_mod
            )));
        }
        if !(self.f_depth >= 0.0) {
            return Err(Error::invalid(format!(
                "f_depth must be >= 0, got {}",
                self.f_depth
            )));
        }
        if !(self.p_mw >= 0.0) {
            return Err(Error::invalid(format!(
                "p_mw must be >= 0, got {}",
                self.p_mw
            )));
        }
        if !(self.f_c() > 0.0) {
            return Err(Error::invalid(format!(
                "carrier frequency must be positive, got {}",
                self.f_c()
            )));
        }
        if self.hfs_on {
            if self.tone_weights.iter().any(|&w| !(w >= 0.0)) {
                return Err(Error::invalid(format!(
                    "tone weights must be >= 0, got {:?}",
                    self.tone_weights
                )));
            }
            if !(self.tone_spacing > 0.0) {
                return Err(Error::invalid(format!(
                    "tone spacing must be positive, got {}",
                    self.tone_spacing
                )));
            }
        }
        Ok(())
    }
}

/// Balanced logarithmic detection stage and its band response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Output gain of the log stage (1/A).
    pub g: f64,
    /// Logarithmic scale factor (V per decade of current ratio).
    pub k: f64,
    /// Off-resonance signal photocurrent (A).
    pub i_sig_dc: f64,
    /// Reference photocurrent (A).
    pub i_ref_dc: f64,
    /// Signal photodiode responsivity at the fluorescence band (A/W).
    pub r_670: f64,
    /// Reference photodiode responsivity at the pump wavelength (A/W).
    pub r_522: f64,
    /// Amplifier high-pass cutoff (Hz).
    pub hp_cutoff: f64,
    /// Amplifier low-pass cutoff (Hz).
    pub lp_cutoff: f64,
    /// Common-mode rejection of the balanced stage (dB).
    pub cmrr_db: f64,
    /// Spin repolarization rate limiting the modulation response (1/s);
    /// 0 disables the corresponding low-pass.
    pub nv_lowpass_rate: f64,
    /// Mid-band response calibration factor in (0, 1]; 1.0 is the ideal
    /// small-signal chain, ~0.78 reproduces a measured plateau.
    pub response_cal: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            g: 20.66,
            k: 0.375,
            i_sig_dc: 1.0e-3,
            i_ref_dc: 1.0e-3,
            r_670: 0.54,
            r_522: 0.40,
            hp_cutoff: 430.0,
            lp_cutoff: 103e3,
            cmrr_db: 40.0,
            nv_lowpass_rate: crate::nv::pumping_rate(
                crate::nv::DEFAULT_I_OPT,
                &EnsembleParams::default(),
            )
            .expect("default intensity is valid"),
            response_cal: 1.0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("g", self.g),
            ("k", self.k),
            ("i_sig_dc", self.i_sig_dc),
            ("i_ref_dc", self.i_ref_dc),
            ("r_670", self.r_670),
            ("r_522", self.r_522),
            ("hp_cutoff", self.hp_cutoff),
            ("lp_cutoff", self.lp_cutoff),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!(
                    "detection field {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.hp_cutoff < self.lp_cutoff) {
            return Err(Error::invalid(format!(
                "hp_cutoff {} must lie below lp_cutoff {}",
                self.hp_cutoff, self.lp_cutoff
            )));
        }
        if !(self.cmrr_db >= 0.0) {
            return Err(Error::invalid(format!(
                "cmrr_db must be >= 0, got {}",
                self.cmrr_db
            )));
        }
        if !(self.nv_lowpass_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "nv_lowpass_rate must be >= 0, got {}",
                self.nv_lowpass_rate
            )));
        }
        if !(self.response_cal > 0.0 && self.response_cal <= 1.0) {
            return Err(Error::invalid(format!(
                "response_cal must lie in (0, 1], got {}",
                self.response_cal
            )));
        }
        Ok(())
    }

    /// Off-resonance output voltage `G*K*log10(I_sig_dc/I_ref_dc)`.
    pub fn reference_output(&self) -> f64 {
        self.g * self.k * (self.i_sig_dc / self.i_ref_dc).log10()
    }
}

/// Optional mains interference: a sinusoidal field riding on the same
/// orientation axis as the other scalar disturbances, phased to absolute
/// acquisition time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MainsInterference {
    /// Line frequency (Hz).
    pub frequency: f64,
    /// Field amplitude (T).
    pub amplitude_field: f64,
}

impl Default for MainsInterference {
    fn default() -> Self {
        MainsInterference {
            frequency: 50.0,
            amplitude_field: 0.0,
        }
    }
}

/// Noise sources of the simulated chain. All sources are derived from
/// `seed`; identical configurations reproduce identical traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Master seed of the counter-based generator.
    pub seed: u64,
    /// Photocurrent shot noise (Gaussian, variance 2eI per unit bandwidth).
    pub shot_noise_on: bool,
    /// Laser relative intensity noise density (1/sqrt(Hz)), common-mode on
    /// both photodiodes.
    pub laser_rin: f64,
    /// Field random-walk coefficient (T/sqrt(s)); drifts the scalar field
    /// along the disturbance axis between acquisition windows.
    pub drift_random_walk: f64,
    /// Optional mains-frequency field interference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mains: Option<MainsInterference>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            seed: 0,
            shot_noise_on: false,
            laser_rin: 0.0,
            drift_random_walk: 0.0,
            mains: None,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.laser_rin >= 0.0) || !(self.drift_random_walk >= 0.0) {
            return Err(Error::invalid(format!(
                "noise densities must be >= 0, got rin={}, drift={}",
                self.laser_rin, self.drift_random_walk
            )));
        }
        if let Some(m) = &self.mains {
            if !(m.frequency > 0.0) || !(m.amplitude_field >= 0.0) {
                return Err(Error::invalid(format!(
                    "mains interference needs frequency > 0 and amplitude >= 0, \
                     got {} Hz, {} T",
                    m.frequency, m.amplitude_field
                )));
            }
        }
        Ok(())
    }
}

/// What the axis of a [`DemodTrace`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// Swept carrier frequencies (Hz).
    Frequency,
    /// Window start times (s).
    Time,
}

/// Acquisition metadata carried alongside a demodulated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub drive: MwDriveConfig,
    pub detection: DetectionConfig,
    pub noise: NoiseConfig,
    /// Effective integration time per point (s), snapped to whole
    /// modulation periods.
    pub t_int: f64,
    /// Grid step (Hz) for frequency sweeps; 0 for time series.
    pub df_step: f64,
    /// Raw sampling rate (Hz).
    pub sample_rate: f64,
    pub axis_kind: AxisKind,
}

/// Demodulated output samples against either a frequency grid or time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemodTrace {
    /// Swept carrier values (Hz) or window start times (s).
    pub axis: Vec<f64>,
    /// Demodulated output per point (V).
    pub values: Vec<f64>,
    pub meta: TraceMeta,
}

impl DemodTrace {
    pub fn validate(&self) -> Result<()> {
        if self.axis.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "axis and values lengths differ: {} vs {}",
                self.axis.len(),
                self.values.len()
            )));
        }
        if !self.axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("axis must be strictly increasing".to_string()));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("values must be finite".to_string()));
        }
        Ok(())
    }
}

/// Reconstructed dip spectrum from integrating a demodulated sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Carrier grid (Hz).
    pub freq: Vec<f64>,
    /// Integrated signal (V), zero-referenced at the window start.
    pub s_integ: Vec<f64>,
    /// Modulation depth (Hz) used during acquisition.
    pub f_depth: f64,
}

/// Probe frequency at time `t` into a window:
/// `f_c + f_depth * sin(2*pi*f_mod*t)`.
pub fn instantaneous_frequency(cfg: &MwDriveConfig, t: f64) -> f64 {
    cfg.f_c() + cfg.f_depth * (TAU * cfg.f_mod * t).sin()
}

/// Logarithmic balanced amplifier output
/// `V = G*K*log10((I_sig + dI_sig)/I_ref)`.
pub fn log_amp_output(i_sig: f64, di_sig: f64, i_ref: f64, det: &DetectionConfig) -> Result<f64> {
    let num = i_sig + di_sig;
    if !(num > 0.0) || !(i_ref > 0.0) {
        return Err(Error::invalid(format!(
            "log amplifier requires positive currents, got {num} and {i_ref}"
        )));
    }
    Ok(det.g * det.k * (num / i_ref).log10())
}

/// First-order small-signal approximation of [`log_amp_output`] around the
/// balanced point: `dV = G*K*(dI_sig/I_sig)/ln(10)`.
pub fn log_amp_small_signal(i_sig: f64, di_sig: f64, det: &DetectionConfig) -> f64 {
    det.g * det.k * (di_sig / i_sig) / LN_10
}

/// Magnitude response of the amplification chain at frequency `f`: a
/// first-order high-pass at `hp_cutoff`, a first-order low-pass at
/// `lp_cutoff`, a first-order low-pass at the spin repolarization corner
/// `nv_lowpass_rate/(2*pi)` (skipped when the rate is 0), and the overall
/// `response_cal` plateau factor.
pub fn chain_frequency_response(f: f64, det: &DetectionConfig) -> Result<f64> {
    det.validate()?;
    if !(f > 0.0) {
        return Err(Error::invalid(format!(
            "response frequency must be positive, got {f}"
        )));
    }
    let hp = {
        let x = f / det.hp_cutoff;
        x / (1.0 + x * x).sqrt()
    };
    let lp = {
        let x = f / det.lp_cutoff;
        1.0 / (1.0 + x * x).sqrt()
    };
    let nv = if det.nv_lowpass_rate > 0.0 {
        let x = f * TAU / det.nv_lowpass_rate;
        1.0 / (1.0 + x * x).sqrt()
    } else {
        1.0
    };
    Ok(det.response_cal * hp * lp * nv)
}

/// Immutable inputs shared by every acquisition window of one run.
#[derive(Debug, Clone, Copy)]
pub struct ChainInputs<'a> {
    pub drive: &'a MwDriveConfig,
    pub lines: &'a [ResonanceLine],
    pub env: &'a MagneticEnvironment,
    pub params: &'a EnsembleParams,
    pub det: &'a DetectionConfig,
    pub noise: &'a NoiseConfig,
    /// Microwave delivery factor applied to all line contrasts when no
    /// per-point resonator evaluation overrides it.
    pub b1: f64,
}

/// Per-window acquisition context.
#[derive(Debug, Clone, Copy)]
pub struct WindowCtx {
    /// Carrier frequency for this window (Hz).
    pub f_c: f64,
    /// Absolute start time of the window (s); field waveforms and mains
    /// interference are phased to it, while the modulation and lock-in
    /// reference restart at each window.
    pub t0: f64,
    /// Noise stream of this window.
    pub stream: u64,
    /// Accumulated random-walk field offset at window start (T).
    pub drift_offset: f64,
    /// Microwave delivery factor for this window.
    pub b1: f64,
}

/// Precomputed per-line quantities for the hot sampling loop.
struct LinePre {
    center: f64,
    hw2: f64,
    contrast: f64,
    /// Center shift per unit scalar disturbance field (Hz/T): the signed
    /// projection of the disturbance axis onto the line's orientation,
    /// times the branch sign and gyromagnetic ratio.
    kappa: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orientation axis that scalar disturbances (test field, drift, mains)
/// act along: the test field's axis when configured, else axis 1.
pub fn disturbance_axis(env: &MagneticEnvironment) -> usize {
    env.test_field.as_ref().map_or(1, |tf| tf.axis_index)
}

fn precompute_lines(inp: &ChainInputs) -> Vec<LinePre> {
    let axis = inp.params.orientations[disturbance_axis(inp.env)];
    inp.lines
        .iter()
        .map(|line| {
            let u = inp.params.orientations[line.orientation_index];
            let p0 = dot(inp.env.b0_vector, u);
            let hw = line.linewidth / 2.0;
            LinePre {
                center: line.center,
                hw2: hw * hw,
                contrast: line.contrast,
                kappa: f64::from(line.branch)
                    * inp.params.constants.gamma_nv
                    * p0.signum()
                    * dot(axis, u),
            }
        })
        .collect()
}

/// Sum of weighted Lorentzian dips at probe frequency `f` with all line
/// centers shifted by `shift_field` through their disturbance coupling.
fn dip_depth(f: f64, shift_field: f64, pre: &[LinePre], tones: &[(f64, f64)], b1: f64) -> f64 {
    let mut depth = 0.0;
    for &(offset, weight) in tones {
        if weight == 0.0 {
            continue;
        }
        let x = f + offset;
        for lp in pre {
            let d = x - (lp.center + lp.kappa * shift_field);
            depth += weight * lp.contrast * lp.hw2 / (d * d + lp.hw2);
        }
    }
    b1 * depth
}

fn drive_tones(drive: &MwDriveConfig) -> [(f64, f64); 3] {
    if drive.hfs_on {
        let d = drive.tone_spacing;
        [
            (-d, drive.tone_weights[0]),
            (0.0, drive.tone_weights[1]),
            (d, drive.tone_weights[2]),
        ]
    } else {
        [(0.0, 1.0), (0.0, 0.0), (0.0, 0.0)]
    }
}

/// Snap an integration time down to a whole number of modulation periods.
/// Errors if it spans less than one.
pub fn snap_to_periods(t_int: f64, f_mod: f64) -> Result<(f64, u64)> {
    if !(t_int > 0.0) || !(f_mod > 0.0) {
        return Err(Error::invalid(format!(
            "t_int and f_mod must be positive, got {t_int} and {f_mod}"
        )));
    }
    let periods = (t_int * f_mod * (1.0 + 1e-12)).floor();
    if periods < 1.0 {
        return Err(Error::invalid(format!(
            "integration time {t_int} s spans less than one period of \
             f_mod = {f_mod} Hz"
        )));
    }
    Ok((periods / f_mod, periods as u64))
}

/// Synthesize the raw voltage samples of one acquisition window.
///
/// Per sample: instantaneous probe frequency, fluorescence from the
/// (possibly disturbance-shifted) line comb, photocurrents with
/// common-mode laser RIN and per-diode shot noise, logarithmic balanced
/// output, band response applied to the deviation from the off-resonance
/// reference, and the finite-CMRR common-mode leak.
pub fn synthesize_window(
    inp: &ChainInputs,
    ctx: &WindowCtx,
    t_int: f64,
    sample_rate: f64,
) -> Result<Vec<f64>> {
    inp.drive.validate()?;
    inp.det.validate()?;
    inp.noise.validate()?;
    if !(sample_rate >= 50.0 * inp.drive.f_mod) {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} Hz is below 50x f_mod = {} Hz",
            50.0 * inp.drive.f_mod
        )));
    }
    if !(ctx.b1 >= 0.0 && ctx.b1 <= 1.0) {
        return Err(Error::invalid(format!(
            "b1 factor must lie in [0, 1], got {}",
            ctx.b1
        )));
    }
    let (t_eff, _) = snap_to_periods(t_int, inp.drive.f_mod)?;
    let n = (t_eff * sample_rate).round() as usize;
    if n == 0 {
        return Err(Error::invalid(
            "window contains no samples at this rate".to_string(),
        ));
    }

    let pre = precompute_lines(inp);
    let tones = drive_tones(inp.drive);
    let dt = 1.0 / sample_rate;
    let v_ref = inp.det.reference_output();
    let g_resp = chain_frequency_response(inp.drive.f_mod, inp.det)?;
    let leak = 10f64.powf(-inp.det.cmrr_db / 20.0);
    let gk_ln10 = inp.det.g * inp.det.k / LN_10;
    // Per-sample noise scalings: equivalent noise bandwidth fs/2.
    let rin_sigma = inp.noise.laser_rin * (sample_rate / 2.0).sqrt();
    let shot_scale = (2.0 * inp.params.constants.e_charge * sample_rate / 2.0).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(inp.noise.seed);
    rng.set_stream(ctx.stream);

    let omega = TAU * inp.drive.f_mod;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t_local = k as f64 * dt;
        let t_abs = ctx.t0 + t_local;
        let f_inst = ctx.f_c + inp.drive.f_depth * (omega * t_local).sin();

        let mut shift = ctx.drift_offset;
        if let Some(tf) = &inp.env.test_field {
            shift += tf.value_at(t_abs);
        }
        if let Some(m) = &inp.noise.mains {
            shift += m.amplitude_field * (TAU * m.frequency * t_abs).sin();
        }

        let depth = dip_depth(f_inst, shift, &pre, &tones, ctx.b1);
        let fluor = 1.0 - depth;
        if fluor <= 0.0 {
            return Err(Error::invalid(format!(
                "total drive contrast exceeds the realizable budget \
                 (fluorescence {fluor:.3} at {f_inst} Hz)"
            )));
        }

        let mut i_sig = inp.det.i_sig_dc * fluor;
        let mut i_ref = inp.det.i_ref_dc;
        let mut delta = 0.0;
        if rin_sigma > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            delta = rin_sigma * z;
            i_sig *= 1.0 + delta;
            i_ref *= 1.0 + delta;
        }
        if inp.noise.shot_noise_on {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            i_sig += z1 * shot_scale * i_sig.abs().sqrt();
            i_ref += z2 * shot_scale * i_ref.abs().sqrt();
        }

        let v_raw = log_amp_output(i_sig, 0.0, i_ref, inp.det)?;
        let mut v = v_ref + g_resp * (v_raw - v_ref);
        if delta != 0.0 {
            v += gk_ln10 * delta.ln_1p() * leak;
        }
        out.push(v);
    }
    Ok(out)
}

/// Raw voltage samples of a single acquisition window starting at t = 0
/// with unit microwave delivery.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_timetrace(
    drive: &MwDriveConfig,
    lines: &[ResonanceLine],
    env: &MagneticEnvironment,
    params: &EnsembleParams,
    det: &DetectionConfig,
    noise: &NoiseConfig,
    t_int: f64,
    sample_rate: f64,
) -> Result<Vec<f64>> {
    let inp = ChainInputs {
        drive,
        lines,
        env,
        params,
        det,
        noise,
        b1: 1.0,
    };
    let ctx = WindowCtx {
        f_c: drive.f_c(),
        t0: 0.0,
        stream: 0,
        drift_offset: 0.0,
        b1: 1.0,
    };
    synthesize_window(&inp, &ctx, t_int, sample_rate)
}

/// Lock-in demodulation of one window at the modulation frequency.
///
/// In-phase and quadrature averages against unit sine/cosine references
/// over the whole periods contained in `t_int`; the output is the signed
/// peak-to-peak amplitude of the fundamental,
/// `sign(X) * 4 * sqrt(X^2 + Y^2)`.
pub fn demodulate(series: &[f64], f_mod: f64, t_int: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::invalid("cannot demodulate an empty series".to_string()));
    }
    let (t_eff, _) = snap_to_periods(t_int, f_mod)?;
    let fs = series.len() as f64 / t_int;
    let n_use = ((t_eff * fs).round() as usize).min(series.len()).max(1);
    let w = TAU * f_mod / fs;
    let mut x = 0.0;
    let mut y = 0.0;
    for (k, &v) in series[..n_use].iter().enumerate() {
        let (s, c) = (w * k as f64).sin_cos();
        x += v * s;
        y += v * c;
    }
    x /= n_use as f64;
    y /= n_use as f64;
    Ok(x.signum() * 4.0 * (x * x + y * y).sqrt())
}

/// Random-walk field offsets at the start of `n` consecutive acquisition
/// windows of duration `t_int`: window 0 starts at zero and each window
/// adds one Gaussian step of standard deviation `coefficient*sqrt(t_int)`.
/// Step `j` is drawn from stream `2j + 1`, keeping the per-window sample
/// streams (even ids) untouched.
pub fn drift_offsets(noise: &NoiseConfig, n: usize, t_int: f64) -> Vec<f64> {
    let mut offsets = vec![0.0; n];
    if noise.drift_random_walk <= 0.0 || n < 2 {
        return offsets;
    }
    let step = noise.drift_random_walk * t_int.max(0.0).sqrt();
    let mut acc = 0.0;
    for (j, slot) in offsets.iter_mut().enumerate().skip(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(2 * (j as u64 - 1) + 1);
        let z: f64 = rng.sample(StandardNormal);
        acc += step * z;
        *slot = acc;
    }
    offsets
}

fn uniform_step(grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::invalid("grid needs at least 2 points".to_string()));
    }
    let step = grid[1] - grid[0];
    if !(step > 0.0) {
        return Err(Error::invalid("grid must be strictly increasing".to_string()));
    }
    for w in grid.windows(2) {
        let s = w[1] - w[0];
        if (s - step).abs() > 1e-6 * step {
            return Err(Error::invalid(format!(
                "grid step is not uniform: {s} vs {step}"
            )));
        }
    }
    Ok(step)
}

/// Sweep the carrier over `grid` and demodulate each point.
///
/// Points are acquired back-to-back in simulated time (point `i` starts at
/// `i * t_int`) and evaluated in parallel with per-point noise streams, so
/// the trace is independent of thread scheduling. When `resonator` is
/// given, each point's microwave delivery factor is evaluated from the
/// reflection at its carrier; otherwise `inp.b1` applies uniformly.
pub fn sweep_spectrum(
    grid: &[f64],
    inp: &ChainInputs,
    resonator: Option<&ResonatorModel>,
    t_int: f64,
    sample_rate: f64,
) -> Result<DemodTrace> {
    let step = uniform_step(grid)?;
    let (t_eff, _) = snap_to_periods(t_int, inp.drive.f_mod)?;
    let offsets = drift_offsets(inp.noise, grid.len(), t_eff);
    let values: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &f_c)| -> Result<f64> {
            let b1 = match resonator {
                Some(res) => b1_factor(reflection_s11(f_c, res)?.min(0.0))?,
                None => inp.b1,
            };
            let ctx = WindowCtx {
                f_c,
                t0: i as f64 * t_eff,
                stream: 2 * i as u64,
                drift_offset: offsets[i],
                b1,
            };
            let window = synthesize_window(inp, &ctx, t_eff, sample_rate)?;
            demodulate(&window, inp.drive.f_mod, t_eff)
        })
        .collect::<Result<Vec<f64>>>()?;
    let trace = DemodTrace {
        axis: grid.to_vec(),
        values,
        meta: TraceMeta {
            drive: inp.drive.clone(),
            detection: inp.det.clone(),
            noise: inp.noise.clone(),
            t_int: t_eff,
            df_step: step,
            sample_rate,
            axis_kind: AxisKind::Frequency,
        },
    };
    trace.validate()?;
    Ok(trace)
}

/// Demodulate `n_windows` consecutive windows at a fixed carrier,
/// producing a time series of lock-in outputs (one per window).
pub fn demod_time_series(
    inp: &ChainInputs,
    n_windows: usize,
    t_int: f64,
    sample_rate: f64,
) -> Result<DemodTrace> {
    if n_windows == 0 {
        return Err(Error::invalid("need at least one window".to_string()));
    }
    let (t_eff, _) = snap_to_periods(t_int, inp.drive.f_mod)?;
    let offsets = drift_offsets(inp.noise, n_windows, t_eff);
    let values: Vec<f64> = (0..n_windows)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let ctx = WindowCtx {
                f_c: inp.drive.f_c(),
                t0: i as f64 * t_eff,
                stream: 2 * i as u64,
                drift_offset: offsets[i],
                b1: inp.b1,
            };
            let window = synthesize_window(inp, &ctx, t_eff, sample_rate)?;
            demodulate(&window, inp.drive.f_mod, t_eff)
        })
        .collect::<Result<Vec<f64>>>()?;
    let trace = DemodTrace {
        axis: (0..n_windows).map(|i| i as f64 * t_eff).collect(),
        values,
        meta: TraceMeta {
            drive: inp.drive.clone(),
            detection: inp.det.clone(),
            noise: inp.noise.clone(),
            t_int: t_eff,
            df_step: 0.0,
            sample_rate,
            axis_kind: AxisKind::Time,
        },
    };
    trace.validate()?;
    Ok(trace)
}

/// Integrate a demodulated frequency sweep back into a dip spectrum:
/// `S_integ(f_k) = sum_{j<=k} S_demod(f_j) * df / (2 * f_depth)`, which
/// reconstructs the chain's voltage dip up to an additive constant.
pub fn integrate_demod(trace: &DemodTrace) -> Result<Spectrum> {
    trace.validate()?;
    if trace.meta.axis_kind != AxisKind::Frequency || !(trace.meta.df_step > 0.0) {
        return Err(Error::invalid(
            "integration requires a uniform frequency sweep".to_string(),
        ));
    }
    let f_depth = trace.meta.drive.f_depth;
    if !(f_depth > 0.0) {
        return Err(Error::invalid(
            "integration requires a nonzero modulation depth".to_string(),
        ));
    }
    let scale = trace.meta.df_step / (2.0 * f_depth);
    let mut acc = 0.0;
    let s_integ = trace
        .values
        .iter()
        .map(|&v| {
            acc += v * scale;
            acc
        })
        .collect();
    Ok(Spectrum {
        freq: trace.axis.clone(),
        s_integ,
        f_depth,
    })
}
