//! Analytic hardware models: microwave loop-gap resonator reflection, the
//! Helmholtz offset coil, a two-loop Biot-Savart field evaluator, and the
//! square-wave test-field source.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::fitting::{lm_fit, LmOptions};
use crate::nv::PhysicalConstants;
use crate::{Error, Result};

/// One-port microwave resonator described by its unloaded quality factor,
/// coupling coefficient, and resonance frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonatorModel {
    /// Unloaded quality factor.
    pub q0: f64,
    /// Coupling coefficient; 1 is critical coupling (zero reflection on
    /// resonance), < 1 undercoupled.
    pub beta_c: f64,
    /// Resonance frequency (Hz).
    pub f_res: f64,
}

impl Default for ResonatorModel {
    fn default() -> Self {
        ResonatorModel {
            q0: 117.12,
            beta_c: 0.3,
            // Placed so the loaded bandwidth (1+beta)*f_res/Q0 lands at
            // 32.26 MHz, keeping the passband centered on the working
            // spin-transition band near 2.9 GHz.
            f_res: 32.26e6 * 117.12 / 1.3,
        }
    }
}

impl ResonatorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.q0 > 0.0) {
            return Err(Error::invalid(format!("Q0 must be positive, got {}", self.q0)));
        }
        if !(self.beta_c >= 0.0) {
            return Err(Error::invalid(format!(
                "coupling coefficient must be >= 0, got {}",
                self.beta_c
            )));
        }
        if !(self.f_res > 0.0) {
            return Err(Error::invalid(format!(
                "resonance frequency must be positive, got {}",
                self.f_res
            )));
        }
        Ok(())
    }

    /// Detuning parameter xi = 2*Q0*(f/f_res - f_res/f).
    fn xi(&self, f: f64) -> f64 {
        2.0 * self.q0 * (f / self.f_res - self.f_res / f)
    }
}

fn gamma_sq(beta: f64, xi: f64) -> f64 {
    let a = 1.0 - beta;
    let b = 1.0 + beta;
    (a * a + xi * xi) / (b * b + xi * xi)
}

/// Reflected power |Gamma|^2 in dB at probe frequency `f`:
/// `Gamma = (1 - beta - i*xi)/(1 + beta - i*xi)` with
/// `xi = 2*Q0*(f/f_res - f_res/f)`. Minimum at `f = f_res`; at critical
/// coupling the on-resonance reflection vanishes (-inf dB). The ideal
/// model floors at -5.38 dB for beta = 0.3; real assemblies typically dip
/// a few hundredths of a dB deeper from line losses outside this model.
pub fn reflection_s11(f: f64, res: &ResonatorModel) -> Result<f64> {
    res.validate()?;
    if !(f > 0.0) {
        return Err(Error::invalid(format!(
            "probe frequency must be positive, got {f}"
        )));
    }
    Ok(10.0 * gamma_sq(res.beta_c, res.xi(f)).log10())
}

/// Loaded bandwidth `(1 + beta) * f_res / Q0` (Hz).
pub fn resonator_bandwidth(res: &ResonatorModel) -> Result<f64> {
    res.validate()?;
    Ok((1.0 + res.beta_c) * res.f_res / res.q0)
}

/// Microwave field delivery factor `sqrt(1 - 10^(s11_db/10))`, in [0, 1]:
/// the fraction of the incident drive amplitude absorbed by the resonator.
/// Spin-resonance contrast scales proportionally.
pub fn b1_factor(s11_db: f64) -> Result<f64> {
    if s11_db > 0.0 {
        return Err(Error::invalid(format!(
            "reflection must be <= 0 dB, got {s11_db}"
        )));
    }
    Ok((1.0 - 10f64.powf(s11_db / 10.0)).sqrt())
}

/// Fit `(Q0, beta_c, f_res)` to a sampled reflection curve by least
/// squares on the linear reflected power.
///
/// Reflection magnitude alone cannot distinguish an undercoupled resonator
/// from its overcoupled twin: `(Q0, beta)` and `(Q0/beta, 1/beta)` produce
/// identical |Gamma|^2 curves. This fit reports the undercoupled branch
/// (beta <= 1), which is the regime of the modeled hardware; map through
/// the twin transformation for a known-overcoupled device.
pub fn fit_resonator(freq: &[f64], s11_db: &[f64]) -> Result<ResonatorModel> {
    if freq.len() != s11_db.len() || freq.len() < 5 {
        return Err(Error::invalid(format!(
            "need matching frequency/reflection arrays of at least 5 points, \
             got {} and {}",
            freq.len(),
            s11_db.len()
        )));
    }
    let power: Vec<f64> = s11_db.iter().map(|db| 10f64.powf(db / 10.0)).collect();

    // Initial guesses: dip position for f_res, dip depth for beta
    // (undercoupled root), and a curvature-free Q0 seed from the span.
    let i_min = power
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let f0 = freq[i_min];
    let g_min = power[i_min].clamp(0.0, 1.0 - 1e-12).sqrt();
    let beta0 = (1.0 - g_min) / (1.0 + g_min);
    let span = freq[freq.len() - 1] - freq[0];
    let q0_seed = if span > 0.0 { 4.0 * f0 / span } else { 100.0 };

    let model = |p: &[f64]| -> Result<Vec<f64>> {
        let trial = ResonatorModel {
            q0: p[0].abs(),
            beta_c: p[1].abs(),
            f_res: p[2].abs(),
        };
        trial.validate()?;
        Ok(freq
            .iter()
            .zip(&power)
            .map(|(&f, &y)| gamma_sq(trial.beta_c, trial.xi(f)) - y)
            .collect())
    };
    let scales = [q0_seed.max(10.0), 1.0, f0];
    let fitted = lm_fit(model, &[q0_seed, beta0, f0], &scales, &LmOptions::default())?;
    let (mut q0, mut beta, f_res) = (fitted[0].abs(), fitted[1].abs(), fitted[2].abs());
    if beta > 1.0 {
        q0 /= beta;
        beta = 1.0 / beta;
    }
    Ok(ResonatorModel { q0, beta_c: beta, f_res })
}

/// Helmholtz coil pair: `turns_n` windings per side at an effective single
/// radius, separated axially by one radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoilModel {
    /// Turns per side.
    pub turns_n: u32,
    /// Effective winding radius (m).
    pub radius_r: f64,
    /// Total wire resistance (ohm), used for voltage drive.
    pub wire_resistance_r: f64,
}

impl Default for CoilModel {
    fn default() -> Self {
        CoilModel::offset_coil()
    }
}

impl CoilModel {
    /// The offset-field coil pair: 35 turns per side at 14.7 mm effective
    /// radius; 0.5 A produces the 1.07 mT working bias field.
    pub fn offset_coil() -> Self {
        CoilModel {
            turns_n: 35,
            radius_r: 14.7e-3,
            wire_resistance_r: 2.0,
        }
    }

    /// The test-field wire wound around the offset coil pair: effective
    /// N/r of 166.7 per meter and 229.8 ohm loop resistance, so 10 mV
    /// produces 6.52 nT at the center.
    pub fn test_wire() -> Self {
        CoilModel {
            turns_n: 5,
            radius_r: 30.0e-3,
            wire_resistance_r: 229.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns_n == 0 {
            return Err(Error::invalid("coil needs at least one turn".to_string()));
        }
        if !(self.radius_r > 0.0) || !(self.wire_resistance_r > 0.0) {
            return Err(Error::invalid(format!(
                "coil radius and resistance must be positive, got r={}, R={}",
                self.radius_r, self.wire_resistance_r
            )));
        }
        Ok(())
    }
}

/// Drive applied to a coil: a direct current or a voltage across the wire
/// resistance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoilDrive {
    /// Amperes.
    Current(f64),
    /// Volts; converted through the coil's wire resistance.
    Voltage(f64),
}

impl CoilDrive {
    fn current(self, coil: &CoilModel) -> Result<f64> {
        let i = match self {
            CoilDrive::Current(i) => i,
            CoilDrive::Voltage(u) => u / coil.wire_resistance_r,
        };
        if !i.is_finite() {
            return Err(Error::invalid(format!("coil drive is not finite: {i}")));
        }
        Ok(i)
    }
}

/// Axial center field of the Helmholtz pair,
/// `B = (8/sqrt(125)) * mu_0 * N * I / r` (T).
pub fn helmholtz_center_field(
    coil: &CoilModel,
    drive: CoilDrive,
    constants: &PhysicalConstants,
) -> Result<f64> {
    coil.validate()?;
    let i = drive.current(coil)?;
    Ok(8.0 / 125f64.sqrt() * constants.mu_0 * f64::from(coil.turns_n) * i / coil.radius_r)
}

/// Number of polygon segments per loop in [`field_at_point`]. The
/// integrand is periodic and smooth, so the midpoint rule converges
/// spectrally; this count holds errors far below the 0.1% homogeneity
/// scale of interest.
const LOOP_SEGMENTS: usize = 720;

/// Field vector (T) of the coil pair at `point` (m, coil center at the
/// origin, loop axis along z, loops at z = +-r/2) carrying current `i`,
/// by Biot-Savart integration over both loops.
pub fn field_at_point(
    coil: &CoilModel,
    point: [f64; 3],
    i: f64,
    constants: &PhysicalConstants,
) -> Result<[f64; 3]> {
    coil.validate()?;
    if !point.iter().all(|c| c.is_finite()) || !i.is_finite() {
        return Err(Error::invalid("point and current must be finite".to_string()));
    }
    let a = coil.radius_r;
    let rho = (point[0] * point[0] + point[1] * point[1]).sqrt();
    for z0 in [-a / 2.0, a / 2.0] {
        let d2 = (rho - a) * (rho - a) + (point[2] - z0) * (point[2] - z0);
        if d2 < 1e-6 * 1e-6 {
            return Err(Error::invalid(format!(
                "point {point:?} lies on a coil winding"
            )));
        }
    }

    let pref = constants.mu_0 * f64::from(coil.turns_n) * i / (4.0 * PI);
    let dphi = 2.0 * PI / LOOP_SEGMENTS as f64;
    let mut b = [0.0; 3];
    for z0 in [-a / 2.0, a / 2.0] {
        for k in 0..LOOP_SEGMENTS {
            let phi = (k as f64 + 0.5) * dphi;
            let (s, c) = phi.sin_cos();
            // Wire element at (a c, a s, z0) pointing along +phi.
            let dl = [-a * s * dphi, a * c * dphi, 0.0];
            let r = [point[0] - a * c, point[1] - a * s, point[2] - z0];
            let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
            let inv_r3 = 1.0 / (r2 * r2.sqrt());
            b[0] += pref * (dl[1] * r[2] - dl[2] * r[1]) * inv_r3;
            b[1] += pref * (dl[2] * r[0] - dl[0] * r[2]) * inv_r3;
            b[2] += pref * (dl[0] * r[1] - dl[1] * r[0]) * inv_r3;
        }
    }
    Ok(b)
}

/// Shape of the generated test field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaveformShape {
    #[default]
    Square,
}

/// Scalar test field applied along one orientation axis: a square wave
/// toggling between 0 and `amplitude_field`, high during the first half of
/// each period (absolute acquisition time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestFieldWaveform {
    pub shape: WaveformShape,
    /// Repetition rate (Hz).
    pub frequency: f64,
    /// High-level field amplitude (T).
    pub amplitude_field: f64,
    /// Orientation axis (0..=3) the field is applied along.
    pub axis_index: usize,
}

impl Default for TestFieldWaveform {
    fn default() -> Self {
        TestFieldWaveform {
            shape: WaveformShape::Square,
            frequency: 2.0,
            amplitude_field: 333e-9,
            axis_index: 1,
        }
    }
}

impl TestFieldWaveform {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) {
            return Err(Error::invalid(format!(
                "test-field frequency must be positive, got {}",
                self.frequency
            )));
        }
        if !(self.amplitude_field >= 0.0) {
            return Err(Error::invalid(format!(
                "test-field amplitude must be >= 0, got {}",
                self.amplitude_field
            )));
        }
        if self.axis_index > 3 {
            return Err(Error::invalid(format!(
                "axis index must be 0..=3, got {}",
                self.axis_index
            )));
        }
        Ok(())
    }

    /// Field value (T) at absolute time `t` (s).
    pub fn value_at(&self, t: f64) -> f64 {
        match self.shape {
            WaveformShape::Square => {
                let phase = (t * self.frequency).rem_euclid(1.0);
                if phase < 0.5 {
                    self.amplitude_field
                } else {
                    0.0
                }
            }
        }
    }
}
