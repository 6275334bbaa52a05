//! Closed-form NV-ensemble spin physics.
//!
//! Resonance positions follow the linear Zeeman model
//! `f = D_gs + beta_T * dT +- gamma_NV * |B . u| + k * f_HFS` over the four
//! <111> orientation families with three hyperfine components each.
//! Lineshapes are Lorentzian dips on a unit fluorescence baseline.
//! Linewidths follow a saturation model combining inhomogeneous dephasing,
//! effective relaxation under optical pumping, and microwave power
//! broadening; the optical pumping rate is `sigma_abs * I / E_ph`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::hardware::TestFieldWaveform;
use crate::signal::MwDriveConfig;
use crate::{Error, Result};

/// 1/sqrt(3): component magnitude of the normalized <111> axes.
const S3: f64 = 0.577_350_269_189_625_8;

/// The four NV orientation axes, unit length, pairwise angle arccos(1/3)
/// up to sign.
pub const NV_AXES: [[f64; 3]; 4] = [
    [S3, S3, S3],
    [S3, -S3, -S3],
    [-S3, S3, -S3],
    [-S3, -S3, S3],
];

/// Default bias field vector (T): 1.07 mT pointed so the four axis
/// projections are distinct (0.0547, 0.9848, -0.6018, -0.4377 mT), with
/// axis 1 carrying the largest projection and axis 0 a small one.
pub const DEFAULT_B0_VECTOR: [f64; 3] = [
    9.002_275_311_515_068e-4,
    -4.738_039_637_639_51e-4,
    -3.316_627_746_347_657e-4,
];

/// Small-field bound (T) for the linear Zeeman model.
pub const B0_LIMIT: f64 = 10e-3;

/// Default optical intensity at the sensing volume (W/m^2).
pub const DEFAULT_I_OPT: f64 = 3.9019e6;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Fixed physical constants entering the closed forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Zero-field splitting D_gs (Hz).
    pub d_gs: f64,
    /// Temperature coefficient of D_gs (Hz/K); negative.
    pub beta_t: f64,
    /// Gyromagnetic ratio (Hz/T).
    pub gamma_nv: f64,
    /// Hyperfine splitting of the 14N triplet (Hz).
    pub f_hfs: f64,
    /// Elementary charge (C).
    pub e_charge: f64,
    /// Vacuum permeability (N/A^2).
    pub mu_0: f64,
    /// Lorentzian lineshape factor 4/(3*sqrt(3)) of the shot-noise limit.
    pub p_f: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            d_gs: 2.87e9,
            beta_t: -75.0e3,
            gamma_nv: 28.024e9,
            f_hfs: 2.16e6,
            e_charge: 1.602_176_634e-19,
            mu_0: 1.256_637_062_12e-6,
            p_f: 4.0 / (3.0 * 3.0_f64.sqrt()),
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_gs", self.d_gs),
            ("gamma_nv", self.gamma_nv),
            ("f_hfs", self.f_hfs),
            ("e_charge", self.e_charge),
            ("mu_0", self.mu_0),
            ("p_f", self.p_f),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "constant {name} must be strictly positive, got {v}"
                )));
            }
        }
        if !(self.beta_t < 0.0) || !self.beta_t.is_finite() {
            return Err(Error::invalid(format!(
                "beta_t must be negative, got {}",
                self.beta_t
            )));
        }
        Ok(())
    }
}

/// Diamond/ensemble parameters of the sensing volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleParams {
    pub constants: PhysicalConstants,
    /// Four unit vectors along the <111> crystal axes.
    pub orientations: [[f64; 3]; 4],
    /// Longitudinal relaxation time (s).
    pub t1: f64,
    /// Transverse (homogeneous) relaxation time (s).
    pub t2: f64,
    /// Inhomogeneous dephasing time (s); 1/(pi*T2*) is the inhomogeneous
    /// linewidth, 68.67 kHz at the default.
    pub t2_star: f64,
    /// Peak contrast per hyperfine line per orientation at unit B1 factor.
    pub contrast_scale: f64,
    /// Absorption cross-section (m^2).
    pub sigma_abs: f64,
    /// Photon energy of the pump laser (J); default hc/522 nm.
    pub e_ph: f64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            constants: PhysicalConstants::default(),
            orientations: NV_AXES,
            t1: 5.89e-3,
            t2: 96.49e-6,
            t2_star: 1.0 / (PI * 68.67e3),
            contrast_scale: 0.0018,
            sigma_abs: 3.1e-21,
            e_ph: 3.805_45e-19,
        }
    }
}

impl EnsembleParams {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        for (i, u) in self.orientations.iter().enumerate() {
            if (norm(*u) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "orientation {i} is not unit length"
                )));
            }
            for (j, v) in self.orientations.iter().enumerate().skip(i + 1) {
                if (dot(*u, *v).abs() - 1.0 / 3.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "orientations {i} and {j} do not meet at arccos(1/3)"
                    )));
                }
            }
        }
        if !(self.t2_star > 0.0 && self.t2 >= self.t2_star && self.t1 >= self.t2) {
            return Err(Error::invalid(format!(
                "relaxation times must satisfy T1 >= T2 >= T2* > 0, got \
                 T1={}, T2={}, T2*={}",
                self.t1, self.t2, self.t2_star
            )));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale < 1.0) {
            return Err(Error::invalid(format!(
                "contrast_scale must lie in (0, 1), got {}",
                self.contrast_scale
            )));
        }
        if !(self.sigma_abs > 0.0) || !(self.e_ph > 0.0) {
            return Err(Error::invalid(
                "sigma_abs and e_ph must be strictly positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Inhomogeneous dephasing rate gamma2* = 1/T2* (1/s).
    pub fn gamma2_star(&self) -> f64 {
        1.0 / self.t2_star
    }

    /// Inhomogeneous linewidth gamma2*/pi (Hz); 68.67 kHz at the default
    /// T2*. This is the dephasing-only reading of the zero-drive width;
    /// the full zero-drive width from [`power_broadened_linewidth`] at
    /// `rabi = 0` also carries the effective homogeneous term and is
    /// ~8 kHz larger. Both readings are exposed deliberately.
    pub fn inhomogeneous_linewidth(&self) -> f64 {
        self.gamma2_star() / PI
    }

    /// Effective longitudinal relaxation rate under optical pumping (1/s).
    pub fn gamma1_eff(&self, pumping_rate: f64) -> f64 {
        1.0 / self.t1 + pumping_rate
    }

    /// Effective transverse relaxation rate under optical pumping (1/s).
    pub fn gamma2_eff(&self, pumping_rate: f64) -> f64 {
        1.0 / self.t2 + pumping_rate / 2.0
    }
}

/// Static bias field, temperature offset, and an optional scalar test field
/// applied along one orientation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagneticEnvironment {
    /// Bias field vector (T).
    pub b0_vector: [f64; 3],
    /// Temperature offset from the calibration point (K).
    pub delta_t: f64,
    /// Optional time-dependent scalar field added along one axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_field: Option<TestFieldWaveform>,
}

impl Default for MagneticEnvironment {
    fn default() -> Self {
        MagneticEnvironment {
            b0_vector: DEFAULT_B0_VECTOR,
            delta_t: 0.0,
            test_field: None,
        }
    }
}

impl MagneticEnvironment {
    pub fn validate(&self) -> Result<()> {
        if !self.b0_vector.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("b0_vector must be finite".to_string()));
        }
        let b = norm(self.b0_vector);
        if b >= B0_LIMIT {
            return Err(Error::invalid(format!(
                "|B0| = {b:.3e} T exceeds the {B0_LIMIT:.0e} T small-field \
                 bound of the linear Zeeman model"
            )));
        }
        if let Some(tf) = &self.test_field {
            tf.validate()?;
        }
        Ok(())
    }

    /// Total field vector at time `t` (s), including the test field
    /// projected onto its orientation axis plus an extra scalar offset
    /// (drift) along the same axis.
    pub fn field_at(
        &self,
        t: f64,
        orientations: &[[f64; 3]; 4],
        extra_axis_field: f64,
    ) -> [f64; 3] {
        let mut b = self.b0_vector;
        let scalar = self.test_field.as_ref().map_or(0.0, |tf| tf.value_at(t));
        let axis_index = self.test_field.as_ref().map_or(0, |tf| tf.axis_index);
        let total = scalar + extra_axis_field;
        if total != 0.0 {
            let u = orientations[axis_index];
            for k in 0..3 {
                b[k] += total * u[k];
            }
        }
        b
    }
}

/// One resonance of the ensemble spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceLine {
    /// Center frequency x0 (Hz).
    pub center: f64,
    /// Full width at half maximum (Hz).
    pub linewidth: f64,
    /// Peak contrast at unit B1 factor and unit tone weight.
    pub contrast: f64,
    /// Orientation family 0..=3.
    pub orientation_index: usize,
    /// Hyperfine component, -1/0/+1.
    pub hyperfine_index: i8,
    /// Electron spin branch, -1 for m_s = -1, +1 for m_s = +1.
    pub branch: i8,
}

impl ResonanceLine {
    pub fn validate(&self) -> Result<()> {
        if !(self.linewidth > 0.0) {
            return Err(Error::invalid(format!(
                "linewidth must be positive, got {}",
                self.linewidth
            )));
        }
        if !(self.contrast >= 0.0 && self.contrast < 1.0) {
            return Err(Error::invalid(format!(
                "contrast must lie in [0, 1), got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// Resonance lines for an explicit field vector (T). The stamped linewidth
/// and per-line contrast come from the caller; output is sorted by center.
pub fn lines_for_field(
    field: [f64; 3],
    delta_t: f64,
    params: &EnsembleParams,
    linewidth: f64,
) -> Vec<ResonanceLine> {
    let c = &params.constants;
    let base = c.d_gs + c.beta_t * delta_t;
    let mut lines = Vec::with_capacity(24);
    for (oi, u) in params.orientations.iter().enumerate() {
        let proj = dot(field, *u).abs();
        for branch in [-1i8, 1i8] {
            for hf in [-1i8, 0i8, 1i8] {
                lines.push(ResonanceLine {
                    center: base
                        + f64::from(branch) * c.gamma_nv * proj
                        + f64::from(hf) * c.f_hfs,
                    linewidth,
                    contrast: params.contrast_scale,
                    orientation_index: oi,
                    hyperfine_index: hf,
                    branch,
                });
            }
        }
    }
    lines.sort_unstable_by(|a, b| {
        a.center
            .partial_cmp(&b.center)
            .unwrap()
            .then(a.orientation_index.cmp(&b.orientation_index))
            .then(a.branch.cmp(&b.branch))
            .then(a.hyperfine_index.cmp(&b.hyperfine_index))
    });
    lines
}

/// The 24 resonance lines (4 orientations x 2 branches x 3 hyperfine) of
/// the static environment, sorted by center frequency. Degenerate lines are
/// retained, not merged. `linewidth` is stamped on every line; compute it
/// with [`power_broadened_linewidth`] for the operating point.
pub fn resonance_frequencies(
    env: &MagneticEnvironment,
    params: &EnsembleParams,
    linewidth: f64,
) -> Result<Vec<ResonanceLine>> {
    env.validate()?;
    params.validate()?;
    if !(linewidth > 0.0) {
        return Err(Error::invalid(format!(
            "linewidth must be positive, got {linewidth}"
        )));
    }
    Ok(lines_for_field(
        env.b0_vector,
        env.delta_t,
        params,
        linewidth,
    ))
}

/// Lorentzian peak `A * (hw)^2 / ((x-x0)^2 + hw^2)` with `hw` the
/// half width at half maximum (FWHM/2).
pub fn lorentzian_peak(x: f64, x0: f64, fwhm: f64, amplitude: f64) -> f64 {
    let hw = fwhm / 2.0;
    let d = x - x0;
    amplitude * hw * hw / (d * d + hw * hw)
}

/// Derivative of [`lorentzian_peak`] with respect to `x`.
pub fn lorentzian_peak_derivative(x: f64, x0: f64, fwhm: f64, amplitude: f64) -> f64 {
    let hw = fwhm / 2.0;
    let d = x - x0;
    let denom = d * d + hw * hw;
    -2.0 * amplitude * hw * hw * d / (denom * denom)
}

/// Lorentzian of a resonance line with explicit amplitude.
pub fn lorentzian(x: f64, line: &ResonanceLine, amplitude: f64) -> Result<f64> {
    line.validate()?;
    Ok(lorentzian_peak(x, line.center, line.linewidth, amplitude))
}

/// Power-broadened FWHM (Hz) of the saturation model:
/// `gamma2*/pi + sqrt((gamma2_eff/pi)^2 + (4*gamma1_eff/gamma2_eff) *
/// (Omega_R/2pi)^2)` with `gamma1_eff = 1/T1 + Gamma_P` and
/// `gamma2_eff = 1/T2 + Gamma_P/2`. Strictly increasing in `rabi`.
pub fn power_broadened_linewidth(
    rabi: f64,
    params: &EnsembleParams,
    pumping_rate: f64,
) -> Result<f64> {
    Ok(params.inhomogeneous_linewidth() + linewidth_power_term(rabi, params, pumping_rate)?)
}

/// The saturation (square-root) term of [`power_broadened_linewidth`] alone.
pub fn linewidth_power_term(
    rabi: f64,
    params: &EnsembleParams,
    pumping_rate: f64,
) -> Result<f64> {
    if rabi < 0.0 {
        return Err(Error::invalid(format!(
            "Rabi frequency must be >= 0, got {rabi}"
        )));
    }
    if pumping_rate < 0.0 {
        return Err(Error::invalid(format!(
            "pumping rate must be >= 0, got {pumping_rate}"
        )));
    }
    let g1 = params.gamma1_eff(pumping_rate);
    let g2 = params.gamma2_eff(pumping_rate);
    let nu = rabi / TAU;
    Ok(((g2 / PI).powi(2) + (4.0 * g1 / g2) * nu * nu).sqrt())
}

/// Optical pumping rate `Gamma_P = sigma_abs * I_opt / E_ph` (1/s).
pub fn pumping_rate(i_opt: f64, params: &EnsembleParams) -> Result<f64> {
    if i_opt < 0.0 {
        return Err(Error::invalid(format!(
            "optical intensity must be >= 0, got {i_opt}"
        )));
    }
    Ok(params.sigma_abs * i_opt / params.e_ph)
}

/// Rabi angular frequency (rad/s) from microwave power via
/// `Omega_R = k_rabi * sqrt(P)`.
pub fn rabi_frequency(p_mw: f64, k_rabi: f64) -> f64 {
    k_rabi * p_mw.max(0.0).sqrt()
}

/// Solve the proportionality constant `k_rabi` so that the power term of
/// the linewidth model equals `power_term_hz` at reference power `p_ref`.
pub fn calibrate_rabi_constant(
    power_term_hz: f64,
    p_ref: f64,
    params: &EnsembleParams,
    pumping_rate: f64,
) -> Result<f64> {
    if !(p_ref > 0.0) {
        return Err(Error::invalid("reference power must be positive".to_string()));
    }
    let g1 = params.gamma1_eff(pumping_rate);
    let g2 = params.gamma2_eff(pumping_rate);
    let base = g2 / PI;
    if power_term_hz <= base {
        return Err(Error::invalid(format!(
            "target power term {power_term_hz} Hz does not exceed the \
             zero-drive value {base:.1} Hz"
        )));
    }
    let nu2 = (power_term_hz * power_term_hz - base * base) * g2 / (4.0 * g1);
    Ok(TAU * nu2.sqrt() / p_ref.sqrt())
}

/// `k_rabi` calibrated so the default ensemble at the default pumping rate
/// reaches an 86.6 kHz power term at 1 mW.
pub fn default_k_rabi() -> f64 {
    let params = EnsembleParams::default();
    let gp = pumping_rate(DEFAULT_I_OPT, &params).expect("default intensity is valid");
    calibrate_rabi_constant(86.6e3, 1.0e-3, &params, gp).expect("default calibration is valid")
}

fn check_drive_weights(drive: &MwDriveConfig) -> Result<[(f64, f64); 3]> {
    // Returns up to three (frequency offset, weight) tones; unused slots
    // carry zero weight.
    if drive.hfs_on {
        let w = drive.tone_weights;
        if w.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid(format!(
                "tone weights must be >= 0, got {w:?}"
            )));
        }
        let d = drive.tone_spacing;
        if !(d > 0.0) {
            return Err(Error::invalid(format!(
                "tone spacing must be positive when the 3-tone drive is on, got {d}"
            )));
        }
        Ok([(-d, w[0]), (0.0, w[1]), (d, w[2])])
    } else {
        Ok([(0.0, 1.0), (0.0, 0.0), (0.0, 0.0)])
    }
}

/// Relative fluorescence at probe frequency `freq` (1 = off-resonance
/// baseline): `F = 1 - sum_tones sum_lines C * w * b1 * L(freq + offset)`.
/// With the 3-tone drive on, tone offsets are `{-spacing, 0, +spacing}`.
pub fn cw_spectrum(
    freq: f64,
    lines: &[ResonanceLine],
    drive: &MwDriveConfig,
    b1_factor: f64,
) -> Result<f64> {
    let tones = check_drive_weights(drive)?;
    let mut depth = 0.0;
    for &(offset, weight) in &tones {
        if weight == 0.0 {
            continue;
        }
        let x = freq + offset;
        for line in lines {
            depth += weight * line.contrast
                * lorentzian_peak(x, line.center, line.linewidth, 1.0);
        }
    }
    depth *= b1_factor;
    let f = 1.0 - depth;
    if f <= 0.0 {
        return Err(Error::invalid(format!(
            "total drive contrast exceeds the realizable budget \
             (fluorescence {f:.3} <= 0 at {freq} Hz)"
        )));
    }
    Ok(f)
}

/// Analytic derivative dF/df of [`cw_spectrum`].
pub fn cw_spectrum_derivative(
    freq: f64,
    lines: &[ResonanceLine],
    drive: &MwDriveConfig,
    b1_factor: f64,
) -> Result<f64> {
    let tones = check_drive_weights(drive)?;
    let mut slope = 0.0;
    for &(offset, weight) in &tones {
        if weight == 0.0 {
            continue;
        }
        let x = freq + offset;
        for line in lines {
            slope += weight * line.contrast
                * lorentzian_peak_derivative(x, line.center, line.linewidth, 1.0);
        }
    }
    Ok(-b1_factor * slope)
}
