//! Measurement pipeline: sensitivity from slope and noise, histogram and
//! Allan-deviation trace statistics, the photon shot-noise limit, and
//! frequency/field conversion.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::nv::PhysicalConstants;
use crate::{Error, Result};

/// How a sensitivity figure was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    SlopeBased,
    HistogramBased,
    AllanBased,
}

/// A sensitivity figure together with the inputs it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Field sensitivity (T/sqrt(Hz)).
    pub eta_b: f64,
    /// Voltage noise entering the estimate (V).
    pub sigma: f64,
    /// The same noise converted to field units (T).
    pub sigma_field: f64,
    /// Demodulated slope at the operating point (V/Hz).
    pub slope_m: f64,
    /// Integration time per sample (s).
    pub t_int: f64,
    /// Gyromagnetic ratio used for conversion (Hz/T).
    pub gamma: f64,
    pub method: SensitivityMethod,
    /// Diagnostic raised by the estimator, e.g. a multimodal histogram.
    pub warning: Option<String>,
}

/// Slope-method sensitivity `eta_B = sigma / (gamma * |m|) * sqrt(t_int)`.
pub fn sensitivity(
    sigma: f64,
    slope_m: f64,
    t_int: f64,
    gamma: f64,
) -> Result<SensitivityReport> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if slope_m == 0.0 || !slope_m.is_finite() {
        return Err(Error::invalid(format!(
            "slope must be nonzero and finite, got {slope_m}"
        )));
    }
    if !(t_int > 0.0) || !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "t_int and gamma must be positive, got {t_int} and {gamma}"
        )));
    }
    let sigma_field = sigma / (gamma * slope_m.abs());
    Ok(SensitivityReport {
        eta_b: sigma_field * t_int.sqrt(),
        sigma,
        sigma_field,
        slope_m,
        t_int,
        gamma,
        method: SensitivityMethod::SlopeBased,
        warning: None,
    })
}

/// Sensitivity from the sample statistics of a constant-field trace
/// segment: maximum-likelihood mean/standard deviation of the samples
/// (bin-free), converted to field units through the slope, then
/// `eta_B = sigma_field * sqrt(t_int)`.
///
/// A strongly platykurtic sample (excess kurtosis below -1) suggests the
/// segment spans more than one field level; that raises a warning
/// diagnostic, not an error.
pub fn histogram_sensitivity(
    timetrace: &[f64],
    t_int: f64,
    slope_m: f64,
    gamma: f64,
) -> Result<SensitivityReport> {
    if timetrace.is_empty() || !timetrace.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(
            "timetrace must be non-empty and finite".to_string(),
        ));
    }
    let n = timetrace.len() as f64;
    let mean = timetrace.iter().sum::<f64>() / n;
    let m2 = timetrace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = m2.sqrt();

    let mut warning = None;
    if timetrace.len() >= 100 && m2 > 0.0 {
        let m4 = timetrace.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let excess = m4 / (m2 * m2) - 3.0;
        if excess < -1.0 {
            warning = Some(format!(
                "histogram appears multimodal (excess kurtosis {excess:.2}); \
                 the segment may span more than one field level"
            ));
        }
    }

    let mut report = sensitivity(sigma, slope_m, t_int, gamma)?;
    report.method = SensitivityMethod::HistogramBased;
    report.warning = warning;
    Ok(report)
}

/// Which averaging-deviation convention a series was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllanConvention {
    /// `sigma_A^2(tau) = <(ybar_{n+1} - ybar_n)^2>` with no half factor.
    AsWritten,
    /// The conventional extra factor 1/2 inside the variance
    /// (exactly 1/sqrt(2) on the deviation).
    HalfFactor,
}

/// Allan deviation over a grid of averaging times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanSeries {
    /// Averaging times (s), increasing; only the usable ones.
    pub taus: Vec<f64>,
    /// Deviation per tau, in the units of the input series.
    pub sigma_a: Vec<f64>,
    pub convention: AllanConvention,
    /// Requested averaging times that were skipped: not an integer number
    /// of samples, or too long for the trace.
    pub rejected_taus: Vec<f64>,
}

/// Allan deviation of a uniformly sampled series: bin the trace into
/// consecutive non-overlapping intervals of length `tau`, average each,
/// and take the root of the mean squared difference of adjacent bin
/// means. Unusable `taus` entries are reported back rather than failing
/// the whole grid.
pub fn allan_deviation(
    timetrace: &[f64],
    sample_period: f64,
    taus: &[f64],
    convention: AllanConvention,
) -> Result<AllanSeries> {
    if timetrace.len() < 2 {
        return Err(Error::invalid(
            "Allan analysis needs at least two samples".to_string(),
        ));
    }
    if !timetrace.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("timetrace must be finite".to_string()));
    }
    if !(sample_period > 0.0) {
        return Err(Error::invalid(format!(
            "sample period must be positive, got {sample_period}"
        )));
    }
    if taus.is_empty() || !taus.windows(2).all(|w| w[0] < w[1]) || !(taus[0] > 0.0) {
        return Err(Error::invalid(
            "taus must be positive and strictly increasing".to_string(),
        ));
    }

    let mut kept = Vec::new();
    let mut sigma_a = Vec::new();
    let mut rejected = Vec::new();
    for &tau in taus {
        let ratio = tau / sample_period;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * ratio {
            rejected.push(tau);
            continue;
        }
        let n = n as usize;
        let bins = timetrace.len() / n;
        if bins < 2 {
            rejected.push(tau);
            continue;
        }
        let means: Vec<f64> = (0..bins)
            .map(|b| timetrace[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let var = means
            .windows(2)
            .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
            .sum::<f64>()
            / (bins - 1) as f64;
        let mut s = var.sqrt();
        if convention == AllanConvention::HalfFactor {
            s /= SQRT_2;
        }
        kept.push(tau);
        sigma_a.push(s);
    }
    if kept.is_empty() {
        return Err(Error::invalid(
            "no requested tau is usable for this trace".to_string(),
        ));
    }
    Ok(AllanSeries {
        taus: kept,
        sigma_a,
        convention,
        rejected_taus: rejected,
    })
}

/// Photon shot-noise limited sensitivity
/// `eta = P_F * (1/gamma) * (linewidth/contrast) / sqrt(photon_rate)`
/// (T/sqrt(Hz)), with `P_F = 4/(3*sqrt(3))` for a Lorentzian line.
pub fn shot_noise_limit(
    linewidth: f64,
    contrast: f64,
    photon_rate: f64,
    constants: &PhysicalConstants,
) -> Result<f64> {
    for (name, v) in [
        ("linewidth", linewidth),
        ("contrast", contrast),
        ("photon_rate", photon_rate),
    ] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    Ok(constants.p_f / constants.gamma_nv * (linewidth / contrast) / photon_rate.sqrt())
}

/// Detected photon rate from the shunt voltage of the photodiode,
/// `R = U / (R_shunt * e)` (Hz).
pub fn photon_rate(u_shunt: f64, r_shunt: f64, constants: &PhysicalConstants) -> Result<f64> {
    if !(r_shunt > 0.0) {
        return Err(Error::invalid(format!(
            "shunt resistance must be positive, got {r_shunt}"
        )));
    }
    if !(u_shunt >= 0.0) {
        return Err(Error::invalid(format!(
            "shunt voltage must be >= 0, got {u_shunt}"
        )));
    }
    Ok(u_shunt / (r_shunt * constants.e_charge))
}

/// Signed field equivalent of a resonance-frequency shift, `df / gamma`.
pub fn field_from_shift(df: f64, gamma: f64) -> f64 {
    df / gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs()
    }

    #[test]
    fn sensitivity_closed_form_and_scalings() {
        let gamma = 28.024e9;
        // sigma/m equivalent to 84.07 Hz of frequency noise at 20 ms
        let m: f64 = -1.0e-7;
        let sigma = 84.07 * m.abs();
        let rep = sensitivity(sigma, m, 20e-3, gamma).unwrap();
        assert!(rel_close(rep.eta_b, 424.25e-12, 1e-4), "eta {}", rep.eta_b);
        assert_eq!(rep.method, SensitivityMethod::SlopeBased);

        assert_eq!(sensitivity(0.0, m, 20e-3, gamma).unwrap().eta_b, 0.0);
        let four_t = sensitivity(sigma, m, 80e-3, gamma).unwrap();
        assert!(rel_close(four_t.eta_b, 2.0 * rep.eta_b, 1e-12));
        assert!(sensitivity(sigma, 0.0, 20e-3, gamma).is_err());
    }

    #[test]
    fn shot_noise_limit_reference_point_and_scalings() {
        let c = PhysicalConstants::default();
        let eta = shot_noise_limit(92.19e3, 0.0062, 2.47e14, &c).unwrap();
        assert!(rel_close(eta, 25.99e-12, 1e-3), "limit {eta}");

        let double_c = shot_noise_limit(92.19e3, 0.0124, 2.47e14, &c).unwrap();
        assert!(rel_close(double_c, eta / 2.0, 1e-12));
        let quad_r = shot_noise_limit(92.19e3, 0.0062, 4.0 * 2.47e14, &c).unwrap();
        assert!(rel_close(quad_r, eta / 2.0, 1e-12));
        assert!(shot_noise_limit(0.0, 0.0062, 2.47e14, &c).is_err());
    }

    #[test]
    fn photon_rate_reference_point() {
        let c = PhysicalConstants::default();
        let r = photon_rate(0.40e-3, 10.0, &c).unwrap();
        assert!(rel_close(r, 2.4966e14, 1e-4), "rate {r}");
        assert!(r > 2.47e14 && r < 2.50e14);
        assert_eq!(photon_rate(0.0, 10.0, &c).unwrap(), 0.0);
        let twice = photon_rate(0.80e-3, 10.0, &c).unwrap();
        assert!(rel_close(twice, 2.0 * r, 1e-12));
    }

    #[test]
    fn field_from_shift_reference_points() {
        let gamma = 28.024e9;
        let b = field_from_shift(9.34e3, gamma);
        assert!((b - 333e-9).abs() < 1e-9, "field {b}");
        let b2 = field_from_shift(250.0, gamma);
        assert!((b2 - 8.92e-9).abs() < 0.01e-9, "field {b2}");
        assert_eq!(field_from_shift(0.0, gamma), 0.0);
        assert!(field_from_shift(-250.0, gamma) < 0.0);
    }

    #[test]
    fn allan_of_constant_series_is_zero() {
        let series = vec![0.37; 1000];
        let taus = [1e-3, 2e-3, 10e-3, 100e-3];
        let a = allan_deviation(&series, 1e-3, &taus, AllanConvention::AsWritten).unwrap();
        assert_eq!(a.taus, taus.to_vec());
        assert!(a.sigma_a.iter().all(|&s| s == 0.0));
        assert!(a.rejected_taus.is_empty());
    }

    #[test]
    fn alternating_series_gives_exactly_two_at_one_sample() {
        let series: Vec<f64> = (0..1000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = allan_deviation(&series, 1e-3, &[1e-3], AllanConvention::AsWritten).unwrap();
        assert_eq!(a.sigma_a[0], 2.0);
        let h = allan_deviation(&series, 1e-3, &[1e-3], AllanConvention::HalfFactor).unwrap();
        assert_eq!(h.sigma_a[0], 2.0 / SQRT_2);
    }

    #[test]
    fn half_factor_scales_every_tau_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..10_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let taus = [1e-3, 2e-3, 5e-3, 10e-3, 50e-3];
        let raw = allan_deviation(&series, 1e-3, &taus, AllanConvention::AsWritten).unwrap();
        let half = allan_deviation(&series, 1e-3, &taus, AllanConvention::HalfFactor).unwrap();
        for (a, b) in raw.sigma_a.iter().zip(&half.sigma_a) {
            assert_eq!(*b, a / SQRT_2);
        }
    }

    #[test]
    fn white_noise_follows_inverse_sqrt_tau() {
        let sigma = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let series: Vec<f64> = (0..100_000)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let dt = 1e-3;
        let taus = [1e-3, 2e-3, 5e-3, 10e-3, 20e-3, 50e-3, 100e-3];
        let a = allan_deviation(&series, dt, &taus, AllanConvention::AsWritten).unwrap();
        // Direct prediction sigma*sqrt(2/n) at each point
        for (tau, s) in a.taus.iter().zip(&a.sigma_a) {
            let n = (tau / dt).round();
            let predict = sigma * (2.0 / n).sqrt();
            assert!(rel_close(*s, predict, 0.10), "tau {tau}: {s} vs {predict}");
        }
        // Log-log slope across the decade
        let lx: Vec<f64> = a.taus.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = a.sigma_a.iter().map(|s| s.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let slope = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / lx.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.05, "log-log slope {slope}");
    }

    #[test]
    fn unusable_taus_are_reported_not_fatal() {
        let series = vec![1.0; 100];
        let taus = [1e-3, 1.5e-3, 2e-3, 1.0];
        let a = allan_deviation(&series, 1e-3, &taus, AllanConvention::AsWritten).unwrap();
        assert_eq!(a.taus, vec![1e-3, 2e-3]);
        assert_eq!(a.rejected_taus, vec![1.5e-3, 1.0]);
        assert!(
            allan_deviation(&series, 1e-3, &[10.0], AllanConvention::AsWritten).is_err()
        );
    }

    #[test]
    fn histogram_sensitivity_constant_and_reference() {
        let gamma = 28.024e9;
        let m = 1.18e-7;
        let flat = vec![0.2; 500];
        let rep = histogram_sensitivity(&flat, 20e-3, m, gamma).unwrap();
        // Mean subtraction leaves only f64 rounding residue.
        assert!(rep.eta_b.abs() < 1e-15, "eta {}", rep.eta_b);
        assert_eq!(rep.method, SensitivityMethod::HistogramBased);

        // +-sigma alternation has maximum-likelihood std exactly sigma:
        // 3.03 nT of field noise at 20 ms extrapolates to ~429 pT/sqrt(Hz).
        let sigma_v = 3.03e-9 * gamma * m;
        let two_level: Vec<f64> = (0..1000)
            .map(|k| if k % 2 == 0 { sigma_v } else { -sigma_v })
            .collect();
        let rep = histogram_sensitivity(&two_level, 20e-3, m, gamma).unwrap();
        assert!(rel_close(rep.sigma_field, 3.03e-9, 1e-9));
        assert!(rel_close(rep.eta_b, 428.5e-12, 1e-3), "eta {}", rep.eta_b);
        assert!(rep.warning.is_some(), "two-level trace should warn");
    }

    #[test]
    fn histogram_recovers_injected_gaussian_noise() {
        let gamma = 28.024e9;
        let m: f64 = -1.18e-7;
        let sigma_b = 5.0e-9;
        let sigma_v = sigma_b * gamma * m.abs();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trace: Vec<f64> = (0..10_000)
            .map(|_| sigma_v * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let rep = histogram_sensitivity(&trace, 20e-3, m, gamma).unwrap();
        assert!(rel_close(rep.sigma_field, sigma_b, 0.05), "sigma {}", rep.sigma_field);
        assert!(rep.warning.is_none());
    }
}
