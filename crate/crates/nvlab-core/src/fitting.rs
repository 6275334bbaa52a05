//! Least-squares extraction of line parameters from acquired traces: the
//! degree-6 polynomial slope/noise fit, the Lorentzian dip fit, and the
//! small Levenberg-Marquardt core they and the resonator fit share.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::signal::{AxisKind, DemodTrace, Spectrum};
use crate::{Error, Result};

/// Degree of the polynomial used for slope extraction.
const SLOPE_DEGREE: usize = 6;

/// Knobs of the Levenberg-Marquardt loop.
pub(crate) struct LmOptions {
    pub max_iter: usize,
    /// Relative cost improvement below which the fit counts as converged.
    pub rel_tol: f64,
    pub lambda_init: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 200,
            rel_tol: 1e-14,
            lambda_init: 1e-3,
        }
    }
}

fn numeric_jacobian<F>(
    f: &mut F,
    x: &[f64],
    r0: &DVector<f64>,
    scales: &[f64],
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = r0.len();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        // Difference step relative to the parameter's typical magnitude,
        // so parameters passing through zero keep a usable step.
        let h = 1e-7 * x[j].abs().max(scales[j].abs()).max(1e-12);
        let mut xs = x.to_vec();
        xs[j] = x[j] + h;
        match f(&xs) {
            Ok(rp) => {
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - r0[i]) / h;
                }
            }
            Err(_) => {
                // Parameter boundary: fall back to a backward difference.
                xs[j] = x[j] - h;
                let rm = f(&xs)?;
                for i in 0..m {
                    jac[(i, j)] = (r0[i] - rm[i]) / h;
                }
            }
        }
    }
    Ok(jac)
}

/// Minimize `||f(x)||^2` from `init` by damped Gauss-Newton steps with a
/// numeric Jacobian. `scales` gives the typical magnitude of each
/// parameter for difference stepping. The residual closure may reject
/// out-of-domain trial points with an error; such steps are treated as
/// uphill.
pub(crate) fn lm_fit<F>(
    mut f: F,
    init: &[f64],
    scales: &[f64],
    opts: &LmOptions,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = init.len();
    assert_eq!(scales.len(), n, "one scale per parameter");
    let mut x = DVector::from_column_slice(init);
    let mut r = DVector::from_vec(f(x.as_slice())?);
    if r.len() < n {
        return Err(Error::FitFailure(format!(
            "underdetermined fit: {} residuals for {n} parameters",
            r.len()
        )));
    }
    let mut cost = r.norm_squared();
    let mut lambda = opts.lambda_init;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        if cost <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        let jac = numeric_jacobian(&mut f, x.as_slice(), &r, scales)?;
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= 1e-16 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut rel_drop = 0.0;
        for _ in 0..60 {
            let mut damped = a.clone();
            for j in 0..n {
                damped[(j, j)] = a[(j, j)] + lambda * a[(j, j)].abs().max(1e-30);
            }
            let Some(step) = damped.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let xn = &x + &step;
            let rn = match f(xn.as_slice()) {
                Ok(v) => DVector::from_vec(v),
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let cn = rn.norm_squared();
            if cn <= cost {
                rel_drop = (cost - cn) / cost.max(f64::MIN_POSITIVE);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-14);
                accepted = true;
                break;
            }
            lambda *= 4.0;
            if lambda > 1e15 {
                break;
            }
        }
        if !accepted || rel_drop < opts.rel_tol {
            // Either the damping collapsed the step to nothing or the cost
            // has stopped moving - the iteration is done.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::FitFailure(format!(
            "no convergence after {} iterations (residual norm {:.3e})",
            opts.max_iter,
            cost.sqrt()
        )));
    }
    Ok(x.as_slice().to_vec())
}

/// Degree-6 polynomial fit of a demodulated sweep around its
/// zero-crossing.
///
/// Coefficients live in a centered/scaled basis `u = (f - x_center) /
/// x_scale` (ascending powers); expanding them to natural units around a
/// GHz-scale center is catastrophically ill-conditioned, so the basis is
/// part of the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Polynomial coefficients over `u`, constant term first.
    pub coefficients: [f64; SLOPE_DEGREE + 1],
    /// Center of the fitted window (Hz).
    pub x_center: f64,
    /// Half-span of the fitted window (Hz).
    pub x_scale: f64,
    /// Polynomial slope at the zero-crossing (V/Hz).
    pub slope_m: f64,
    /// Root of the polynomial nearest the window center (Hz).
    pub zero_crossing: f64,
    /// Population standard deviation of the fit residuals (V).
    pub residuum_sigma: f64,
    /// Per-point residuals, data minus fit (V).
    pub residuals: Vec<f64>,
}

impl SlopeFit {
    fn poly(&self, u: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }

    fn poly_derivative(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for k in (1..=SLOPE_DEGREE).rev() {
            acc = acc * u + self.coefficients[k] * k as f64;
        }
        acc
    }

    /// Fitted polynomial value at frequency `f` (V).
    pub fn eval(&self, f: f64) -> f64 {
        self.poly((f - self.x_center) / self.x_scale)
    }

    /// Fitted polynomial derivative at frequency `f` (V/Hz).
    pub fn eval_derivative(&self, f: f64) -> f64 {
        self.poly_derivative((f - self.x_center) / self.x_scale) / self.x_scale
    }
}

/// Least-squares degree-6 polynomial through a demodulated frequency
/// sweep; the slope is read off at the polynomial root nearest the window
/// center and the residual spread is the trace's noise estimate.
pub fn fit_slope(trace: &DemodTrace) -> Result<SlopeFit> {
    trace.validate()?;
    if trace.meta.axis_kind != AxisKind::Frequency {
        return Err(Error::invalid(
            "slope extraction needs a frequency sweep".to_string(),
        ));
    }
    let n = trace.axis.len();
    if n < 20 {
        return Err(Error::invalid(format!(
            "slope extraction needs at least 20 points, got {n}"
        )));
    }
    let x_center = 0.5 * (trace.axis[0] + trace.axis[n - 1]);
    let x_scale = 0.5 * (trace.axis[n - 1] - trace.axis[0]);

    let mut vand = DMatrix::zeros(n, SLOPE_DEGREE + 1);
    for (i, &f) in trace.axis.iter().enumerate() {
        let u = (f - x_center) / x_scale;
        let mut p = 1.0;
        for k in 0..=SLOPE_DEGREE {
            vand[(i, k)] = p;
            p *= u;
        }
    }
    let y = DVector::from_column_slice(&trace.values);
    let svd = vand.clone().svd(true, true);
    let coeffs = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::FitFailure(format!("polynomial solve failed: {e}")))?;

    let fitted = &vand * &coeffs;
    let residuals: Vec<f64> = trace
        .values
        .iter()
        .zip(fitted.iter())
        .map(|(d, f)| d - f)
        .collect();
    let residuum_sigma =
        (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();

    let mut fit = SlopeFit {
        coefficients: {
            let mut c = [0.0; SLOPE_DEGREE + 1];
            c.copy_from_slice(coeffs.as_slice());
            c
        },
        x_center,
        x_scale,
        slope_m: 0.0,
        zero_crossing: 0.0,
        residuum_sigma,
        residuals,
    };

    let u_root = nearest_root(&fit)?;
    fit.zero_crossing = x_center + x_scale * u_root;
    fit.slope_m = fit.poly_derivative(u_root) / x_scale;
    Ok(fit)
}

/// Root of the fitted polynomial on [-1, 1] nearest u = 0, by dense sign
/// scan plus bisection.
fn nearest_root(fit: &SlopeFit) -> Result<f64> {
    const SCAN: usize = 4000;
    let mut best: Option<f64> = None;
    let mut u_prev = -1.0;
    let mut p_prev = fit.poly(u_prev);
    for k in 1..=SCAN {
        let u = -1.0 + 2.0 * k as f64 / SCAN as f64;
        let p = fit.poly(u);
        if p_prev == 0.0 {
            consider(&mut best, u_prev);
        } else if p_prev * p < 0.0 {
            let root = bisect(fit, u_prev, u, p_prev);
            consider(&mut best, root);
        }
        u_prev = u;
        p_prev = p;
    }
    if p_prev == 0.0 {
        consider(&mut best, u_prev);
    }
    best.ok_or(Error::NoZeroCrossing)
}

fn consider(best: &mut Option<f64>, candidate: f64) {
    match best {
        Some(b) if candidate.abs() >= b.abs() => {}
        _ => *best = Some(candidate),
    }
}

fn bisect(fit: &SlopeFit, mut lo: f64, mut hi: f64, p_lo: f64) -> f64 {
    let mut sign_lo = p_lo.signum();
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let p = fit.poly(mid);
        if p == 0.0 {
            return mid;
        }
        if p.signum() == sign_lo {
            lo = mid;
            sign_lo = p.signum();
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Lorentzian dip parameters extracted from an integrated spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    /// Dip amplitude (V), negative for a fluorescence dip.
    pub amplitude_a: f64,
    /// Full width at half maximum (Hz).
    pub linewidth: f64,
    /// Dip center (Hz).
    pub center_x0: f64,
    /// Fractional fluorescence contrast, `|amplitude| / baseline`.
    pub contrast_c: f64,
    /// Additive offset of the fitted model (V).
    pub offset: f64,
    /// Covariance estimate over (amplitude, linewidth, center, offset).
    pub covariance: [[f64; 4]; 4],
}

fn lorentz_model(u: f64, a: f64, fwhm: f64, u0: f64, y0: f64) -> f64 {
    let hw = fwhm / 2.0;
    let d = u - u0;
    y0 + a * hw * hw / (d * d + hw * hw)
}

/// Nonlinear least-squares fit of `y0 + A*(w/2)^2 / ((f-x0)^2 + (w/2)^2)`
/// to an integrated spectrum. `baseline` converts the voltage amplitude to
/// fractional fluorescence contrast: it is the output volts per unit
/// fractional change of the signal photocurrent (`G*K/ln 10` for the
/// modeled chain), and `contrast_c = |A| / baseline`.
///
/// The initializer takes the dip center from the minimum sample, the
/// width from the half-depth crossing span, and the amplitude from the
/// dip depth.
pub fn fit_lorentzian(spectrum: &Spectrum, baseline: f64) -> Result<LineFit> {
    let n = spectrum.freq.len();
    if n != spectrum.s_integ.len() || n < 8 {
        return Err(Error::invalid(format!(
            "line fit needs matching axes with at least 8 points, got {n}"
        )));
    }
    if !(baseline > 0.0) {
        return Err(Error::invalid(format!(
            "baseline must be positive, got {baseline}"
        )));
    }
    let y = &spectrum.s_integ;
    let (i_min, &y_min) = y
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    // Work on a shifted frequency axis so all four parameters are far from
    // the float noise floor of GHz-scale values.
    let f_shift = spectrum.freq[i_min];
    let u: Vec<f64> = spectrum.freq.iter().map(|f| f - f_shift).collect();

    let y_edge = 0.5 * (y[0] + y[n - 1]);
    let depth = y_min - y_edge;
    if depth >= 0.0 {
        return Err(Error::FitFailure(
            "no dip below the edge level to fit".to_string(),
        ));
    }
    let half_level = y_edge + depth / 2.0;
    let mut lo = u[0];
    for i in (0..i_min).rev() {
        if y[i] >= half_level {
            lo = u[i];
            break;
        }
    }
    let mut hi = u[n - 1];
    for i in i_min..n {
        if y[i] >= half_level {
            hi = u[i];
            break;
        }
    }
    let fwhm0 = (hi - lo).max(u[1] - u[0]);

    let residuals = |p: &[f64]| -> Result<Vec<f64>> {
        let (a, w, u0, y0) = (p[0], p[1], p[2], p[3]);
        if !w.is_finite() || w == 0.0 {
            return Err(Error::invalid("degenerate width".to_string()));
        }
        Ok(u.iter()
            .zip(y.iter())
            .map(|(&ui, &yi)| lorentz_model(ui, a, w, u0, y0) - yi)
            .collect())
    };
    let scales = [depth.abs(), fwhm0, fwhm0, depth.abs() + y_edge.abs()];
    let fitted = lm_fit(
        residuals,
        &[depth, fwhm0, 0.0, y_edge],
        &scales,
        &LmOptions::default(),
    )?;
    let (a, w, u0, y0) = (fitted[0], fitted[1].abs(), fitted[2], fitted[3]);
    if !(w > 0.0) || !a.is_finite() || !u0.is_finite() {
        return Err(Error::FitFailure(format!(
            "fit produced unusable parameters: A={a}, width={w}, center={u0}"
        )));
    }
    let contrast = a.abs() / baseline;
    if !(contrast < 1.0) {
        return Err(Error::FitFailure(format!(
            "fitted contrast {contrast} is outside [0, 1)"
        )));
    }

    // Covariance: sigma^2 * (J^T J)^-1 at the optimum, sigma^2 from the
    // residual sum over the degrees of freedom.
    let mut f_for_jac = residuals;
    let r_opt = DVector::from_vec(f_for_jac(&[a, w, u0, y0])?);
    let jac = numeric_jacobian(&mut f_for_jac, &[a, w, u0, y0], &r_opt, &scales)?;
    let dof = (n as f64 - 4.0).max(1.0);
    let sigma2 = r_opt.norm_squared() / dof;
    let mut covariance = [[0.0; 4]; 4];
    if let Some(inv) = (jac.transpose() * &jac).try_inverse() {
        for i in 0..4 {
            for j in 0..4 {
                covariance[i][j] = sigma2 * inv[(i, j)];
            }
        }
    }

    Ok(LineFit {
        amplitude_a: a,
        linewidth: w,
        center_x0: u0 + f_shift,
        contrast_c: contrast,
        offset: y0,
        covariance,
    })
}
