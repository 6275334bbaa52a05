//! Experiment drivers: each subcommand's pipeline from a validated
//! configuration to CSV artifacts plus a machine-readable run report.

use std::collections::BTreeMap;
use std::f64::consts::LN_10;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    allan_deviation, field_from_shift, histogram_sensitivity, photon_rate, sensitivity,
    shot_noise_limit, AllanConvention,
};
use crate::config::{ExperimentKind, RunConfig, SweepParam};
use crate::fitting::{fit_lorentzian, fit_slope};
use crate::hardware::{b1_factor, helmholtz_center_field, reflection_s11, TestFieldWaveform};
use crate::io::{read_csv, sha256_file, write_csv, write_json, CsvColumn};
use crate::nv::{
    power_broadened_linewidth, pumping_rate, rabi_frequency, resonance_frequencies,
    ResonanceLine,
};
use crate::signal::{
    demod_time_series, demodulate, disturbance_axis, integrate_demod, sweep_spectrum,
    synthesize_window, ChainInputs, DemodTrace, MwDriveConfig, NoiseConfig, WindowCtx,
};
use crate::tracker::{elevator_scenario, track, FieldScenario, ScenarioNode};
use crate::{Error, Result};

/// One file written by a run, listed in the report manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub name: String,
    pub file: String,
    pub schema: String,
    pub sha256: String,
}

/// The complete record of a run: echoed configuration, named metrics, and
/// the hashed artifact manifest. Deliberately free of timestamps so a
/// repeated run produces identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub artifacts: Vec<Artifact>,
    pub config: RunConfig,
}

impl RunReport {
    /// Human-readable digest of the run, also written to `summary.txt`.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "== {} run ==", self.experiment).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        for (k, v) in &self.metrics {
            writeln!(s, "{k}: {v}").unwrap();
        }
        if !self.artifacts.is_empty() {
            writeln!(s, "artifacts:").unwrap();
            for a in &self.artifacts {
                writeln!(s, "  {} ({}) sha256={}", a.file, a.schema, a.sha256).unwrap();
            }
        }
        s
    }

    fn put(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.to_string(), serde_json::json!(v));
    }

    fn put_int(&mut self, key: &str, v: usize) {
        self.metrics.insert(key.to_string(), serde_json::json!(v));
    }

    fn put_str(&mut self, key: &str, v: &str) {
        self.metrics.insert(key.to_string(), serde_json::json!(v));
    }
}

/// Execute the experiment named in the config, writing artifacts,
/// `report.json`, and `summary.txt` into the config's output directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let mut report = RunReport {
        experiment: cfg.experiment.to_string(),
        seed: cfg.seed.unwrap_or(cfg.noise.seed),
        metrics: BTreeMap::new(),
        artifacts: Vec::new(),
        config: cfg.clone(),
    };
    match cfg.experiment {
        ExperimentKind::OdmrSweep => cmd_odmr_sweep(cfg, &out_dir, &mut report)?,
        ExperimentKind::ParamSweep => cmd_param_sweep(cfg, &out_dir, &mut report)?,
        ExperimentKind::TestfieldTrace => cmd_testfield_trace(cfg, &out_dir, &mut report)?,
        ExperimentKind::Allan => cmd_allan(cfg, &out_dir, &mut report)?,
        ExperimentKind::Track => cmd_track(cfg, &out_dir, &mut report)?,
        ExperimentKind::Limits => cmd_limits(cfg, &mut report)?,
    }
    if let Some(coil) = &cfg.coil {
        let b = helmholtz_center_field(&coil.model, coil.drive, &cfg.ensemble.constants)?;
        report.put("coil_center_field[T]", b);
    }
    write_json(&out_dir.join("report.json"), &report)?;
    fs::write(out_dir.join("summary.txt"), report.summary_text())?;
    Ok(report)
}

/// Derived quantities every experiment needs: spin-bath rates, the
/// operating linewidth at the drive power, and the line comb.
struct Prepared {
    gamma_p: f64,
    rabi: f64,
    linewidth: f64,
    lines: Vec<ResonanceLine>,
    gamma: f64,
    target_center: f64,
}

fn prepare(cfg: &RunConfig, drive: &MwDriveConfig) -> Result<Prepared> {
    let gamma_p = pumping_rate(cfg.excitation.i_opt, &cfg.ensemble)?;
    let rabi = rabi_frequency(drive.p_mw, cfg.excitation.k_rabi);
    let linewidth = power_broadened_linewidth(rabi, &cfg.ensemble, gamma_p)?;
    let lines = resonance_frequencies(&cfg.environment, &cfg.ensemble, linewidth)?;
    let axis = disturbance_axis(&cfg.environment);
    let target_center = lines
        .iter()
        .find(|l| l.orientation_index == axis && l.branch == 1 && l.hyperfine_index == 0)
        .map(|l| l.center)
        .ok_or_else(|| {
            Error::invalid(format!("no resonance found on disturbance axis {axis}"))
        })?;
    Ok(Prepared {
        gamma_p,
        rabi,
        linewidth,
        lines,
        gamma: cfg.ensemble.constants.gamma_nv,
        target_center,
    })
}

fn record_operating_point(report: &mut RunReport, prep: &Prepared) {
    report.put("pumping_rate[1/s]", prep.gamma_p);
    report.put("rabi[rad/s]", prep.rabi);
    report.put("linewidth_model[Hz]", prep.linewidth);
    report.put("target_center[Hz]", prep.target_center);
}

/// Drive-field scaling at a carrier frequency: from the resonator's
/// reflection when one is configured, else unity.
fn b1_at(cfg: &RunConfig, f: f64) -> Result<f64> {
    match &cfg.resonator {
        Some(res) => b1_factor(reflection_s11(f, res)?.min(0.0)),
        None => Ok(1.0),
    }
}

fn write_artifact(
    report: &mut RunReport,
    out_dir: &Path,
    name: &str,
    schema: &str,
    columns: &[CsvColumn],
) -> Result<()> {
    let file = format!("{name}.csv");
    let path = out_dir.join(&file);
    write_csv(&path, schema, columns)?;
    report.artifacts.push(Artifact {
        name: name.to_string(),
        file,
        schema: schema.to_string(),
        sha256: sha256_file(&path)?,
    });
    Ok(())
}

/// Maximum-likelihood (population) standard deviation.
fn ml_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Noiseless two-sided probe of the error-signal slope at `f_c`. The
/// environment is frozen (no test field, no noise) so the probe measures
/// the static response.
#[allow(clippy::too_many_arguments)]
fn probe_slope(
    cfg: &RunConfig,
    lines: &[ResonanceLine],
    drive: &MwDriveConfig,
    f_c: f64,
    delta: f64,
    t_int: f64,
    sample_rate: f64,
    b1: f64,
) -> Result<f64> {
    let mut env = cfg.environment.clone();
    env.test_field = None;
    let quiet = NoiseConfig::default();
    let inp = ChainInputs {
        drive,
        lines,
        env: &env,
        params: &cfg.ensemble,
        det: &cfg.detection,
        noise: &quiet,
        b1,
    };
    let s_at = |f: f64| -> Result<f64> {
        let ctx = WindowCtx { f_c: f, t0: 0.0, stream: 0, drift_offset: 0.0, b1 };
        let w = synthesize_window(&inp, &ctx, t_int, sample_rate)?;
        demodulate(&w, drive.f_mod, t_int)
    };
    Ok((s_at(f_c + delta)? - s_at(f_c - delta)?) / (2.0 * delta))
}

/// Cut a contiguous slice of a frequency sweep around `center`. Prefers
/// the points within `half_width`; widens to the nearest `min_points`
/// grid points when that window is too sparse to fit.
fn window_around(
    trace: &DemodTrace,
    center: f64,
    half_width: f64,
    min_points: usize,
) -> DemodTrace {
    let n = trace.axis.len();
    let mut idx: Vec<usize> = (0..n)
        .filter(|&i| (trace.axis[i] - center).abs() <= half_width)
        .collect();
    if idx.len() < min_points.min(n) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            (trace.axis[a] - center)
                .abs()
                .partial_cmp(&(trace.axis[b] - center).abs())
                .unwrap()
        });
        idx = order.into_iter().take(min_points.min(n)).collect();
        idx.sort_unstable();
    }
    DemodTrace {
        axis: idx.iter().map(|&i| trace.axis[i]).collect(),
        values: idx.iter().map(|&i| trace.values[i]).collect(),
        meta: trace.meta.clone(),
    }
}

/// Sweep, reconstruct, and fit one resonance; shared by the spectrum and
/// parameter-sweep experiments.
struct SweptLine {
    trace: DemodTrace,
    spectrum_freq: Vec<f64>,
    spectrum_s: Vec<f64>,
    linewidth: f64,
    contrast: f64,
    center: f64,
    amplitude: f64,
    offset: f64,
    covariance: [[f64; 4]; 4],
    slope: f64,
    zero_crossing: f64,
    residuum_sigma: f64,
    slope_points: usize,
}

fn sweep_and_fit(cfg: &RunConfig, prep: &Prepared) -> Result<SweptLine> {
    let sw = &cfg.sweep;
    let center = sw.center.unwrap_or(prep.target_center);
    let step = sw.span / (sw.n_points - 1) as f64;
    let grid: Vec<f64> = (0..sw.n_points)
        .map(|i| center - sw.span / 2.0 + i as f64 * step)
        .collect();
    let inp = ChainInputs {
        drive: &cfg.drive,
        lines: &prep.lines,
        env: &cfg.environment,
        params: &cfg.ensemble,
        det: &cfg.detection,
        noise: &cfg.noise,
        b1: 1.0,
    };
    let trace = sweep_spectrum(&grid, &inp, cfg.resonator.as_ref(), sw.t_int, sw.sample_rate)?;
    let spectrum = integrate_demod(&trace)?;
    let baseline = cfg.detection.g * cfg.detection.k / LN_10;
    let line = fit_lorentzian(&spectrum, baseline)?;
    let slope_trace = window_around(&trace, line.center_x0, 0.35 * line.linewidth, 21);
    let sf = fit_slope(&slope_trace)?;
    Ok(SweptLine {
        trace,
        spectrum_freq: spectrum.freq,
        spectrum_s: spectrum.s_integ,
        linewidth: line.linewidth,
        contrast: line.contrast_c,
        center: line.center_x0,
        amplitude: line.amplitude_a,
        offset: line.offset,
        covariance: line.covariance,
        slope: sf.slope_m,
        zero_crossing: sf.zero_crossing,
        residuum_sigma: sf.residuum_sigma,
        slope_points: slope_trace.axis.len(),
    })
}

fn cmd_odmr_sweep(cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let prep = prepare(cfg, &cfg.drive)?;
    record_operating_point(report, &prep);
    let swept = sweep_and_fit(cfg, &prep)?;

    write_artifact(
        report,
        out_dir,
        "demod_trace",
        "demod_trace",
        &[
            CsvColumn::floats("f[Hz]", swept.trace.axis.clone()),
            CsvColumn::floats("s_demod[V]", swept.trace.values.clone()),
        ],
    )?;
    write_artifact(
        report,
        out_dir,
        "spectrum",
        "spectrum",
        &[
            CsvColumn::floats("f[Hz]", swept.spectrum_freq.clone()),
            CsvColumn::floats("s_integ[V]", swept.spectrum_s.clone()),
        ],
    )?;

    report.put("line_amplitude[V]", swept.amplitude);
    report.put("line_center[Hz]", swept.center);
    report.put("line_contrast[-]", swept.contrast);
    report.put("line_offset[V]", swept.offset);
    report.put("linewidth_fit[Hz]", swept.linewidth);
    report.put(
        "linewidth_fit_err[Hz]",
        swept.covariance[1][1].max(0.0).sqrt(),
    );
    report.put("slope[V/Hz]", swept.slope);
    report.put("zero_crossing[Hz]", swept.zero_crossing);
    report.put("noise_sigma[V]", swept.residuum_sigma);
    report.put_int("slope_points", swept.slope_points);
    let eta = sensitivity(
        swept.residuum_sigma,
        swept.slope,
        swept.trace.meta.t_int,
        prep.gamma,
    )?;
    report.put("eta_slope[T/sqrtHz]", eta.eta_b);
    report.put("b1_at_center[-]", b1_at(cfg, swept.center)?)
        ;
    Ok(())
}

fn cmd_param_sweep(cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let param = cfg.param_sweep.parameter()?;
    let unit = match param {
        SweepParam::FDepth | SweepParam::FMod => "Hz",
        SweepParam::PMw => "W",
        SweepParam::TInt => "s",
    };

    let n = cfg.param_sweep.values.len();
    let mut slopes = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut widths = Vec::with_capacity(n);
    let mut contrasts = Vec::with_capacity(n);
    let mut etas = Vec::with_capacity(n);

    for &v in &cfg.param_sweep.values {
        let mut c = cfg.clone();
        match param {
            SweepParam::FDepth => c.drive.f_depth = v,
            SweepParam::PMw => c.drive.p_mw = v,
            SweepParam::TInt => c.sweep.t_int = v,
            SweepParam::FMod => {
                c.drive.f_mod = v;
                // Keep a sane number of samples per modulation period.
                c.sweep.sample_rate = c.sweep.sample_rate.max(50.0 * v);
            }
        }
        c.drive
            .validate()
            .map_err(|e| Error::invalid(format!("sweep value {v}: {e}")))?;
        c.sweep
            .validate()
            .map_err(|e| Error::invalid(format!("sweep value {v}: {e}")))?;

        let prep = prepare(&c, &c.drive)?;
        let swept = sweep_and_fit(&c, &prep)?;

        // Noise at the operating point: repeated windows parked on the
        // zero crossing.
        let mut drive = c.drive.clone();
        drive.set_f_c(swept.zero_crossing);
        let b1 = b1_at(&c, swept.zero_crossing)?;
        let inp = ChainInputs {
            drive: &drive,
            lines: &prep.lines,
            env: &c.environment,
            params: &c.ensemble,
            det: &c.detection,
            noise: &c.noise,
            b1,
        };
        let noise_trace = demod_time_series(
            &inp,
            c.param_sweep.noise_windows,
            c.sweep.t_int,
            c.sweep.sample_rate,
        )?;
        let sigma = ml_std(&noise_trace.values);
        let eta = sensitivity(sigma, swept.slope, noise_trace.meta.t_int, prep.gamma)?;

        slopes.push(swept.slope);
        noises.push(sigma);
        widths.push(swept.linewidth);
        contrasts.push(swept.contrast);
        etas.push(eta.eta_b);
    }

    let eta_smooth = moving_mean3(&etas);
    write_artifact(
        report,
        out_dir,
        "param_sweep",
        "param_sweep",
        &[
            CsvColumn::floats(
                &format!("{}[{unit}]", param.as_str()),
                cfg.param_sweep.values.clone(),
            ),
            CsvColumn::floats("slope[V/Hz]", slopes.clone()),
            CsvColumn::floats("noise_sigma[V]", noises),
            CsvColumn::floats("linewidth[Hz]", widths),
            CsvColumn::floats("contrast[-]", contrasts),
            CsvColumn::floats("eta[T/sqrtHz]", etas.clone()),
            CsvColumn::floats("eta_smooth3[T/sqrtHz]", eta_smooth.clone()),
        ],
    )?;

    report.put_str("swept_param", param.as_str());
    report.put_int("n_values", n);
    let best_slope = (0..n)
        .max_by(|&a, &b| slopes[a].abs().partial_cmp(&slopes[b].abs()).unwrap())
        .unwrap();
    report.put("max_slope_value", cfg.param_sweep.values[best_slope]);
    report.put("max_slope[V/Hz]", slopes[best_slope]);
    if etas.iter().any(|&e| e > 0.0) {
        let best_eta = (0..n)
            .filter(|&i| etas[i] > 0.0)
            .min_by(|&a, &b| eta_smooth[a].partial_cmp(&eta_smooth[b]).unwrap())
            .unwrap();
        report.put("min_eta_value", cfg.param_sweep.values[best_eta]);
        report.put("min_eta[T/sqrtHz]", etas[best_eta]);
    }
    Ok(())
}

/// Three-point moving mean with shortened stencils at the ends.
fn moving_mean3(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            xs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// A demodulated time trace at fixed carrier, converted to field units
/// through a noiseless slope calibration.
struct FieldTrace {
    times: Vec<f64>,
    volts: Vec<f64>,
    fields: Vec<f64>,
    slope: f64,
    t_eff: f64,
}

fn acquire_field_trace(cfg: &RunConfig, prep: &Prepared) -> Result<FieldTrace> {
    let f_c = cfg.trace.f_c.unwrap_or(prep.target_center);
    let b1 = b1_at(cfg, f_c)?;
    let mut drive = cfg.drive.clone();
    drive.set_f_c(f_c);
    // Narrow probe spacing: the quadratic bias of the secant slope scales
    // with (delta/width)^2 and the probe is noiseless anyway.
    let delta = 0.01 * prep.linewidth;
    let slope = probe_slope(
        cfg,
        &prep.lines,
        &drive,
        f_c,
        delta,
        cfg.trace.t_int,
        cfg.trace.sample_rate,
        b1,
    )?;
    if slope == 0.0 {
        return Err(Error::invalid(
            "zero error-signal slope at the trace carrier; park it on a line".to_string(),
        ));
    }
    let inp = ChainInputs {
        drive: &drive,
        lines: &prep.lines,
        env: &cfg.environment,
        params: &cfg.ensemble,
        det: &cfg.detection,
        noise: &cfg.noise,
        b1,
    };
    let trace = demod_time_series(&inp, cfg.trace.n_windows, cfg.trace.t_int, cfg.trace.sample_rate)?;
    // A rising field raises the line center, which lowers the error
    // signal at fixed carrier; negate so the reported field follows the
    // applied one.
    let fields: Vec<f64> = trace
        .values
        .iter()
        .map(|s| field_from_shift(-s / slope, prep.gamma))
        .collect();
    Ok(FieldTrace {
        times: trace.axis,
        volts: trace.values,
        fields,
        slope,
        t_eff: trace.meta.t_int,
    })
}

/// Two-level statistics of a square-wave trace: windows are grouped by
/// waveform level, windows overlapping an edge are dropped, and the
/// residual spread is pooled across both groups.
struct PooledLevels {
    sigma: f64,
    separation: f64,
    mean_high: f64,
    mean_low: f64,
    dropped: usize,
    kept: usize,
}

fn pool_square_levels(
    times: &[f64],
    fields: &[f64],
    t_eff: f64,
    tf: &TestFieldWaveform,
) -> Result<PooledLevels> {
    let period = 1.0 / tf.frequency;
    let half = period / 2.0;
    let tol = 1e-9 * half;
    let mut high = Vec::new();
    let mut low = Vec::new();
    let mut dropped = 0usize;
    for (&t0, &x) in times.iter().zip(fields) {
        let next_edge = (((t0 + tol) / half).floor() + 1.0) * half;
        if next_edge < t0 + t_eff - tol {
            dropped += 1;
            continue;
        }
        let t_mid = t0 + t_eff / 2.0;
        if t_mid.rem_euclid(period) < half {
            high.push(x);
        } else {
            low.push(x);
        }
    }
    if high.len() < 2 || low.len() < 2 {
        return Err(Error::invalid(format!(
            "too few settled windows per level ({} high, {} low); lengthen the trace",
            high.len(),
            low.len()
        )));
    }
    let mean_high = high.iter().sum::<f64>() / high.len() as f64;
    let mean_low = low.iter().sum::<f64>() / low.len() as f64;
    let kept = high.len() + low.len();
    let ss: f64 = high.iter().map(|x| (x - mean_high).powi(2)).sum::<f64>()
        + low.iter().map(|x| (x - mean_low).powi(2)).sum::<f64>();
    Ok(PooledLevels {
        sigma: (ss / kept as f64).sqrt(),
        separation: (mean_high - mean_low).abs(),
        mean_high,
        mean_low,
        dropped,
        kept,
    })
}

fn cmd_testfield_trace(cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let tf = cfg.environment.test_field.clone().ok_or_else(|| {
        Error::config(
            "testfield-trace requires [environment.test_field] to be configured".to_string(),
        )
    })?;
    let prep = prepare(cfg, &cfg.drive)?;
    record_operating_point(report, &prep);
    let ft = acquire_field_trace(cfg, &prep)?;

    write_artifact(
        report,
        out_dir,
        "field_trace",
        "field_trace",
        &[
            CsvColumn::floats("t[s]", ft.times.clone()),
            CsvColumn::floats("s_demod[V]", ft.volts.clone()),
            CsvColumn::floats("delta_B[T]", ft.fields.clone()),
        ],
    )?;

    report.put("slope_cal[V/Hz]", ft.slope);
    let pooled = pool_square_levels(&ft.times, &ft.fields, ft.t_eff, &tf)?;
    report.put("sigma_field_pooled[T]", pooled.sigma);
    report.put("separation_field[T]", pooled.separation);
    report.put("level_high[T]", pooled.mean_high);
    report.put("level_low[T]", pooled.mean_low);
    report.put_int("windows_dropped", pooled.dropped);
    report.put_int("windows_kept", pooled.kept);
    report.put("eta_histogram[T/sqrtHz]", pooled.sigma * ft.t_eff.sqrt());

    // Whole-trace histogram as a cross-check; its warning flags the
    // bimodal structure the pooled statistics account for.
    let hist = histogram_sensitivity(&ft.volts, ft.t_eff, ft.slope, prep.gamma)?;
    report.put("eta_histogram_raw[T/sqrtHz]", hist.eta_b);
    if let Some(w) = &hist.warning {
        report.put_str("histogram_warning", w);
    }
    Ok(())
}

/// Strip the unit out of a `name[unit]` header.
fn unit_of(header: &str) -> &str {
    header
        .split_once('[')
        .and_then(|(_, rest)| rest.strip_suffix(']'))
        .unwrap_or("-")
}

fn cmd_allan(cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let (series, sample_period, unit, source): (Vec<f64>, f64, String, String) =
        match &cfg.allan.input {
            Some(path) => {
                let csv = read_csv(Path::new(path))?;
                let series = csv.float_column(&cfg.allan.column)?;
                let sample_period = match cfg.allan.sample_period {
                    Some(sp) => sp,
                    None => infer_sample_period(&csv)?,
                };
                let unit = csv
                    .column_index(&cfg.allan.column)
                    .map(|i| unit_of(&csv.headers[i]).to_string())
                    .unwrap_or_else(|| "-".to_string());
                (series, sample_period, unit, path.clone())
            }
            None => {
                let prep = prepare(cfg, &cfg.drive)?;
                record_operating_point(report, &prep);
                let ft = acquire_field_trace(cfg, &prep)?;
                (ft.fields, ft.t_eff, "T".to_string(), "synthesized".to_string())
            }
        };

    if !(sample_period > 0.0) {
        return Err(Error::config(format!(
            "sample period must be positive, got {sample_period}"
        )));
    }

    // Log-spaced averaging times, snapped onto the sample grid.
    let a = &cfg.allan;
    let mut taus = Vec::with_capacity(a.n_taus);
    let ln_lo = a.tau_min.ln();
    let ln_hi = a.tau_max.ln();
    for i in 0..a.n_taus {
        let frac = i as f64 / (a.n_taus - 1) as f64;
        let tau = (ln_lo + frac * (ln_hi - ln_lo)).exp();
        let k = (tau / sample_period).round().max(1.0);
        let snapped = k * sample_period;
        if taus.last().map(|&t: &f64| t < snapped).unwrap_or(true) {
            taus.push(snapped);
        }
    }

    let as_written = allan_deviation(&series, sample_period, &taus, AllanConvention::AsWritten)?;
    let half = allan_deviation(&series, sample_period, &taus, AllanConvention::HalfFactor)?;

    write_artifact(
        report,
        out_dir,
        "allan",
        "allan",
        &[
            CsvColumn::floats("tau[s]", as_written.taus.clone()),
            CsvColumn::floats(
                &format!("adev_as_written[{unit}]"),
                as_written.sigma_a.clone(),
            ),
            CsvColumn::floats(&format!("adev_half_factor[{unit}]"), half.sigma_a.clone()),
        ],
    )?;

    report.put_str("source", &source);
    report.put_int("n_samples", series.len());
    report.put("sample_period[s]", sample_period);
    report.put_int("n_taus_used", as_written.taus.len());
    report.put_int("n_taus_rejected", as_written.rejected_taus.len());
    Ok(())
}

/// Sample period from a trace's `t` column, insisting on a uniform grid.
fn infer_sample_period(csv: &crate::io::CsvFile) -> Result<f64> {
    let t = csv.float_column("t").map_err(|_| {
        Error::config(
            "cannot infer the sample period: no `t` column; set allan.sample_period".to_string(),
        )
    })?;
    if t.len() < 2 {
        return Err(Error::config(
            "cannot infer the sample period from fewer than two samples".to_string(),
        ));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::config(format!(
            "inferred sample period is not positive ({dt})"
        )));
    }
    for (i, w) in t.windows(2).enumerate() {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-6 * dt {
            return Err(Error::MalformedCsv {
                path: csv.path.clone(),
                line: i + 4,
                msg: format!("non-uniform sample time: step {step} vs mean {dt}"),
            });
        }
    }
    Ok(dt)
}

fn cmd_limits(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    let l = &cfg.limits;
    let constants = &cfg.ensemble.constants;
    let mut missing: Vec<&str> = Vec::new();
    if l.linewidth.is_none() {
        missing.push("limits.linewidth");
    }
    if l.contrast.is_none() {
        missing.push("limits.contrast");
    }
    let rate_from_shunt = match (l.u_shunt, l.r_shunt) {
        (Some(u), Some(r)) => Some(photon_rate(u, r, constants)?),
        (Some(_), None) => {
            missing.push("limits.r_shunt");
            None
        }
        (None, Some(_)) => {
            missing.push("limits.u_shunt");
            None
        }
        (None, None) => None,
    };
    if l.photon_rate.is_none() && rate_from_shunt.is_none() && matches!((l.u_shunt, l.r_shunt), (None, None)) {
        missing.push("limits.photon_rate or (limits.u_shunt and limits.r_shunt)");
    }
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "limits inputs missing: {}",
            missing.join(", ")
        )));
    }

    let rate = l.photon_rate.or(rate_from_shunt).unwrap();
    let eta_shot = shot_noise_limit(l.linewidth.unwrap(), l.contrast.unwrap(), rate, constants)?;

    report.put("photon_rate[1/s]", rate);
    if let Some(rs) = rate_from_shunt {
        report.put("photon_rate_from_shunt[1/s]", rs);
        if let Some(rd) = l.photon_rate {
            report.put("photon_rate_mismatch[-]", (rd - rs).abs() / rd.abs().max(f64::MIN_POSITIVE));
        }
    }
    report.put("eta_shot[T/sqrtHz]", eta_shot);
    if let Some(me) = l.measured_eta {
        report.put("measured_eta[T/sqrtHz]", me);
        report.put("measured_over_shot[-]", me / eta_shot);
    }
    Ok(())
}

/// Build a scenario from a CSV with `t` and `delta_B` columns and an
/// optional `phase` label column.
pub fn scenario_from_csv(path: &Path) -> Result<FieldScenario> {
    let csv = read_csv(path)?;
    let t = csv.float_column("t")?;
    let b = csv.float_column("delta_B")?;
    let labels: Vec<String> = match csv.column_index("phase") {
        Some(i) => csv.rows.iter().map(|r| r[i].trim().to_string()).collect(),
        None => vec!["scenario".to_string(); t.len()],
    };
    let nodes = t
        .into_iter()
        .zip(b)
        .zip(labels)
        .map(|((t, delta_b), label)| ScenarioNode { t, delta_b, label })
        .collect();
    let scenario = FieldScenario { nodes };
    scenario.validate().map_err(|e| {
        Error::invalid(format!("scenario file {}: {e}", path.display()))
    })?;
    Ok(scenario)
}

fn cmd_track(cfg: &RunConfig, out_dir: &Path, report: &mut RunReport) -> Result<()> {
    let prep = prepare(cfg, &cfg.tracker.drive)?;
    record_operating_point(report, &prep);
    let scenario = match cfg.scenario.as_deref() {
        None | Some("elevator") => elevator_scenario(),
        Some(path) => scenario_from_csv(Path::new(path))?,
    };
    let b1 = b1_at(cfg, cfg.tracker.initial_f_c.unwrap_or(prep.target_center))?;
    let log = track(
        &scenario,
        &cfg.tracker,
        &cfg.environment,
        &cfg.ensemble,
        &cfg.detection,
        &cfg.noise,
        prep.linewidth,
        b1,
    )?;

    write_artifact(
        report,
        out_dir,
        "track_log",
        "track_log",
        &[
            CsvColumn::floats("t[s]", log.timestamps.clone()),
            CsvColumn::floats("f_c[Hz]", log.f_c.clone()),
            CsvColumn::floats("delta_B[T]", log.delta_b.clone()),
            CsvColumn::floats("s_demod[V]", log.s_demod.clone()),
            CsvColumn::bools("lock_lost[-]", log.lock_lost.clone()),
            CsvColumn::floats("true_delta_B[T]", log.true_delta_b.clone()),
            CsvColumn::labels("phase[-]", log.phase.clone()),
        ],
    )?;

    let n_steps = log.f_c.windows(2).filter(|w| w[0] != w[1]).count();
    let final_err = (log.delta_b.last().unwrap() - log.true_delta_b.last().unwrap()).abs();
    report.put_str(
        "scenario",
        cfg.scenario.as_deref().unwrap_or("elevator"),
    );
    report.put_int("n_iterations", log.timestamps.len());
    report.put_int("n_steps", n_steps);
    report.put_int("lock_lost_count", log.lock_lost.iter().filter(|&&l| l).count());
    report.put("deadband[V]", log.deadband);
    report.put("step_quantum[Hz]", log.step_quantum);
    report.put("final_error_field[T]", final_err);
    Ok(())
}
