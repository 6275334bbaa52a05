//! Python bindings for the NV-magnetometer simulation toolkit.
//!
//! The module (importable as `nvlab`) mirrors the library's main
//! operations: the resonance-line comb and power-broadened linewidth
//! model, in-memory ODMR spectra with Lorentzian fits, sensitivity /
//! Allan-deviation / shot-noise-limit analysis, the microwave resonator
//! model, the closed-loop resonance tracker, and the file-based
//! experiment runner (`run` from a config path, `run_toml` from inline
//! text).
//!
//! Scalar results come back as floats, series as lists, and structured
//! results as small data classes; experiment metrics arrive as a plain
//! dict so they can be inspected or serialized directly.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use nvlab_core::analysis::{self, AllanConvention};
use nvlab_core::config::{load_config, parse_config, split_override, RunConfig};
use nvlab_core::experiments::{run_experiment, RunReport};
use nvlab_core::fitting;
use nvlab_core::hardware::{self, ResonatorModel};
use nvlab_core::nv::{self, EnsembleParams, MagneticEnvironment, PhysicalConstants, DEFAULT_I_OPT};
use nvlab_core::signal::{
    self, ChainInputs, DetectionConfig, MwDriveConfig, NoiseConfig, Spectrum as CoreSpectrum,
};
use nvlab_core::tracker::{elevator_scenario, track, TrackerConfig};

/// Map library errors onto idiomatic Python exceptions: bad arguments and
/// bad configuration raise `ValueError`, filesystem problems raise
/// `OSError`, numerical failures (fits, missing zero crossings) raise
/// `RuntimeError`.
fn to_py(e: nvlab_core::Error) -> PyErr {
    use nvlab_core::Error as E;
    match &e {
        E::InvalidInput(_) | E::Config(_) => PyValueError::new_err(e.to_string()),
        E::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn default_gamma() -> f64 {
    PhysicalConstants::default().gamma_nv
}

/// One spin resonance of the 24-line comb.
#[pyclass(module = "nvlab")]
struct ResonanceLine {
    /// Center frequency (Hz).
    #[pyo3(get)]
    center: f64,
    /// Full width at half maximum (Hz).
    #[pyo3(get)]
    linewidth: f64,
    /// Peak contrast at unit drive delivery and unit tone weight.
    #[pyo3(get)]
    contrast: f64,
    /// Crystal orientation family, 0..=3.
    #[pyo3(get)]
    orientation_index: usize,
    /// Hyperfine component, -1 / 0 / +1.
    #[pyo3(get)]
    hyperfine_index: i8,
    /// Electron-spin branch, -1 or +1.
    #[pyo3(get)]
    branch: i8,
}

#[pymethods]
impl ResonanceLine {
    fn __repr__(&self) -> String {
        format!(
            "ResonanceLine(center={:.6e}, linewidth={:.4e}, contrast={:.4e}, \
             orientation_index={}, hyperfine_index={}, branch={})",
            self.center,
            self.linewidth,
            self.contrast,
            self.orientation_index,
            self.hyperfine_index,
            self.branch
        )
    }
}

impl From<&nv::ResonanceLine> for ResonanceLine {
    fn from(l: &nv::ResonanceLine) -> Self {
        ResonanceLine {
            center: l.center,
            linewidth: l.linewidth,
            contrast: l.contrast,
            orientation_index: l.orientation_index,
            hyperfine_index: l.hyperfine_index,
            branch: l.branch,
        }
    }
}

/// An integrated (reconstructed) fluorescence spectrum on a carrier grid.
#[pyclass(module = "nvlab")]
struct Spectrum {
    /// Carrier grid (Hz).
    #[pyo3(get)]
    freq: Vec<f64>,
    /// Integrated signal (V), zero-referenced at the first grid point.
    #[pyo3(get)]
    s_integ: Vec<f64>,
    /// Modulation depth used during acquisition (Hz).
    #[pyo3(get)]
    f_depth: f64,
}

#[pymethods]
impl Spectrum {
    fn __len__(&self) -> usize {
        self.freq.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Spectrum(n_points={}, f_depth={:.3e})",
            self.freq.len(),
            self.f_depth
        )
    }
}

/// Result of a Lorentzian dip fit to an integrated spectrum.
#[pyclass(module = "nvlab")]
struct LineFit {
    /// Dip amplitude (V), negative for a fluorescence dip.
    #[pyo3(get)]
    amplitude: f64,
    /// Full width at half maximum (Hz).
    #[pyo3(get)]
    linewidth: f64,
    /// Dip center (Hz).
    #[pyo3(get)]
    center: f64,
    /// Fractional fluorescence contrast, |amplitude| / baseline.
    #[pyo3(get)]
    contrast: f64,
    /// Additive offset of the fitted model (V).
    #[pyo3(get)]
    offset: f64,
    /// 4x4 covariance over (amplitude, linewidth, center, offset).
    #[pyo3(get)]
    covariance: Vec<Vec<f64>>,
}

#[pymethods]
impl LineFit {
    fn __repr__(&self) -> String {
        format!(
            "LineFit(center={:.6e}, linewidth={:.4e}, contrast={:.4e}, \
             amplitude={:.4e}, offset={:.4e})",
            self.center, self.linewidth, self.contrast, self.amplitude, self.offset
        )
    }
}

impl From<&fitting::LineFit> for LineFit {
    fn from(f: &fitting::LineFit) -> Self {
        LineFit {
            amplitude: f.amplitude_a,
            linewidth: f.linewidth,
            center: f.center_x0,
            contrast: f.contrast_c,
            offset: f.offset,
            covariance: f.covariance.iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Allan deviation over a grid of averaging times.
#[pyclass(module = "nvlab")]
struct AllanResult {
    /// Usable averaging times (s), increasing.
    #[pyo3(get)]
    taus: Vec<f64>,
    /// Deviation per tau, in the units of the input series.
    #[pyo3(get)]
    sigma_a: Vec<f64>,
    /// Requested averaging times that could not be used.
    #[pyo3(get)]
    rejected_taus: Vec<f64>,
    /// Whether the conventional factor 1/2 was applied inside the variance.
    #[pyo3(get)]
    half_factor: bool,
}

#[pymethods]
impl AllanResult {
    fn __repr__(&self) -> String {
        format!(
            "AllanResult(n_taus={}, rejected={}, half_factor={})",
            self.taus.len(),
            self.rejected_taus.len(),
            self.half_factor
        )
    }
}

/// Log of one closed-loop tracking run.
#[pyclass(module = "nvlab")]
struct TrackResult {
    /// Iteration start times (s).
    #[pyo3(get)]
    timestamps: Vec<f64>,
    /// Applied carrier per iteration (Hz).
    #[pyo3(get)]
    f_c: Vec<f64>,
    /// Field inferred from the carrier motion (T).
    #[pyo3(get)]
    delta_b: Vec<f64>,
    /// Raw error signal per iteration (V).
    #[pyo3(get)]
    s_demod: Vec<f64>,
    /// Whether the carrier had strayed more than three linewidths from
    /// the true center at this iteration.
    #[pyo3(get)]
    lock_lost: Vec<bool>,
    /// Ground-truth scenario field per iteration (T).
    #[pyo3(get)]
    true_delta_b: Vec<f64>,
    /// Scenario phase label per iteration.
    #[pyo3(get)]
    phase: Vec<String>,
    /// Step size the loop was run with (Hz).
    #[pyo3(get)]
    step_quantum: f64,
    /// Error threshold the loop actually used (V).
    #[pyo3(get)]
    deadband: f64,
}

#[pymethods]
impl TrackResult {
    fn __len__(&self) -> usize {
        self.timestamps.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrackResult(n_iter={}, step_quantum={:.1}, deadband={:.3e})",
            self.timestamps.len(),
            self.step_quantum,
            self.deadband
        )
    }
}

/// Report of one file-based experiment run.
#[pyclass(module = "nvlab")]
struct RunResult {
    /// Experiment name, e.g. "odmr-sweep".
    #[pyo3(get)]
    experiment: String,
    /// Seed the run was executed with.
    #[pyo3(get)]
    seed: u64,
    /// Directory the artifacts were written to.
    #[pyo3(get)]
    out_dir: String,
    /// Named metrics of the run as a dict.
    #[pyo3(get)]
    metrics: Py<PyAny>,
    /// Artifact manifest: list of dicts with name/file/schema/sha256.
    #[pyo3(get)]
    artifacts: Py<PyAny>,
    /// Human-readable digest, identical to the written summary.txt.
    #[pyo3(get)]
    summary: String,
}

#[pymethods]
impl RunResult {
    fn __repr__(&self) -> String {
        format!(
            "RunResult(experiment={:?}, seed={}, out_dir={:?})",
            self.experiment, self.seed, self.out_dir
        )
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_py_any(py)
        }
    }
}

fn report_to_result(py: Python<'_>, rep: &RunReport) -> PyResult<RunResult> {
    let metrics = PyDict::new(py);
    for (k, v) in &rep.metrics {
        metrics.set_item(k, json_to_py(py, v)?)?;
    }
    let artifacts = PyList::empty(py);
    for a in &rep.artifacts {
        let d = PyDict::new(py);
        d.set_item("name", &a.name)?;
        d.set_item("file", &a.file)?;
        d.set_item("schema", &a.schema)?;
        d.set_item("sha256", &a.sha256)?;
        artifacts.append(d)?;
    }
    Ok(RunResult {
        experiment: rep.experiment.clone(),
        seed: rep.seed,
        out_dir: rep.config.out_dir.clone(),
        metrics: metrics.into_py_any(py)?,
        artifacts: artifacts.into_py_any(py)?,
        summary: rep.summary_text(),
    })
}

/// Physical constants of the model as a dict: zero-field splitting `d_gs`
/// (Hz), its temperature coefficient `beta_t` (Hz/K), gyromagnetic ratio
/// `gamma_nv` (Hz/T), hyperfine splitting `f_hfs` (Hz), elementary charge
/// `e_charge` (C), vacuum permeability `mu_0` (N/A^2), and the Lorentzian
/// shot-noise lineshape factor `p_f`.
#[pyfunction]
fn constants(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let c = PhysicalConstants::default();
    let d = PyDict::new(py);
    d.set_item("d_gs", c.d_gs)?;
    d.set_item("beta_t", c.beta_t)?;
    d.set_item("gamma_nv", c.gamma_nv)?;
    d.set_item("f_hfs", c.f_hfs)?;
    d.set_item("e_charge", c.e_charge)?;
    d.set_item("mu_0", c.mu_0)?;
    d.set_item("p_f", c.p_f)?;
    d.into_py_any(py)
}

/// Gyromagnetic ratio of the spin (Hz/T).
#[pyfunction]
fn gyromagnetic_ratio() -> f64 {
    default_gamma()
}

/// Optical pumping rate (1/s) at pump intensity `i_opt` (W/m^2) for the
/// default ensemble. Called without arguments it gives the default
/// operating point.
#[pyfunction]
#[pyo3(signature = (i_opt = DEFAULT_I_OPT))]
fn pumping_rate(i_opt: f64) -> PyResult<f64> {
    nv::pumping_rate(i_opt, &EnsembleParams::default()).map_err(to_py)
}

/// Power-broadened resonance linewidth (Hz FWHM) of the default ensemble
/// at microwave power `p_mw` (W) and pump intensity `i_opt` (W/m^2).
#[pyfunction]
#[pyo3(signature = (p_mw, i_opt = DEFAULT_I_OPT))]
fn power_broadened_linewidth(p_mw: f64, i_opt: f64) -> PyResult<f64> {
    let params = EnsembleParams::default();
    let gp = nv::pumping_rate(i_opt, &params).map_err(to_py)?;
    let rabi = nv::rabi_frequency(p_mw, nv::default_k_rabi());
    nv::power_broadened_linewidth(rabi, &params, gp).map_err(to_py)
}

/// The 24 resonance lines (4 orientations x 2 branches x 3 hyperfine
/// components) of a bias field vector `field` (T), sorted by center
/// frequency. `linewidth` (Hz FWHM) is stamped on every line; when
/// omitted it is computed from the linewidth model at power `p_mw` (W).
#[pyfunction]
#[pyo3(signature = (field, linewidth = None, delta_t = 0.0, p_mw = 58e-6))]
fn resonance_lines(
    field: [f64; 3],
    linewidth: Option<f64>,
    delta_t: f64,
    p_mw: f64,
) -> PyResult<Vec<ResonanceLine>> {
    let lw = match linewidth {
        Some(w) => w,
        None => power_broadened_linewidth(p_mw, DEFAULT_I_OPT)?,
    };
    let env = MagneticEnvironment {
        b0_vector: field,
        delta_t,
        ..Default::default()
    };
    let lines =
        nv::resonance_frequencies(&env, &EnsembleParams::default(), lw).map_err(to_py)?;
    Ok(lines.iter().map(ResonanceLine::from).collect())
}

/// Lorentzian peak `A * (w/2)^2 / ((x-x0)^2 + (w/2)^2)` with `fwhm` the
/// full width at half maximum.
#[pyfunction]
fn lorentzian_peak(x: f64, x0: f64, fwhm: f64, amplitude: f64) -> f64 {
    nv::lorentzian_peak(x, x0, fwhm, amplitude)
}

/// Synthesize a frequency sweep through the full detection chain and
/// integrate the demodulated error signal back into a spectrum.
///
/// The sweep is centered on `center` (Hz); by default that is the upper
/// central-hyperfine resonance of the disturbance axis in the default
/// bias field (or in `b0`, a 3-vector in T, when given). Noise is off
/// unless `shot_noise` / `laser_rin` enable it; `seed` fixes the streams.
#[pyfunction]
#[pyo3(signature = (
    center = None, span = 600e3, n_points = 241, p_mw = 58e-6, f_mod = 1e3,
    f_depth = 40e3, t_int = 2e-3, sample_rate = 100e3, b0 = None, seed = 0,
    shot_noise = false, laser_rin = 0.0,
))]
#[allow(clippy::too_many_arguments)]
fn odmr_spectrum(
    center: Option<f64>,
    span: f64,
    n_points: usize,
    p_mw: f64,
    f_mod: f64,
    f_depth: f64,
    t_int: f64,
    sample_rate: f64,
    b0: Option<[f64; 3]>,
    seed: u64,
    shot_noise: bool,
    laser_rin: f64,
) -> PyResult<Spectrum> {
    if n_points < 2 {
        return Err(PyValueError::new_err(format!(
            "n_points must be at least 2, got {n_points}"
        )));
    }
    if !(span > 0.0) {
        return Err(PyValueError::new_err(format!(
            "span must be positive, got {span}"
        )));
    }
    let params = EnsembleParams::default();
    let mut env = MagneticEnvironment::default();
    if let Some(b) = b0 {
        env.b0_vector = b;
    }
    let det = DetectionConfig::default();
    let drive = MwDriveConfig {
        f_mod,
        f_depth,
        p_mw,
        ..Default::default()
    };
    let noise = NoiseConfig {
        seed,
        shot_noise_on: shot_noise,
        laser_rin,
        ..Default::default()
    };
    let gp = nv::pumping_rate(DEFAULT_I_OPT, &params).map_err(to_py)?;
    let rabi = nv::rabi_frequency(p_mw, nv::default_k_rabi());
    let lw = nv::power_broadened_linewidth(rabi, &params, gp).map_err(to_py)?;
    let lines = nv::resonance_frequencies(&env, &params, lw).map_err(to_py)?;
    let axis = signal::disturbance_axis(&env);
    let c = match center {
        Some(c) => c,
        None => {
            lines
                .iter()
                .find(|l| l.orientation_index == axis && l.branch == 1 && l.hyperfine_index == 0)
                .expect("the comb always contains the upper central line")
                .center
        }
    };
    let step = span / (n_points - 1) as f64;
    let grid: Vec<f64> = (0..n_points)
        .map(|i| c - span / 2.0 + i as f64 * step)
        .collect();
    let inp = ChainInputs {
        drive: &drive,
        lines: &lines,
        env: &env,
        params: &params,
        det: &det,
        noise: &noise,
        b1: 1.0,
    };
    let trace = signal::sweep_spectrum(&grid, &inp, None, t_int, sample_rate).map_err(to_py)?;
    let sp: CoreSpectrum = signal::integrate_demod(&trace).map_err(to_py)?;
    Ok(Spectrum {
        freq: sp.freq,
        s_integ: sp.s_integ,
        f_depth: sp.f_depth,
    })
}

/// Fit a Lorentzian dip to an integrated spectrum. `baseline` converts
/// the voltage amplitude into fractional fluorescence contrast; when
/// omitted, the default detection chain's volts-per-fractional-change
/// factor is used.
#[pyfunction]
#[pyo3(signature = (freq, s_integ, baseline = None))]
fn fit_lorentzian(freq: Vec<f64>, s_integ: Vec<f64>, baseline: Option<f64>) -> PyResult<LineFit> {
    let det = DetectionConfig::default();
    let baseline = baseline.unwrap_or(det.g * det.k / std::f64::consts::LN_10);
    let sp = CoreSpectrum {
        freq,
        s_integ,
        f_depth: 0.0,
    };
    fitting::fit_lorentzian(&sp, baseline)
        .map(|f| LineFit::from(&f))
        .map_err(to_py)
}

/// Slope-method sensitivity `sigma / (gamma * |slope|) * sqrt(t_int)`
/// (T/sqrt(Hz)) from the demodulated noise level `sigma` (V), the error
/// slope (V/Hz), and the integration time per sample (s).
#[pyfunction]
#[pyo3(signature = (sigma, slope, t_int, gamma = None))]
fn sensitivity(sigma: f64, slope: f64, t_int: f64, gamma: Option<f64>) -> PyResult<f64> {
    let gamma = gamma.unwrap_or_else(default_gamma);
    analysis::sensitivity(sigma, slope, t_int, gamma)
        .map(|r| r.eta_b)
        .map_err(to_py)
}

/// Sensitivity from the sample statistics of a constant-field trace
/// segment. Returns a dict with `eta_b` (T/sqrt(Hz)), `sigma` (V),
/// `sigma_field` (T), and `warning` (str or None).
#[pyfunction]
#[pyo3(signature = (samples, t_int, slope, gamma = None))]
fn histogram_sensitivity(
    py: Python<'_>,
    samples: Vec<f64>,
    t_int: f64,
    slope: f64,
    gamma: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let gamma = gamma.unwrap_or_else(default_gamma);
    let rep = analysis::histogram_sensitivity(&samples, t_int, slope, gamma).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("eta_b", rep.eta_b)?;
    d.set_item("sigma", rep.sigma)?;
    d.set_item("sigma_field", rep.sigma_field)?;
    d.set_item("warning", rep.warning)?;
    d.into_py_any(py)
}

/// Shot-noise-limited sensitivity (T/sqrt(Hz)) of a Lorentzian line with
/// the given FWHM `linewidth` (Hz), fractional `contrast`, and detected
/// `photon_rate` (1/s).
#[pyfunction]
#[pyo3(signature = (linewidth, contrast, photon_rate))]
fn shot_noise_limit(linewidth: f64, contrast: f64, photon_rate: f64) -> PyResult<f64> {
    analysis::shot_noise_limit(linewidth, contrast, photon_rate, &PhysicalConstants::default())
        .map_err(to_py)
}

/// Detected photon rate (1/s) from the photodiode shunt voltage (V) and
/// shunt resistance (ohm).
#[pyfunction]
fn photon_rate(u_shunt: f64, r_shunt: f64) -> PyResult<f64> {
    analysis::photon_rate(u_shunt, r_shunt, &PhysicalConstants::default()).map_err(to_py)
}

/// Signed field equivalent (T) of a resonance-frequency shift `df` (Hz).
#[pyfunction]
#[pyo3(signature = (df, gamma = None))]
fn field_from_shift(df: f64, gamma: Option<f64>) -> f64 {
    analysis::field_from_shift(df, gamma.unwrap_or_else(default_gamma))
}

/// Allan deviation of a uniformly sampled series over the averaging
/// times `taus` (s). `half_factor` selects the conventional factor 1/2
/// inside the variance; without it the deviation is exactly sqrt(2)
/// larger.
#[pyfunction]
#[pyo3(signature = (samples, sample_period, taus, half_factor = true))]
fn allan_deviation(
    samples: Vec<f64>,
    sample_period: f64,
    taus: Vec<f64>,
    half_factor: bool,
) -> PyResult<AllanResult> {
    let conv = if half_factor {
        AllanConvention::HalfFactor
    } else {
        AllanConvention::AsWritten
    };
    let series =
        analysis::allan_deviation(&samples, sample_period, &taus, conv).map_err(to_py)?;
    Ok(AllanResult {
        taus: series.taus,
        sigma_a: series.sigma_a,
        rejected_taus: series.rejected_taus,
        half_factor,
    })
}

fn resonator_from(q0: Option<f64>, beta_c: Option<f64>, f_res: Option<f64>) -> ResonatorModel {
    let d = ResonatorModel::default();
    ResonatorModel {
        q0: q0.unwrap_or(d.q0),
        beta_c: beta_c.unwrap_or(d.beta_c),
        f_res: f_res.unwrap_or(d.f_res),
    }
}

/// Reflection coefficient |S11| in dB of the microwave resonator at
/// frequency `f` (Hz). Omitted model parameters fall back to the default
/// resonator.
#[pyfunction]
#[pyo3(signature = (f, q0 = None, beta_c = None, f_res = None))]
fn reflection_s11(f: f64, q0: Option<f64>, beta_c: Option<f64>, f_res: Option<f64>) -> PyResult<f64> {
    hardware::reflection_s11(f, &resonator_from(q0, beta_c, f_res)).map_err(to_py)
}

/// Loaded -3 dB bandwidth (Hz) of the microwave resonator,
/// `(1 + beta_c) * f_res / q0`.
#[pyfunction]
#[pyo3(signature = (q0 = None, beta_c = None, f_res = None))]
fn resonator_bandwidth(q0: Option<f64>, beta_c: Option<f64>, f_res: Option<f64>) -> PyResult<f64> {
    hardware::resonator_bandwidth(&resonator_from(q0, beta_c, f_res)).map_err(to_py)
}

/// Fit the resonator model to a measured |S11| trace (dB over Hz).
/// Returns a dict with `q0`, `beta_c`, and `f_res`.
#[pyfunction]
fn fit_resonator(py: Python<'_>, freq: Vec<f64>, s11_db: Vec<f64>) -> PyResult<Py<PyAny>> {
    let model = hardware::fit_resonator(&freq, &s11_db).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("q0", model.q0)?;
    d.set_item("beta_c", model.beta_c)?;
    d.set_item("f_res", model.f_res)?;
    d.into_py_any(py)
}

/// Run the closed-loop resonance tracker against the built-in elevator
/// field scenario and return the full iteration log.
#[pyfunction]
#[pyo3(signature = (
    step_quantum = 250.0, t_int_per_iter = 1e-3, p_mw = 58e-6, seed = 0,
    shot_noise = false, laser_rin = 0.0,
))]
fn track_elevator(
    step_quantum: f64,
    t_int_per_iter: f64,
    p_mw: f64,
    seed: u64,
    shot_noise: bool,
    laser_rin: f64,
) -> PyResult<TrackResult> {
    let params = EnsembleParams::default();
    let env = MagneticEnvironment::default();
    let det = DetectionConfig::default();
    let noise = NoiseConfig {
        seed,
        shot_noise_on: shot_noise,
        laser_rin,
        ..Default::default()
    };
    let mut cfg = TrackerConfig::default();
    cfg.step_quantum = step_quantum;
    cfg.t_int_per_iter = t_int_per_iter;
    cfg.drive.p_mw = p_mw;
    let gp = nv::pumping_rate(DEFAULT_I_OPT, &params).map_err(to_py)?;
    let rabi = nv::rabi_frequency(p_mw, nv::default_k_rabi());
    let lw = nv::power_broadened_linewidth(rabi, &params, gp).map_err(to_py)?;
    let log = track(
        &elevator_scenario(),
        &cfg,
        &env,
        &params,
        &det,
        &noise,
        lw,
        1.0,
    )
    .map_err(to_py)?;
    Ok(TrackResult {
        timestamps: log.timestamps,
        f_c: log.f_c,
        delta_b: log.delta_b,
        s_demod: log.s_demod,
        lock_lost: log.lock_lost,
        true_delta_b: log.true_delta_b,
        phase: log.phase,
        step_quantum: log.step_quantum,
        deadband: log.deadband,
    })
}

fn parse_overrides(overrides: Option<Vec<String>>) -> PyResult<Vec<(String, String)>> {
    overrides
        .unwrap_or_default()
        .iter()
        .map(|s| split_override(s).map_err(to_py))
        .collect()
}

fn finish_run(
    py: Python<'_>,
    mut cfg: RunConfig,
    out: Option<&str>,
    seed: Option<u64>,
) -> PyResult<RunResult> {
    if let Some(dir) = out {
        cfg.out_dir = dir.to_string();
    }
    cfg.resolve_seed(seed);
    let report = run_experiment(&cfg).map_err(to_py)?;
    report_to_result(py, &report)
}

/// Run one experiment from a TOML config file, exactly like the CLI:
/// `out` replaces the output directory, `seed` the RNG seed, and
/// `overrides` is a list of dotted `key=value` strings. Artifacts are
/// written to disk; the returned result carries the metrics and the
/// artifact manifest.
#[pyfunction]
#[pyo3(signature = (config_path, out = None, seed = None, overrides = None))]
fn run(
    py: Python<'_>,
    config_path: &str,
    out: Option<&str>,
    seed: Option<u64>,
    overrides: Option<Vec<String>>,
) -> PyResult<RunResult> {
    let ov = parse_overrides(overrides)?;
    let cfg = load_config(Path::new(config_path), &ov).map_err(to_py)?;
    finish_run(py, cfg, out, seed)
}

/// Run one experiment from inline TOML text; see `run` for the
/// remaining arguments.
#[pyfunction]
#[pyo3(signature = (text, out = None, seed = None, overrides = None))]
fn run_toml(
    py: Python<'_>,
    text: &str,
    out: Option<&str>,
    seed: Option<u64>,
    overrides: Option<Vec<String>>,
) -> PyResult<RunResult> {
    let ov = parse_overrides(overrides)?;
    let cfg = parse_config(text, &ov).map_err(to_py)?;
    finish_run(py, cfg, out, seed)
}

#[pymodule]
fn nvlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ResonanceLine>()?;
    m.add_class::<Spectrum>()?;
    m.add_class::<LineFit>()?;
    m.add_class::<AllanResult>()?;
    m.add_class::<TrackResult>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    m.add_function(wrap_pyfunction!(gyromagnetic_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(pumping_rate, m)?)?;
    m.add_function(wrap_pyfunction!(power_broadened_linewidth, m)?)?;
    m.add_function(wrap_pyfunction!(resonance_lines, m)?)?;
    m.add_function(wrap_pyfunction!(lorentzian_peak, m)?)?;
    m.add_function(wrap_pyfunction!(odmr_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lorentzian, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(shot_noise_limit, m)?)?;
    m.add_function(wrap_pyfunction!(photon_rate, m)?)?;
    m.add_function(wrap_pyfunction!(field_from_shift, m)?)?;
    m.add_function(wrap_pyfunction!(allan_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(reflection_s11, m)?)?;
    m.add_function(wrap_pyfunction!(resonator_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(fit_resonator, m)?)?;
    m.add_function(wrap_pyfunction!(track_elevator, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_toml, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
