//! Run configuration: one TOML file describing an experiment end to end,
//! with strict key checking and dotted-path command-line overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hardware::{CoilDrive, CoilModel, ResonatorModel};
use crate::nv::{default_k_rabi, EnsembleParams, MagneticEnvironment, DEFAULT_I_OPT};
use crate::signal::{DetectionConfig, MwDriveConfig, NoiseConfig};
use crate::tracker::TrackerConfig;
use crate::{Error, Result};

/// Which experiment a run executes. The config's declared kind must match
/// the invoked subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OdmrSweep,
    ParamSweep,
    TestfieldTrace,
    Allan,
    Track,
    Limits,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::OdmrSweep => "odmr-sweep",
            ExperimentKind::ParamSweep => "param-sweep",
            ExperimentKind::TestfieldTrace => "testfield-trace",
            ExperimentKind::Allan => "allan",
            ExperimentKind::Track => "track",
            ExperimentKind::Limits => "limits",
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optical excitation constants: pump intensity at the ensemble and the
/// drive-amplitude calibration relating microwave power to Rabi frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    /// Pump intensity (W/m^2).
    pub i_opt: f64,
    /// Rabi frequency per sqrt(watt) of drive power (rad/s/sqrt(W)).
    pub k_rabi: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig { i_opt: DEFAULT_I_OPT, k_rabi: default_k_rabi() }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.i_opt >= 0.0) || !self.i_opt.is_finite() {
            return Err(Error::config(format!(
                "excitation.i_opt must be finite and >= 0, got {}",
                self.i_opt
            )));
        }
        if !(self.k_rabi > 0.0) || !self.k_rabi.is_finite() {
            return Err(Error::config(format!(
                "excitation.k_rabi must be finite and positive, got {}",
                self.k_rabi
            )));
        }
        Ok(())
    }
}

/// Frequency-sweep settings shared by the spectrum-producing experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Sweep center (Hz). `None` centers on the disturbance-axis line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    /// Full sweep width (Hz).
    pub span: f64,
    pub n_points: usize,
    /// Integration time per sweep point (s).
    pub t_int: f64,
    /// Synthesis sample rate (Hz).
    pub sample_rate: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            center: None,
            span: 600e3,
            n_points: 121,
            t_int: 2e-3,
            sample_rate: 100e3,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.span > 0.0) {
            return Err(Error::config(format!("sweep.span must be positive, got {}", self.span)));
        }
        if self.n_points < 2 {
            return Err(Error::config(format!(
                "sweep.n_points must be at least 2, got {}",
                self.n_points
            )));
        }
        if !(self.t_int > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::config(
                "sweep.t_int and sweep.sample_rate must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// A parameter name, or a list of them. Lists are accepted by the parser
/// solely so the validator can explain that sweeps cover one parameter at
/// a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSelector {
    One(String),
    Many(Vec<String>),
}

/// Parameters that cmd_param_sweep can scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    FDepth,
    PMw,
    TInt,
    FMod,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "f_depth" => Ok(SweepParam::FDepth),
            "p_mw" => Ok(SweepParam::PMw),
            "t_int" => Ok(SweepParam::TInt),
            "f_mod" => Ok(SweepParam::FMod),
            other => Err(Error::config(format!(
                "unknown sweep parameter {other:?}; expected one of f_depth, p_mw, t_int, f_mod"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::FDepth => "f_depth",
            SweepParam::PMw => "p_mw",
            SweepParam::TInt => "t_int",
            SweepParam::FMod => "f_mod",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamSweepConfig {
    pub param: ParamSelector,
    pub values: Vec<f64>,
    /// Windows used per point to estimate noise at the operating point.
    pub noise_windows: usize,
}

impl Default for ParamSweepConfig {
    fn default() -> Self {
        ParamSweepConfig {
            param: ParamSelector::One("f_depth".to_string()),
            values: Vec::new(),
            noise_windows: 40,
        }
    }
}

impl ParamSweepConfig {
    /// The single swept parameter; rejects multi-parameter requests.
    pub fn parameter(&self) -> Result<SweepParam> {
        match &self.param {
            ParamSelector::One(name) => SweepParam::parse(name),
            ParamSelector::Many(names) => Err(Error::config(format!(
                "sweeps cover one parameter at a time, got {} ({})",
                names.len(),
                names.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.parameter()?;
        if self.values.is_empty() {
            return Err(Error::config("param_sweep.values is empty".to_string()));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::config("param_sweep.values must be finite".to_string()));
        }
        if self.noise_windows < 2 {
            return Err(Error::config(format!(
                "param_sweep.noise_windows must be at least 2, got {}",
                self.noise_windows
            )));
        }
        Ok(())
    }
}

/// Fixed-carrier time-trace settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    /// Carrier (Hz). `None` parks on the disturbance-axis line center.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_c: Option<f64>,
    pub n_windows: usize,
    /// Integration time per window (s).
    pub t_int: f64,
    pub sample_rate: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { f_c: None, n_windows: 200, t_int: 1e-3, sample_rate: 100e3 }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_windows < 2 {
            return Err(Error::config(format!(
                "trace.n_windows must be at least 2, got {}",
                self.n_windows
            )));
        }
        if !(self.t_int > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::config(
                "trace.t_int and trace.sample_rate must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Stability-analysis settings. With `input` set, the named trace CSV is
/// ingested; otherwise a fresh trace is synthesized first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllanConfig {
    /// Path of a previously written trace CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    /// Column to analyze from the input CSV.
    pub column: String,
    /// Sample period of the input (s); inferred from a `t` column when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_period: Option<f64>,
    pub tau_min: f64,
    pub tau_max: f64,
    pub n_taus: usize,
}

impl Default for AllanConfig {
    fn default() -> Self {
        AllanConfig {
            input: None,
            column: "delta_B".to_string(),
            sample_period: None,
            tau_min: 1e-3,
            tau_max: 0.1,
            n_taus: 20,
        }
    }
}

impl AllanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0) || !(self.tau_max > self.tau_min) {
            return Err(Error::config(format!(
                "need 0 < allan.tau_min < allan.tau_max, got {} and {}",
                self.tau_min, self.tau_max
            )));
        }
        if self.n_taus < 2 {
            return Err(Error::config(format!(
                "allan.n_taus must be at least 2, got {}",
                self.n_taus
            )));
        }
        Ok(())
    }
}

/// Inputs for the fundamental-limit report. Fields left unset are reported
/// as missing by name when required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsConfig {
    /// Fitted linewidth (Hz).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linewidth: Option<f64>,
    /// Fractional contrast of the probed line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    /// Detected photon rate (1/s), if known directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photon_rate: Option<f64>,
    /// Shunt voltage (V) for the photocurrent-derived rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_shunt: Option<f64>,
    /// Shunt resistance (ohm).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_shunt: Option<f64>,
    /// Measured sensitivity (T/sqrt(Hz)) to compare against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_eta: Option<f64>,
}

/// Drive-coil description, echoed into reports with its computed center
/// field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilSection {
    pub model: CoilModel,
    pub drive: CoilDrive,
}

/// The complete description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    /// Overrides `noise.seed` when set; the `--seed` flag overrides both.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: String,
    /// Tracking scenario: `elevator` or the path of a scenario CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub ensemble: EnsembleParams,
    pub environment: MagneticEnvironment,
    pub drive: MwDriveConfig,
    pub detection: DetectionConfig,
    pub noise: NoiseConfig,
    pub excitation: ExcitationConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resonator: Option<ResonatorModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coil: Option<CoilSection>,
    pub sweep: SweepConfig,
    pub param_sweep: ParamSweepConfig,
    pub trace: TraceConfig,
    pub allan: AllanConfig,
    pub tracker: TrackerConfig,
    pub limits: LimitsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: ExperimentKind::OdmrSweep,
            seed: None,
            out_dir: "nvlab-out".to_string(),
            scenario: None,
            ensemble: EnsembleParams::default(),
            environment: MagneticEnvironment::default(),
            drive: MwDriveConfig::default(),
            detection: DetectionConfig::default(),
            noise: NoiseConfig::default(),
            excitation: ExcitationConfig::default(),
            resonator: None,
            coil: None,
            sweep: SweepConfig::default(),
            param_sweep: ParamSweepConfig::default(),
            trace: TraceConfig::default(),
            allan: AllanConfig::default(),
            tracker: TrackerConfig::default(),
            limits: LimitsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Validate every section that has internal invariants. Sections only
    /// used by other experiments are still checked so that a config is
    /// either fully well-formed or rejected.
    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate().map_err(Self::as_config)?;
        self.environment.validate().map_err(Self::as_config)?;
        self.drive.validate().map_err(Self::as_config)?;
        self.detection.validate().map_err(Self::as_config)?;
        self.noise.validate().map_err(Self::as_config)?;
        self.excitation.validate()?;
        if let Some(r) = &self.resonator {
            r.validate().map_err(Self::as_config)?;
        }
        if let Some(c) = &self.coil {
            c.model.validate().map_err(Self::as_config)?;
        }
        self.sweep.validate()?;
        self.trace.validate()?;
        self.allan.validate()?;
        self.tracker.validate().map_err(Self::as_config)?;
        // param_sweep.values may legitimately be empty unless the
        // param-sweep experiment actually runs.
        if self.experiment == ExperimentKind::ParamSweep {
            self.param_sweep.validate()?;
        } else {
            self.param_sweep.parameter()?;
        }
        Ok(())
    }

    fn as_config(e: Error) -> Error {
        match e {
            Error::InvalidInput(msg) => Error::Config(msg),
            other => other,
        }
    }

    /// The seed a run will actually use: `--seed` beats the top-level
    /// `seed` key, which beats `noise.seed`.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>) -> u64 {
        let seed = cli_seed.or(self.seed).unwrap_or(self.noise.seed);
        self.seed = Some(seed);
        self.noise.seed = seed;
        seed
    }
}

/// Parse configuration text, apply `--set` overrides, and validate.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("config parse error: {e}")))?;
    for (path, raw) in overrides {
        apply_override(&mut table, path, raw)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(format!("config error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a configuration file with overrides.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

/// Split a `key=value` argument into its dotted path and raw value.
pub fn split_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| {
        Error::config(format!("override {arg:?} is not of the form key=value"))
    })?;
    if k.trim().is_empty() {
        return Err(Error::config(format!("override {arg:?} has an empty key")));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

fn apply_override(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!(
            "override path {dotted:?} has an empty segment"
        )));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!(
                    "override path {dotted:?}: segment {p:?} is not a table"
                ))
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_raw_value(raw));
    Ok(())
}

/// Interpret an override value as TOML (number, bool, array, ...); fall
/// back to a plain string for things like file paths.
fn parse_raw_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
