//! Experiment configuration: a TOML file with dotted keys.
//!
//! ```toml
//! experiment = "dissipation-sweep"
//! field = "cellular"
//! seed = 7
//! output_dir = "out/sweep"
//! workers = 2
//! grid.n = 256
//! time.t_end = 200.0
//! time.samples = 200
//! viscosity.nu_list = [1e-4, 3e-4, 1e-3]
//! region.kind = "annulus"
//! region.h_lo = 0.3
//! region.h_hi = 0.7
//! datum.kind = "annulus-bump"
//! ```
//!
//! Every key is optional except `experiment`; see [`ExperimentConfig`]
//! for the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MixlabError, Result};
use crate::field::HamiltonianField;

pub const EXPERIMENTS: [&str; 6] =
    ["period-table", "chart-validate", "mixing-decay", "dissipation-sweep", "thm-main-protocol", "envelope-scan"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_field")]
    pub field: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; `None` defers to `MIXLAB_WORKERS`, then to rayon.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub viscosity: ViscosityConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub datum: DatumConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub period_table: PeriodTableConfig,
    #[serde(default)]
    pub chart: ChartConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub envelope: EnvelopeConfig,
}

fn default_field() -> String {
    "cellular".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("mixlab-out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 128 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
    /// `linear` or `log` spacing of the sample times.
    pub spacing: String,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { t_start: 0.0, t_end: 10.0, samples: 20, spacing: "linear".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViscosityConfig {
    pub nu_list: Vec<f64>,
    /// Stop a dissipation run once `‖ρ‖` has fallen by this many e-folds.
    pub stop_efolds: f64,
    pub calibration_nu: f64,
    pub calibration_t: f64,
}

impl Default for ViscosityConfig {
    fn default() -> Self {
        ViscosityConfig { nu_list: vec![1e-3], stop_efolds: 2.0, calibration_nu: 1e-3, calibration_t: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    /// `annulus`, `auto-annulus` or `elliptic`.
    pub kind: String,
    pub h_lo: f64,
    pub h_hi: f64,
    pub cell: usize,
    /// Radius of the disc around the cell centre for `elliptic`.
    pub radius: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { kind: "annulus".into(), h_lo: 0.3, h_hi: 0.7, cell: 0, radius: 0.3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatumConfig {
    /// `annulus-bump`, `angle-mode` or `file`.
    pub kind: String,
    /// Angular wavenumber: of `cos(k x₁)` for the bump, of `e^{ikθ}` for
    /// the angle mode.
    pub k: i64,
    pub amplitude: f64,
    /// Draw mode phases from `seed`.
    pub random_phase: bool,
    /// Remove streamline averages by level binning.
    pub project: bool,
    pub path: Option<PathBuf>,
}

impl Default for DatumConfig {
    fn default() -> Self {
        DatumConfig { kind: "annulus-bump".into(), k: 1, amplitude: 1.0, random_phase: false, project: false, path: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub ode: f64,
    pub cfl: f64,
    pub projection_bins: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { ode: 1e-11, cfl: 0.5, projection_bins: 256 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeriodTableConfig {
    pub n_levels: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub spacing: String,
    /// `agm`, `quadrature` or `return-map`.
    pub method: String,
}

impl Default for PeriodTableConfig {
    fn default() -> Self {
        PeriodTableConfig { n_levels: 50, h_min: 1e-4, h_max: 1.0 - 1e-6, spacing: "log".into(), method: "agm".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChartConfig {
    pub n_theta: usize,
    pub n_levels: usize,
    /// Random points for the angle evolution check.
    pub checks: usize,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig { n_theta: 64, n_levels: 32, checks: 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    /// `oracle` (exact transport through the chart) or `solver` (spectral, ν = 0).
    pub method: String,
    /// Start of the fit window; `None` means five of the longest periods.
    pub fit_start: Option<f64>,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig { method: "oracle".into(), fit_start: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeConfig {
    pub eps: f64,
    pub kappa: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig { eps: 0.05, kappa: 0.1 }
    }
}

fn bad(msg: impl Into<String>) -> MixlabError {
    MixlabError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn field(&self) -> Result<HamiltonianField> {
        HamiltonianField::from_spec(&self.field)
    }

    /// Checks every numeric range and name before anything runs.
    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(MixlabError::UnknownExperiment(self.experiment.clone()));
        }
        self.field()?;
        let n = self.grid.n;
        if n < 8 || !n.is_power_of_two() {
            return Err(bad(format!("grid.n = {n} must be a power of two ≥ 8")));
        }
        let t = &self.time;
        if !(t.t_start >= 0.0 && t.t_end > t.t_start && t.t_end.is_finite()) {
            return Err(bad("time range must satisfy 0 ≤ t_start < t_end < ∞"));
        }
        if t.samples < 1 {
            return Err(bad("time.samples must be at least 1"));
        }
        match t.spacing.as_str() {
            "linear" => {}
            "log" if t.t_start > 0.0 => {}
            "log" => return Err(bad("log-spaced samples need time.t_start > 0")),
            s => return Err(bad(format!("unknown time.spacing `{s}`"))),
        }
        let v = &self.viscosity;
        if v.nu_list.is_empty() || v.nu_list.iter().any(|&nu| !(nu >= 0.0 && nu.is_finite())) {
            return Err(bad("viscosity.nu_list must hold non-negative values"));
        }
        if !(v.stop_efolds > 0.0) || !(v.calibration_nu > 0.0) || !(v.calibration_t > 0.0) {
            return Err(bad("viscosity.stop_efolds, calibration_nu and calibration_t must be positive"));
        }
        let r = &self.region;
        match r.kind.as_str() {
            "annulus" => {
                if !(r.h_lo < r.h_hi) {
                    return Err(bad("region.h_lo must be below region.h_hi"));
                }
            }
            "auto-annulus" => {}
            "elliptic" => {
                if !(r.radius > 0.0) {
                    return Err(bad("region.radius must be positive"));
                }
            }
            k => return Err(bad(format!("unknown region.kind `{k}`"))),
        }
        match self.datum.kind.as_str() {
            "annulus-bump" | "angle-mode" => {}
            "file" => {
                if self.datum.path.is_none() {
                    return Err(bad("datum.kind = file needs datum.path"));
                }
            }
            k => return Err(bad(format!("unknown datum.kind `{k}`"))),
        }
        if !(self.datum.amplitude.is_finite()) {
            return Err(bad("datum.amplitude must be finite"));
        }
        let tol = &self.tolerances;
        if !(tol.ode > 0.0 && tol.ode < 1e-2) || !(tol.cfl > 0.0 && tol.cfl <= 1.0) || tol.projection_bins < 2 {
            return Err(bad("tolerances out of range (ode in (0, 1e-2), cfl in (0, 1], projection_bins ≥ 2)"));
        }
        let p = &self.period_table;
        if p.n_levels < 1 || !(0.0 < p.h_min && p.h_min <= p.h_max && p.h_max <= 1.0) {
            return Err(bad("period_table needs n_levels ≥ 1 and 0 < h_min ≤ h_max ≤ 1"));
        }
        if !["log", "linear"].contains(&p.spacing.as_str()) {
            return Err(bad(format!("unknown period_table.spacing `{}`", p.spacing)));
        }
        if !["agm", "quadrature", "return-map"].contains(&p.method.as_str()) {
            return Err(bad(format!("unknown period_table.method `{}`", p.method)));
        }
        let c = &self.chart;
        if c.n_theta < 4 || c.n_levels < 2 {
            return Err(bad("chart needs n_theta ≥ 4 and n_levels ≥ 2"));
        }
        if !["oracle", "solver"].contains(&self.mixing.method.as_str()) {
            return Err(bad(format!("unknown mixing.method `{}`", self.mixing.method)));
        }
        let e = &self.envelope;
        if !(0.0..1.0).contains(&e.eps) || !(e.kappa > 0.0 && e.kappa < 0.25) {
            return Err(bad("envelope needs eps in [0, 1) and kappa in (0, 1/4)"));
        }
        if self.workers == Some(0) {
            return Err(bad("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn sample_times(&self) -> Vec<f64> {
        let t = &self.time;
        match t.spacing.as_str() {
            "log" => crate::period::logspace(t.t_start, t.t_end, t.samples),
            _ if t.samples == 1 => vec![t.t_end],
            _ => crate::period::linspace(t.t_start, t.t_end, t.samples),
        }
    }
}
