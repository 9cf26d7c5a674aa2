//! Experiment dispatch: builds the field, region and datum from an
//! [`ExperimentConfig`], runs the experiment inside a sized worker pool and
//! writes its artifacts plus `manifest.json` into the output directory.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::actionangle::{angle_of_point_refined, build_cellular_chart, build_chart, build_transversal, ActionAngleChart};
use crate::config::ExperimentConfig;
use crate::diagnostics::{self, fit_dissipation_rate, fit_mixing_rate, DecayRun, ProtocolOptions};
use crate::error::{MixlabError, Result};
use crate::field::{find_good_annulus, min_speed_on_level, AnnulusOptions};
use crate::field::{HamiltonianField, LevelAnnulus};
use crate::io::{fmt_f64, write_csv};
use crate::lagrangian::{flow_map, return_period, section_point, PeriodMethod, ReturnOptions};
use crate::ode::OdeOptions;
use crate::oracle::{self, AngleModeField, CellularWeights, ChartGridMap, EnvelopeOptions, EnvelopeRegime};
use crate::period::{linear_fit, linspace, logspace, PeriodTable};
use crate::spectral::{self, ScalarField, Solver};

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub workers: usize,
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
}

/// Worker count: explicit override (CLI or `MIXLAB_WORKERS`), then the
/// config key, then the machine's parallelism.
pub fn resolve_workers(cfg: &ExperimentConfig, override_workers: Option<usize>) -> usize {
    override_workers
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

/// Validates `cfg`, then runs it on a dedicated pool of `workers` threads.
pub fn run(cfg: &ExperimentConfig, output_dir: Option<&Path>, workers: Option<usize>) -> Result<Manifest> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    let workers = resolve_workers(&cfg, workers);
    fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MixlabError::InvalidArgument(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let artifacts = pool.install(|| dispatch(&cfg))?;
    let manifest = Manifest {
        experiment: cfg.experiment.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        workers,
        artifacts,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Machine-readable error record.
pub fn error_json(err: &MixlabError) -> Value {
    json!({ "error": { "kind": err.kind(), "message": err.to_string() } })
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = Output { dir: cfg.output_dir.clone(), written: Vec::new() };
    match cfg.experiment.as_str() {
        "period-table" => period_table(cfg, out),
        "chart-validate" => chart_validate(cfg, out),
        "mixing-decay" => mixing_decay(cfg, out),
        "dissipation-sweep" => dissipation_sweep(cfg, out),
        "thm-main-protocol" => protocol(cfg, out),
        "envelope-scan" => envelope_scan(cfg, out),
        other => Err(MixlabError::UnknownExperiment(other.to_string())),
    }
}

struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path(name);
        write_csv(&p, header, rows)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, value)
    }

    fn with_writer<F: FnOnce(&mut BufWriter<File>) -> Result<()>>(&mut self, name: &str, f: F) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn done(self) -> Result<Vec<String>> {
        Ok(self.written)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn require_cellular(field: &HamiltonianField, what: &str) -> Result<()> {
    if field.name() != HamiltonianField::cellular().name() {
        return Err(MixlabError::Config(format!("{what} is only available for the cellular field")));
    }
    Ok(())
}

fn cell_of(field: &HamiltonianField, id: usize) -> Result<crate::field::Cell> {
    field
        .cells()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| MixlabError::Config(format!("field `{}` has no cell {id}", field.name())))
}

fn bump(s: f64, a: f64, b: f64) -> f64 {
    if s <= a || s >= b {
        return 0.0;
    }
    let u = (2.0 * s - a - b) / (b - a);
    (1.0 - 1.0 / (1.0 - u * u)).exp()
}

/// Level band of the run, if the region is an annulus.
fn annulus(cfg: &ExperimentConfig, field: &HamiltonianField) -> Result<Option<LevelAnnulus>> {
    let r = &cfg.region;
    match r.kind.as_str() {
        "annulus" => {
            let c0 = if field.cells().iter().any(|c| c.id == r.cell) {
                let a = min_speed_on_level(field, r.cell, r.h_lo, 128)?;
                let b = min_speed_on_level(field, r.cell, r.h_hi, 128)?;
                a.min(b)
            } else {
                0.0
            };
            Ok(Some(LevelAnnulus { h_lo: r.h_lo, h_hi: r.h_hi, c0, cell: r.cell }))
        }
        "auto-annulus" => Ok(Some(find_good_annulus(field, r.cell, &AnnulusOptions::default())?)),
        _ => Ok(None),
    }
}

/// Initial phase: zero, or drawn from the seed.
fn phase(cfg: &ExperimentConfig) -> f64 {
    if cfg.datum.random_phase {
        ChaCha8Rng::seed_from_u64(cfg.seed).gen_range(0.0..2.0 * PI)
    } else {
        0.0
    }
}

/// Pointwise datum `A cos(k x₁ + φ) χ(x)` with `χ` a smooth bump in `H`
/// across the annulus or in the distance to the cell centre.
fn pointwise_datum(
    cfg: &ExperimentConfig,
    field: &HamiltonianField,
    band: Option<LevelAnnulus>,
) -> Result<impl Fn([f64; 2]) -> f64 + Sync + Send> {
    let d = &cfg.datum;
    let (amp, k, phi) = (d.amplitude, d.k as f64, phase(cfg));
    let cell = cfg.region.cell;
    let center = match band {
        Some(_) => None,
        None => Some(
            cell_of(field, cell)?
                .center
                .ok_or_else(|| MixlabError::Config("elliptic region needs a cell with a known centre".into()))?,
        ),
    };
    let radius = cfg.region.radius;
    let f = field.clone();
    Ok(move |x: [f64; 2]| {
        if f.cell_index(x) != cell {
            return 0.0;
        }
        let profile = match (band, center) {
            (Some(a), _) => bump(f.value(x), a.h_lo, a.h_hi),
            (None, Some(c)) => {
                let dx = crate::field::wrap_pi(x[0] - c[0]);
                let dy = crate::field::wrap_pi(x[1] - c[1]);
                bump(dx.hypot(dy), -radius, radius)
            }
            (None, None) => 0.0,
        };
        if profile == 0.0 {
            0.0
        } else {
            amp * (k * x[0] + phi).cos() * profile
        }
    })
}

/// Action range of the cellular chart carrying an annulus `[h_lo, h_hi]`.
fn action_range(band: &LevelAnnulus) -> Result<(f64, f64)> {
    if !(band.h_lo > 0.0 && band.h_hi < 1.0) {
        return Err(MixlabError::Config("cellular annulus must satisfy 0 < h_lo < h_hi < 1".into()));
    }
    let margin = 0.02;
    Ok(((band.h_lo.asin() - margin).max(0.01), (band.h_hi.asin() + margin).min(FRAC_PI_2 - 0.01)))
}

/// Angle-mode state `A e^{ik(θ+φ)} bump(I; I_lo, I_hi)` on the chart levels.
fn angle_mode_state(cfg: &ExperimentConfig, chart: &ActionAngleChart, band: &LevelAnnulus) -> Result<AngleModeField> {
    let (a, b) = (band.h_lo.asin(), band.h_hi.asin());
    let rot = Complex64::from_polar(0.5 * cfg.datum.amplitude, cfg.datum.k as f64 * phase(cfg));
    let profile: Vec<Complex64> = chart.levels.iter().map(|&s| rot * bump(s, a, b)).collect();
    AngleModeField::from_profiles(&CellularWeights, chart.levels.clone(), &[(cfg.datum.k, profile)], true)
}

/// Datum on the `N × N` grid, optionally made streamline-mean-free.
fn grid_datum(cfg: &ExperimentConfig, field: &HamiltonianField, band: Option<LevelAnnulus>) -> Result<ScalarField> {
    let n = cfg.grid.n;
    let rho = match cfg.datum.kind.as_str() {
        "file" => {
            let path = cfg.datum.path.as_ref().expect("validated");
            let (rho, _) = ScalarField::read_snapshot(path)?;
            if rho.n() != n {
                return Err(MixlabError::Config(format!("snapshot has N = {}, grid.n = {n}", rho.n())));
            }
            rho
        }
        "angle-mode" => {
            require_cellular(field, "datum.kind = angle-mode")?;
            let band = band.ok_or_else(|| MixlabError::Config("angle-mode datum needs an annulus region".into()))?;
            let (i0, i1) = action_range(&band)?;
            let chart = build_cellular_chart(i0, i1, cfg.chart.n_theta, cfg.chart.n_levels)?;
            let state = angle_mode_state(cfg, &chart, &band)?;
            let map = ChartGridMap::new(&chart, n)?;
            oracle::pushforward(&state, &map, &CellularWeights, 0.0)?
        }
        _ => ScalarField::from_fn(n, pointwise_datum(cfg, field, band)?)?,
    };
    if cfg.datum.project {
        spectral::project_streamline_mean_free(&rho, field, cfg.tolerances.projection_bins)
    } else {
        Ok(rho)
    }
}

fn period_table(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let p = &cfg.period_table;
    let field = cfg.field()?;
    let levels =
        if p.spacing == "log" { logspace(p.h_min, p.h_max, p.n_levels) } else { linspace(p.h_min, p.h_max, p.n_levels) };
    let method = match p.method.as_str() {
        "agm" => PeriodMethod::Agm,
        "quadrature" => PeriodMethod::Quadrature,
        _ => PeriodMethod::ReturnMap,
    };
    let is_cellular = field.name() == HamiltonianField::cellular().name();
    let table = if is_cellular {
        PeriodTable::cellular(&levels, method)?
    } else {
        if method != PeriodMethod::ReturnMap {
            return Err(MixlabError::Config("only period_table.method = return-map applies to this field".into()));
        }
        return_map_table(&field, cfg, &levels)?
    };
    out.with_writer("period_table.csv", |w| table.write_csv(w))?;
    out.done()
}

/// `T` by return time on the configured cell, `T′` by a central difference.
fn return_map_table(field: &HamiltonianField, cfg: &ExperimentConfig, levels: &[f64]) -> Result<PeriodTable> {
    let cell = cell_of(field, cfg.region.cell)?;
    let opts = ReturnOptions { tol: cfg.tolerances.ode, ..Default::default() };
    let rows: Vec<Result<(f64, f64)>> = levels
        .par_iter()
        .map(|&h| {
            let t = return_period(field, &cell, h, &opts)?.period;
            let dh = 1e-4 * h.abs().max(1e-3);
            let tp = (return_period(field, &cell, h + dh, &opts)?.period
                - return_period(field, &cell, h - dh, &opts)?.period)
                / (2.0 * dh);
            Ok((t, tp))
        })
        .collect();
    let mut table = PeriodTable {
        levels: levels.to_vec(),
        period: Vec::new(),
        tprime: Vec::new(),
        method: vec![PeriodMethod::ReturnMap; levels.len()],
    };
    for r in rows {
        let (t, tp) = r?;
        table.period.push(t);
        table.tprime.push(tp);
    }
    Ok(table)
}

fn chart_validate(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let field = cfg.field()?;
    let band = annulus(cfg, &field)?
        .ok_or_else(|| MixlabError::Config("chart-validate needs an annulus region".into()))?;
    let cell = cell_of(&field, band.cell)?;
    let x0 = section_point(&field, &cell, band.h_lo)?;
    let c0 = if band.c0 > 0.0 { Some(band.c0) } else { None };
    let curve = build_transversal(&field, band.h_lo, band.h_hi, x0, cfg.chart.n_levels, c0)?;
    let chart = build_chart(&field, &curve, cfg.chart.n_theta)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (band.h_lo, band.h_hi);
    let span = hi - lo;
    let draws: Vec<(f64, f64, f64)> = (0..cfg.chart.checks)
        .map(|_| (rng.gen::<f64>(), rng.gen_range(lo + 0.05 * span..hi - 0.05 * span), rng.gen_range(0.0..10.0)))
        .collect();
    let opts = OdeOptions::with_tol(cfg.tolerances.ode.min(1e-12));
    let checks: Vec<Result<Vec<String>>> = draws
        .par_iter()
        .map(|&(th, lv, t)| {
            let x = chart.eval(th, lv)?;
            let y = flow_map(&field, x, t, opts)?;
            let (a, _) = angle_of_point_refined(&chart, x)?;
            let (b, _) = angle_of_point_refined(&chart, y)?;
            let period = chart.period_at(chart.level_of(x))?;
            let d = (b - a - t / period).rem_euclid(1.0);
            Ok(vec![fmt_f64(th), fmt_f64(lv), fmt_f64(t), fmt_f64(period), fmt_f64(d.min(1.0 - d))])
        })
        .collect();
    let checks = checks.into_iter().collect::<Result<Vec<_>>>()?;
    let worst = checks.iter().map(|r| r[4].parse::<f64>().unwrap_or(f64::NAN)).fold(0.0, f64::max);

    out.with_writer("chart.csv", |w| chart.write_csv(w))?;
    out.json("chart.json", &chart.header())?;
    out.csv("angle_checks.csv", &["theta", "level", "t", "period", "error"], &checks)?;
    out.json(
        "chart_validation.json",
        &json!({
            "jacobian_error": chart.jacobian_error(),
            "level_residual": chart.level_residual(),
            "area": chart.area(),
            "angle_error_max": worst,
            "annulus": band,
        }),
    )?;
    out.done()
}

fn mixing_decay(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let field = cfg.field()?;
    let band = annulus(cfg, &field)?;
    let times = cfg.sample_times();
    let (series, h1_initial, max_period) = match cfg.mixing.method.as_str() {
        "oracle" => {
            require_cellular(&field, "mixing.method = oracle")?;
            let band = band.ok_or_else(|| MixlabError::Config("the oracle route needs an annulus region".into()))?;
            let (i0, i1) = action_range(&band)?;
            let chart = build_cellular_chart(i0, i1, cfg.chart.n_theta, cfg.chart.n_levels)?;
            let state = match cfg.datum.kind.as_str() {
                "angle-mode" => angle_mode_state(cfg, &chart, &band)?,
                "annulus-bump" => AngleModeField::from_chart(&chart, pointwise_datum(cfg, &field, Some(band))?, 1, true)?,
                k => return Err(MixlabError::Config(format!("the oracle route cannot take datum.kind = {k}"))),
            };
            out.with_writer("angle_modes.csv", |w| state.write_csv(w))?;
            out.with_writer("angle_modes.json", |w| state.write_json(w))?;
            let map = ChartGridMap::new(&chart, cfg.grid.n)?;
            let rho0 = oracle::pushforward(&state, &map, &CellularWeights, 0.0)?;
            let h1 = diagnostics::sobolev_norm(&rho0, 1)?;
            let mut series = Vec::with_capacity(times.len());
            for &t in &times {
                let rho = oracle::pushforward(&state, &map, &CellularWeights, t)?;
                series.push((t, rho.l2_norm(), diagnostics::sobolev_norm(&rho.without_mean(), -1)?));
            }
            let tmax = chart.periods.iter().cloned().fold(0.0, f64::max);
            (series, h1, tmax)
        }
        _ => {
            let rho0 = grid_datum(cfg, &field, band)?;
            let rho0 = rho0.without_mean();
            let h1 = diagnostics::sobolev_norm(&rho0, 1)?;
            let sol = spectral::solve(&rho0, &field, 0.0, cfg.time.t_end, &times, false)?;
            let series = sol.samples.iter().map(|s| (s.t, s.l2, s.hminus1)).collect();
            let tmax = match band {
                Some(b) if field.name() == HamiltonianField::cellular().name() && b.h_lo > 0.0 => {
                    crate::period::period_agm(b.h_lo)?
                }
                _ => 0.0,
            };
            (series, h1, tmax)
        }
    };
    let fit_start = cfg.mixing.fit_start.unwrap_or_else(|| diagnostics::mixing_fit_start(max_period));
    let window: Vec<(f64, f64)> = series.iter().filter(|s| s.0 >= fit_start).map(|s| (s.0, s.2)).collect();
    let fit = fit_mixing_rate(&window, h1_initial).ok();
    let rows: Vec<Vec<String>> =
        series.iter().map(|&(t, l2, hm1)| vec![fmt_f64(t), fmt_f64(l2), fmt_f64(hm1), fmt_f64(hm1 / h1_initial)]).collect();
    out.csv("mixing.csv", &["t", "l2", "hminus1", "ratio"], &rows)?;
    out.json(
        "mixing_fit.json",
        &json!({
            "method": cfg.mixing.method,
            "h1_initial": h1_initial,
            "fit_start": fit_start,
            "max_period": max_period,
            "fit": fit,
        }),
    )?;
    out.done()
}

/// Samples `‖ρ^ν‖` at `t_end/samples` spacing until `stop_efolds` e-folds or `t_end`.
fn decay_run(field: &HamiltonianField, rho0: &ScalarField, nu: f64, cfg: &ExperimentConfig) -> Result<DecayRun> {
    let mut solver = Solver::new(field, rho0, nu)?.with_cfl(cfg.tolerances.cfl);
    let l0 = solver.l2_sq().sqrt();
    let dt = cfg.time.t_end / cfg.time.samples as f64;
    let stop = l0 * (-cfg.viscosity.stop_efolds).exp();
    let mut run = DecayRun { nu, t: vec![0.0], l2: vec![l0] };
    for i in 1..=cfg.time.samples {
        solver.advance(i as f64 * dt)?;
        let l = solver.l2_sq().sqrt();
        run.t.push(solver.time());
        run.l2.push(l);
        if l < stop {
            break;
        }
    }
    Ok(run)
}

fn dissipation_sweep(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let field = cfg.field()?;
    let band = annulus(cfg, &field)?;
    let rho0 = grid_datum(cfg, &field, band)?;
    let runs: Vec<Result<DecayRun>> = cfg.viscosity.nu_list.par_iter().map(|&nu| decay_run(&field, &rho0, nu, cfg)).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let report = fit_dissipation_rate(&runs)?;
    let mut decay_rows = Vec::new();
    for r in &runs {
        for (t, l) in r.t.iter().zip(&r.l2) {
            decay_rows.push(vec![fmt_f64(r.nu), fmt_f64(*t), fmt_f64(*l)]);
        }
    }
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![fmt_f64(r.nu), opt(r.lambda), opt(r.efold_time), r.flags.join(";")])
        .collect();
    out.csv("decay.csv", &["nu", "t", "l2"], &decay_rows)?;
    out.csv("dissipation.csv", &["nu", "lambda", "efold_time", "flags"], &rows)?;
    out.json("dissipation_report.json", &report)?;
    out.done()
}

fn protocol(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let field = cfg.field()?;
    let band = annulus(cfg, &field)?;
    let rho0 = grid_datum(cfg, &field, band)?;
    let v = &cfg.viscosity;
    let opts = ProtocolOptions {
        calibration_nu: v.calibration_nu,
        calibration_times: linspace(v.calibration_t / 20.0, v.calibration_t, 20),
    };
    let report = diagnostics::verify_thm_main_protocol(&field, &rho0, band.as_ref(), &v.nu_list, &opts)?;
    let rows: Vec<Vec<String>> = std::iter::once(&report.initial_row)
        .chain(&report.rows)
        .map(|r| {
            vec![
                fmt_f64(r.nu),
                fmt_f64(r.t),
                fmt_f64(r.l2_ratio),
                fmt_f64(r.lhs),
                fmt_f64(r.gap),
                fmt_f64(r.rhs),
                r.consistent.to_string(),
                r.half_retained.to_string(),
                r.flags.join(";"),
            ]
        })
        .collect();
    out.csv(
        "protocol.csv",
        &["nu", "t", "l2_ratio", "lhs", "gap", "rhs", "consistent", "half_retained", "flags"],
        &rows,
    )?;
    out.json("protocol.json", &report)?;
    out.done()
}

fn envelope_scan(cfg: &ExperimentConfig, mut out: Output) -> Result<Vec<String>> {
    let times: Vec<f64> = cfg.sample_times().into_iter().filter(|&t| t >= 1.0).collect();
    if times.len() < 2 {
        return Err(MixlabError::Config("envelope-scan needs at least two sample times ≥ 1".into()));
    }
    let opts = EnvelopeOptions { kappa: cfg.envelope.kappa, ..Default::default() };
    let regimes = [EnvelopeRegime::Interior, EnvelopeRegime::Elliptic, EnvelopeRegime::Global];
    let rows: Vec<Result<Vec<oracle::Envelope>>> = times
        .par_iter()
        .map(|&t| regimes.iter().map(|&r| oracle::mixing_envelope_with(t, cfg.envelope.eps, r, &opts)).collect())
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let csv: Vec<Vec<String>> = times
        .iter()
        .zip(&rows)
        .map(|(&t, e)| {
            vec![
                fmt_f64(t),
                fmt_f64(e[0].value),
                fmt_f64(e[1].value),
                fmt_f64(e[2].value),
                opt(e[1].argmin),
                opt(e[2].argmin),
            ]
        })
        .collect();
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let slope = |i: usize| {
        let ly: Vec<f64> = rows.iter().map(|e| e[i].value.ln()).collect();
        linear_fit(&lt, &ly).0
    };
    out.csv("envelope.csv", &["t", "interior", "elliptic", "global", "elliptic_argmin", "global_argmin"], &csv)?;
    out.json(
        "envelope_slopes.json",
        &json!({
            "eps": cfg.envelope.eps,
            "kappa": cfg.envelope.kappa,
            "window": [times[0], times[times.len() - 1]],
            "interior": slope(0),
            "elliptic": slope(1),
            "global": slope(2),
        }),
    )?;
    out.done()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(text).unwrap();
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn period_table_shape() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("experiment = \"period-table\"\n", dir.path());
        let m = run(&c, None, Some(1)).unwrap();
        assert_eq!(m.artifacts, vec!["period_table.csv"]);
        let text = fs::read_to_string(dir.path().join("period_table.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("h,T,Tprime,method"));
        assert_eq!(text.lines().count(), 51);
        let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["experiment"], "period-table");
        assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn envelope_scan_slopes() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(
            "experiment = \"envelope-scan\"\ntime.t_start = 10.0\ntime.t_end = 1e4\ntime.samples = 7\ntime.spacing = \"log\"\n",
            dir.path(),
        );
        run(&c, None, Some(1)).unwrap();
        let s: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("envelope_slopes.json")).unwrap()).unwrap();
        assert!((s["interior"].as_f64().unwrap() + 1.0).abs() < 1e-12);
        assert!(s["global"].as_f64().unwrap() < 0.0);
        let text = fs::read_to_string(dir.path().join("envelope.csv")).unwrap();
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn errors_are_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("experiment = \"nope\"\n", dir.path());
        let e = run(&c, None, Some(1)).unwrap_err();
        assert_eq!(error_json(&e)["error"]["kind"], "unknown_experiment");
        let c = config("experiment = \"mixing-decay\"\nfield = \"shear-cos\"\n", dir.path());
        let e = run(&c, None, Some(1)).unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn worker_resolution() {
        let mut c = ExperimentConfig::from_toml("experiment = \"period-table\"\nworkers = 3\n").unwrap();
        assert_eq!(resolve_workers(&c, Some(2)), 2);
        assert_eq!(resolve_workers(&c, None), 3);
        c.workers = None;
        assert!(resolve_workers(&c, None) >= 1);
    }
}
