//! Sobolev norms on the torus, decay-rate fits, and the vanishing-viscosity
//! protocol behind the `ν^{1/3}` upper bound on the dissipation rate.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MixlabError, Result};
use crate::fft::{signed, Fft2};
use crate::field::{HamiltonianField, LevelAnnulus};
use crate::period::{linear_fit, linspace};
use crate::spectral::{viscosity_gap, NormSample, ScalarField};

/// Homogeneous norm `(4π² Σ_k |k|^{2·order} |ρ̂_k|²)^{1/2}` for order −1, 0, 1.
pub fn sobolev_norm(rho: &ScalarField, order: i32) -> Result<f64> {
    match order {
        0 => Ok(rho.l2_norm()),
        1 => Ok(rho.spectral_sum(|k2| k2).sqrt()),
        -1 => {
            let l2 = rho.l2_norm();
            if rho.mean().abs() * 2.0 * std::f64::consts::PI > 1e-12 * l2.max(f64::MIN_POSITIVE) {
                return Err(invalid(format!("H⁻¹ norm needs zero mean (mean = {:e})", rho.mean())));
            }
            Ok(rho.spectral_sum(|k2| if k2 > 0.0 { 1.0 / k2 } else { 0.0 }).sqrt())
        }
        _ => Err(invalid(format!("unsupported Sobolev order {order}"))),
    }
}

/// `max |∇ρ|` over the grid, from spectral derivatives.
pub fn grad_sup(rho: &ScalarField) -> f64 {
    let n = rho.n();
    let nh = rho.half();
    let mut fft = Fft2::new(n);
    let mut d1 = vec![Complex64::default(); n * nh];
    let mut d2 = vec![Complex64::default(); n * nh];
    for j in 0..n {
        let k2 = signed(j, n) as f64;
        for m in 0..nh {
            let c = rho.coeffs[j * nh + m];
            // the Nyquist derivative is not real-representable
            let (k1, k2) = (if m == n / 2 { 0.0 } else { m as f64 }, if j == n / 2 { 0.0 } else { k2 });
            d1[j * nh + m] = c * Complex64::new(0.0, k1);
            d2[j * nh + m] = c * Complex64::new(0.0, k2);
        }
    }
    let mut g1 = vec![0.0; n * n];
    let mut g2 = vec![0.0; n * n];
    fft.inverse(&d1, &mut g1);
    fft.inverse(&d2, &mut g2);
    g1.iter().zip(&g2).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub exponent: f64,
    pub prefactor: f64,
    pub window: (f64, f64),
    /// Root-mean-square error of the log-log fit.
    pub residual: f64,
    pub n_points: usize,
}

fn power_fit(x: &[f64], y: &[f64]) -> Result<RateEstimate> {
    if x.len() < 4 {
        return Err(MixlabError::Fit(format!("need at least 4 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(MixlabError::Fit("power-law fit needs positive finite data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (slope, icept, rms) = linear_fit(&lx, &ly);
    if !rms.is_finite() || !slope.is_finite() {
        return Err(MixlabError::Fit("degenerate abscissae".into()));
    }
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(RateEstimate { exponent: slope, prefactor: icept.exp(), window: (lo, hi), residual: rms, n_points: x.len() })
}

/// Fits `‖ρ(t)‖_{H⁻¹}/‖ρ₀‖_{H¹} ≈ A t^p` on the samples with `t ≥ 1`.
pub fn fit_mixing_rate(series: &[(f64, f64)], h1_initial: f64) -> Result<RateEstimate> {
    if !(h1_initial > 0.0) {
        return Err(MixlabError::Fit("initial H¹ norm must be positive".into()));
    }
    if series.iter().any(|&(_, v)| !(v > 0.0)) {
        return Err(MixlabError::Fit("non-positive H⁻¹ norm in series".into()));
    }
    let (t, v): (Vec<f64>, Vec<f64>) = series.iter().filter(|(t, _)| *t >= 1.0).map(|&(t, v)| (t, v / h1_initial)).unzip();
    power_fit(&t, &v)
}

/// Start of the mixing fit window: five of the longest periods on the data.
pub fn mixing_fit_start(max_period: f64) -> f64 {
    5.0 * max_period
}

/// L² history of one viscous run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayRun {
    pub nu: f64,
    pub t: Vec<f64>,
    pub l2: Vec<f64>,
}

impl DecayRun {
    pub fn from_samples(nu: f64, samples: &[NormSample]) -> Self {
        DecayRun { nu, t: samples.iter().map(|s| s.t).collect(), l2: samples.iter().map(|s| s.l2).collect() }
    }
}

/// First time at which `l2` falls to `l2[0]·factor`, log-linear between samples.
pub fn decay_time(t: &[f64], l2: &[f64], factor: f64) -> Option<f64> {
    let target = l2.first()? * factor;
    for i in 1..t.len().min(l2.len()) {
        if l2[i] <= target {
            let (a, b) = (l2[i - 1].ln(), l2[i].ln());
            let w = if a == b { 1.0 } else { (a - target.ln()) / (a - b) };
            return Some(t[i - 1] + w * (t[i] - t[i - 1]));
        }
    }
    None
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DissipationRow {
    pub nu: f64,
    pub lambda: Option<f64>,
    pub efold_time: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DissipationReport {
    pub rows: Vec<DissipationRow>,
    pub scaling: Option<RateEstimate>,
    /// Viscosities left out of the scaling fit.
    pub excluded: Vec<f64>,
    /// Adjacent pairs `(ν_i, ν_{i+1})` with `λ` decreasing in `ν`.
    pub monotonicity_violations: Vec<(f64, f64)>,
}

/// `λ(ν) = 1/t_e` with `t_e` the e-folding time of each run, then a
/// power-law fit of `λ` against `ν` over the runs that reached it.
pub fn fit_dissipation_rate(runs: &[DecayRun]) -> Result<DissipationReport> {
    let mut sorted: Vec<&DecayRun> = runs.iter().collect();
    sorted.sort_by(|a, b| a.nu.total_cmp(&b.nu));
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for run in sorted {
        if !(run.nu > 0.0) || run.t.len() != run.l2.len() || run.t.len() < 2 || !(run.l2[0] > 0.0) {
            return Err(invalid(format!("malformed run at ν = {}", run.nu)));
        }
        let mut flags = Vec::new();
        let te = decay_time(&run.t, &run.l2, (-1.0f64).exp()).map(|t| t - run.t[0]);
        if te.is_none() {
            flags.push("no_efold".to_string());
            excluded.push(run.nu);
        } else if decay_time(&run.t, &run.l2, (-2.0f64).exp()).is_none() {
            flags.push("short_span".to_string());
        }
        rows.push(DissipationRow { nu: run.nu, lambda: te.map(|t| 1.0 / t), efold_time: te, flags });
    }
    let mut monotonicity_violations = Vec::new();
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| r.lambda.map(|l| (r.nu, l))).unzip();
    for i in 1..x.len() {
        if y[i] < y[i - 1] {
            monotonicity_violations.push((x[i - 1], x[i]));
        }
    }
    for r in rows.iter_mut() {
        if monotonicity_violations.iter().any(|&(a, b)| a == r.nu || b == r.nu) {
            r.flags.push("non_monotone".to_string());
        }
    }
    let scaling = if x.len() >= 4 { Some(power_fit(&x, &y)?) } else { None };
    Ok(DissipationReport { rows, scaling, excluded, monotonicity_violations })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolOptions {
    /// Viscosity of the short calibration run.
    pub calibration_nu: f64,
    pub calibration_times: Vec<f64>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions { calibration_nu: 1e-3, calibration_times: linspace(0.5, 10.0, 20) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub nu: f64,
    pub t: f64,
    /// `‖ρ^ν(t)‖/‖ρ₀‖`.
    pub l2_ratio: f64,
    /// `‖ρ₀‖ − ‖ρ^ν(t)‖`.
    pub lhs: f64,
    /// `‖ρ^ν(t) − ρ(t)‖`.
    pub gap: f64,
    /// `C √(ν(1+t)³) ‖∇ρ₀‖_∞`.
    pub rhs: f64,
    pub consistent: bool,
    pub half_retained: bool,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub l2_initial: f64,
    pub grad_sup_initial: f64,
    /// Calibrated constant of the vanishing-viscosity estimate.
    pub constant: f64,
    pub eps0: f64,
    pub nu0: f64,
    pub initial_row: ProtocolRow,
    pub rows: Vec<ProtocolRow>,
    pub outside_fraction: f64,
}

/// Evaluates both sides of
/// `‖ρ₀‖ − ‖ρ^ν(t)‖ ≤ ‖ρ(t) − ρ^ν(t)‖ ≤ C √(ν(1+t)³) ‖∇ρ₀‖_∞`
/// at `t = ε₀ν^{−1/3}`, `ε₀ = ½ [‖ρ₀‖/(C‖∇ρ₀‖_∞)]^{2/3}`, with `C` the
/// largest ratio seen in a short calibration run.
pub fn verify_thm_main_protocol(
    field: &HamiltonianField,
    rho0: &ScalarField,
    annulus: Option<&LevelAnnulus>,
    nu_list: &[f64],
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    if nu_list.iter().any(|&nu| !(nu > 0.0)) || !(opts.calibration_nu > 0.0) {
        return Err(invalid("viscosities must be positive"));
    }
    let l2_initial = rho0.l2_norm();
    let grad = grad_sup(rho0);
    if !(l2_initial > 0.0 && grad > 0.0) {
        return Err(invalid("protocol needs a non-constant datum"));
    }
    let cal = viscosity_gap(rho0, field, opts.calibration_nu, &opts.calibration_times, annulus)?;
    let constant = cal
        .t
        .iter()
        .zip(&cal.gap)
        .map(|(&t, &g)| g.sqrt() / ((opts.calibration_nu * (1.0 + t).powi(3)).sqrt() * grad))
        .fold(0.0, f64::max);
    if !(constant > 0.0) {
        return Err(MixlabError::Fit("calibration produced no gap".into()));
    }
    let eps0 = 0.5 * (l2_initial / (constant * grad)).powf(2.0 / 3.0);
    let nu0 = eps0.powi(3);
    let row_for = |nu: f64, t: f64, l2: f64, gap: f64| -> ProtocolRow {
        let lhs = l2_initial - l2;
        let rhs = constant * (nu * (1.0 + t).powi(3)).sqrt() * grad;
        let tol = 1e-9 * l2_initial;
        let consistent = lhs <= gap + tol && gap <= rhs + tol;
        let mut flags = Vec::new();
        if t > 0.0 && (t < 1.0 || nu >= nu0) {
            flags.push("preasymptotic".to_string());
        }
        if !consistent {
            flags.push("inconsistent".to_string());
        }
        let half_retained = l2 >= 0.5 * l2_initial;
        if !half_retained {
            flags.push("more_than_half_decayed".to_string());
        }
        ProtocolRow { nu, t, l2_ratio: l2 / l2_initial, lhs, gap, rhs, consistent, half_retained, flags }
    };
    let rows = nu_list
        .par_iter()
        .map(|&nu| -> Result<ProtocolRow> {
            let t = eps0 * nu.powf(-1.0 / 3.0);
            let g = viscosity_gap(rho0, field, nu, &[t], None)?;
            Ok(row_for(nu, t, g.l2_viscous[0], g.gap[0].sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport {
        l2_initial,
        grad_sup_initial: grad,
        constant,
        eps0,
        nu0,
        initial_row: row_for(0.0, 0.0, l2_initial, 0.0),
        rows,
        outside_fraction: cal.outside_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Domain, FnField};
    use crate::spectral::solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn single_mode_norms() {
        let s = ScalarField::from_fn(32, |x| x[0].sin()).unwrap();
        for order in [-1, 0, 1] {
            let v = sobolev_norm(&s, order).unwrap();
            assert!((v * v - 2.0 * PI * PI).abs() < 1e-12, "order {order}: {v}");
        }
        let s4 = ScalarField::from_fn(32, |x| (4.0 * x[0]).sin()).unwrap();
        let (m, l) = (sobolev_norm(&s4, -1).unwrap(), sobolev_norm(&s4, 0).unwrap());
        assert!((m - l / 4.0).abs() < 1e-14 * l);
        let shifted = ScalarField::from_fn(32, |x| x[0].sin() + 0.1).unwrap();
        assert!(sobolev_norm(&shifted, -1).is_err());
        assert!(sobolev_norm(&s, 2).is_err());
    }

    #[test]
    fn interpolation_inequality_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let modes: Vec<(f64, f64, f64, f64)> =
                (0..6).map(|_| (rng.gen_range(-5..=5) as f64, rng.gen_range(-5..=5) as f64, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.3))).collect();
            let mut s = ScalarField::from_fn(16, |x| modes.iter().map(|&(a, b, c, p)| c * (a * x[0] + b * x[1] + p).cos()).sum()).unwrap();
            s.coeffs[0] = Complex64::default();
            let l2 = sobolev_norm(&s, 0).unwrap();
            let bound = sobolev_norm(&s, -1).unwrap() * sobolev_norm(&s, 1).unwrap();
            assert!(l2 * l2 <= bound * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn gradient_sup_of_a_single_mode() {
        let s = ScalarField::from_fn(32, |x| (2.0 * x[0] + x[1]).sin()).unwrap();
        assert!((grad_sup(&s) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_power_laws_and_exponentials_are_recovered() {
        let series: Vec<(f64, f64)> = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0].iter().map(|&t| (t, 5.0 / t)).collect();
        let r = fit_mixing_rate(&series, 1.0).unwrap();
        assert!((r.exponent + 1.0).abs() < 1e-6 && r.residual < 1e-8);
        assert!((r.prefactor - 5.0).abs() < 1e-9);
        assert_eq!((r.window, r.n_points), ((1.0, 100.0), 6));
        assert!(fit_mixing_rate(&series[..3], 1.0).is_err());
        let mut bad = series.clone();
        bad[2].1 = 0.0;
        assert!(fit_mixing_rate(&bad, 1.0).is_err());
        // samples before t = 1 are ignored
        let mut early = series.clone();
        early.insert(0, (0.5, 1e9));
        assert_eq!(fit_mixing_rate(&early, 1.0).unwrap().n_points, 6);

        let runs: Vec<DecayRun> = [1e-4f64, 1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&nu| {
                let lam = 2.0 * nu.powf(0.5);
                let t: Vec<f64> = linspace(0.0, 3.0 / lam, 61);
                DecayRun { nu, l2: t.iter().map(|&t| 3.0 * (-lam * t).exp()).collect(), t }
            })
            .collect();
        let rep = fit_dissipation_rate(&runs).unwrap();
        let sc = rep.scaling.unwrap();
        assert!((sc.exponent - 0.5).abs() < 1e-9 && sc.residual < 1e-8, "{sc:?}");
        assert!((sc.prefactor - 2.0).abs() < 1e-8);
    }

    #[test]
    fn efold_rate_ignores_the_prefactor() {
        let t = linspace(0.0, 10.0, 101);
        let l2: Vec<f64> = t.iter().map(|&t| 1.0 / (1.0 + t * t) + 0.3 * (-t).exp()).collect();
        let a = fit_dissipation_rate(&[DecayRun { nu: 1e-3, t: t.clone(), l2: l2.clone() }]).unwrap();
        let scaled: Vec<f64> = l2.iter().map(|v| 7.5 * v).collect();
        let b = fit_dissipation_rate(&[DecayRun { nu: 1e-3, t, l2: scaled }]).unwrap();
        let (la, lb) = (a.rows[0].lambda.unwrap(), b.rows[0].lambda.unwrap());
        assert!((la - lb).abs() <= 4.0 * f64::EPSILON * la);
        assert!(a.scaling.is_none());
    }

    #[test]
    fn stalled_runs_are_flagged_and_excluded() {
        let t = linspace(0.0, 1.0, 11);
        let runs: Vec<DecayRun> = [1e-3, 2e-3, 3e-3, 4e-3, 5e-3]
            .iter()
            .map(|&nu| {
                let rate = if nu == 3e-3 { 0.1 } else { 1000.0 * nu };
                DecayRun { nu, t: t.clone(), l2: t.iter().map(|&s| (-rate * s).exp()).collect() }
            })
            .collect();
        let rep = fit_dissipation_rate(&runs).unwrap();
        assert_eq!(rep.excluded, vec![3e-3]);
        assert!(rep.rows[2].flags.contains(&"no_efold".to_string()));
        assert!(rep.rows[0].flags.contains(&"short_span".to_string()));
        assert_eq!(rep.scaling.unwrap().n_points, 4);
    }

    #[test]
    fn pure_heat_gives_lambda_equal_to_nu() {
        let zero = HamiltonianField::new(FnField::new("zero", Domain::Torus, |_| 0.0));
        let rho = ScalarField::from_fn(16, |x| x[0].cos()).unwrap();
        let runs: Vec<DecayRun> = [1e-3, 1e-2, 1e-1, 1.0]
            .iter()
            .map(|&nu| {
                let times = linspace(0.0, 2.5 / nu, 101);
                let sol = solve(&rho, &zero, nu, 2.5 / nu, &times, false).unwrap();
                DecayRun::from_samples(nu, &sol.samples)
            })
            .collect();
        let rep = fit_dissipation_rate(&runs).unwrap();
        for r in &rep.rows {
            assert!((r.lambda.unwrap() - r.nu).abs() < 1e-10 * r.nu, "{r:?}");
        }
        assert!((rep.scaling.unwrap().exponent - 1.0).abs() < 1e-9);
    }

    #[test]
    fn protocol_rows_are_consistent_for_an_annulus_bump() {
        let f = HamiltonianField::cellular();
        let bump = |h: f64| if h > 0.3 && h < 0.7 { (1.0 - 1.0 / (1.0 - ((h - 0.5) / 0.2).powi(2))).exp() } else { 0.0 };
        let rho = ScalarField::from_fn(64, |x| {
            if x[0] < PI && x[1] < PI {
                x[0].cos() * bump(x[0].sin() * x[1].sin())
            } else {
                0.0
            }
        })
        .unwrap();
        let opts = ProtocolOptions { calibration_nu: 1e-3, calibration_times: linspace(0.5, 4.0, 8) };
        let rep = verify_thm_main_protocol(&f, &rho, None, &[1e-3, 1e-2], &opts).unwrap();
        assert!(rep.initial_row.consistent && rep.initial_row.gap == 0.0 && rep.initial_row.lhs == 0.0);
        assert!(rep.eps0 > 0.0 && rep.constant > 0.0);
        for r in &rep.rows {
            assert!(r.lhs <= r.gap + 1e-9, "{r:?}");
            assert!((r.t - rep.eps0 * r.nu.powf(-1.0 / 3.0)).abs() < 1e-12 * r.t);
        }
        assert!(rep.rows[0].half_retained);
    }
}
