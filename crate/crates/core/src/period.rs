//! The period function `T(h)` of the cellular flow and the elliptic-point
//! exponent `β` of general fields.
//!
//! `T(h)` is available by three independent routes: the complete elliptic
//! integral through the arithmetic–geometric mean (production path), the
//! singular integral with its endpoint singularity removed by `x = sin u`
//! (validation path), and the Poincaré return time of the orbit
//! ([`crate::lagrangian::return_period`]).

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MixlabError, Result};
use crate::field::{Cell, HamiltonianField, Vec2};
use crate::io::fmt_f64;
use crate::lagrangian::{return_period_from, PeriodMethod, ReturnOptions};
use crate::quad;

fn check_open_unit(h: f64) -> Result<()> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        Err(MixlabError::LevelOutOfRange { level: h, range: "(0, 1)".into() })
    }
}

/// Arithmetic–geometric mean of `a, b > 0`, and the number of iterations used.
pub fn agm(mut a: f64, mut b: f64) -> (f64, usize) {
    let mut n = 0;
    while (a - b).abs() > 1e-15 * a && n < 64 {
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
        n += 1;
    }
    (0.5 * (a + b), n)
}

/// `T(h) = 2π / AGM(1, h) = 4K(√(1−h²))`.
pub fn period_agm(h: f64) -> Result<f64> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(MixlabError::LevelOutOfRange { level: h, range: "(0, 1]".into() });
    }
    Ok(2.0 * PI / agm(1.0, h).0)
}

/// `T(h) = 4∫₀¹ dx / (√(1−x²) √(1−(1−h²)x²))`, evaluated after `x = sin u`
/// as `4∫₀^{π/2} du / √(cos²u + h² sin²u)`.
pub fn period_quadrature(h: f64) -> Result<f64> {
    check_open_unit(h)?;
    let h2 = h * h;
    let v = quad::integrate(
        |u: f64| {
            let (s, c) = u.sin_cos();
            1.0 / (c * c + h2 * s * s).sqrt()
        },
        0.0,
        FRAC_PI_2,
        1e-13,
        0.0,
    )?;
    Ok(4.0 * v)
}

/// `T′(h) = −4∫₀¹ h x² / (√(1−x²) (1−(1−h²)x²)^{3/2}) dx`, after `x = sin u`.
pub fn period_derivative(h: f64) -> Result<f64> {
    check_open_unit(h)?;
    let h2 = h * h;
    let v = quad::integrate(
        |u: f64| {
            let (s, c) = u.sin_cos();
            let q = c * c + h2 * s * s;
            h * s * s / (q * q.sqrt())
        },
        0.0,
        FRAC_PI_2,
        1e-13,
        0.0,
    )?;
    Ok(-4.0 * v)
}

/// Sampled `T` and `T′` on a level grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodTable {
    pub levels: Vec<f64>,
    pub period: Vec<f64>,
    pub tprime: Vec<f64>,
    pub method: Vec<PeriodMethod>,
}

impl PeriodTable {
    /// Cellular table; `T` from the chosen route, `T′` always from the
    /// derivative integral.
    pub fn cellular(levels: &[f64], method: PeriodMethod) -> Result<Self> {
        let rows: Vec<Result<(f64, f64)>> = levels
            .par_iter()
            .map(|&h| {
                let t = match method {
                    PeriodMethod::Agm => period_agm(h)?,
                    PeriodMethod::Quadrature => period_quadrature(h)?,
                    PeriodMethod::ReturnMap => {
                        let f = HamiltonianField::cellular();
                        let cell = f.cells()[0].clone();
                        crate::lagrangian::return_period(&f, &cell, h, &ReturnOptions::default())?.period
                    }
                };
                Ok((t, period_derivative(h)?))
            })
            .collect();
        let mut table = PeriodTable {
            levels: levels.to_vec(),
            period: Vec::with_capacity(levels.len()),
            tprime: Vec::with_capacity(levels.len()),
            method: vec![method; levels.len()],
        };
        for r in rows {
            let (t, tp) = r?;
            table.period.push(t);
            table.tprime.push(tp);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// CSV with columns `h,T,Tprime,method`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "h,T,Tprime,method")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(self.levels[i]),
                fmt_f64(self.period[i]),
                fmt_f64(self.tprime[i]),
                self.method[i].as_str()
            )?;
        }
        Ok(())
    }

    /// Smallest `C` with `T ≤ C(1 + ln(1/h))`, `h|T′| ≤ C` and `−hT′ ≥ 1/C`
    /// across the table.
    pub fn estimate_constant(&self) -> f64 {
        let mut c: f64 = 0.0;
        for i in 0..self.len() {
            let h = self.levels[i];
            c = c.max(self.period[i] / (1.0 + (1.0 / h).ln()));
            c = c.max(h * self.tprime[i].abs());
            c = c.max(1.0 / (-h * self.tprime[i]));
        }
        c
    }
}

/// `n` log-spaced points in `[a, b]`.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Least-squares line `y = slope·x + intercept`; returns
/// `(slope, intercept, rms residual)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaEstimate {
    /// Fitted exponent in `|T′(r)| ∼ r^β`; `None` when the centre is isochronous.
    pub beta: Option<f64>,
    pub residual: f64,
    pub radii: Vec<f64>,
    pub period: Vec<f64>,
    pub tprime: Vec<f64>,
    pub degenerate: bool,
}

/// Default fit window for [`beta_exponent`].
pub fn default_beta_radii() -> Vec<f64> {
    logspace(0.05, 0.3, 8)
}

/// Measures `T(r)` of the orbits through `center + r e₁` by return time,
/// differentiates centrally in `r`, and fits `log|T′|` against `log r`.
pub fn beta_exponent(field: &HamiltonianField, center: Vec2, radii: &[f64]) -> Result<BetaEstimate> {
    if radii.len() < 3 {
        return Err(invalid("need at least three radii"));
    }
    let cell = Cell { id: 0, section: [center, [center[0] + 1.0, center[1]]], center: Some(center) };
    let opts = ReturnOptions { tol: 1e-13, separatrix_guard: false, h_max: 0.1, ..Default::default() };
    let period_at = |r: f64| -> Result<f64> {
        Ok(return_period_from(field, &cell, [center[0] + r, center[1]], &opts)?.period)
    };
    let rel_step = 1e-3;
    let samples: Vec<Result<(f64, f64)>> = radii
        .par_iter()
        .map(|&r| {
            let t = period_at(r)?;
            let dr = rel_step * r;
            let tp = (period_at(r + dr)? - period_at(r - dr)?) / (2.0 * dr);
            Ok((t, tp))
        })
        .collect();
    let mut period = Vec::new();
    let mut tprime = Vec::new();
    for s in samples {
        let (t, tp) = s?;
        period.push(t);
        tprime.push(tp);
    }
    // isochronous centre: |T′| r / T at the level of the finite-difference noise
    let scale = radii
        .iter()
        .zip(&period)
        .zip(&tprime)
        .map(|((r, t), tp)| (tp * r / t).abs())
        .fold(0.0, f64::max);
    if scale < 1e-6 {
        return Ok(BetaEstimate { beta: None, residual: 0.0, radii: radii.to_vec(), period, tprime, degenerate: true });
    }
    let mags: Vec<f64> = tprime.iter().map(|t| t.abs()).collect();
    let increasing = mags.windows(2).all(|w| w[1] > w[0]);
    let decreasing = mags.windows(2).all(|w| w[1] < w[0]);
    if !(increasing || decreasing) || tprime.iter().any(|t| t.signum() != tprime[0].signum()) {
        return Err(MixlabError::Fit(format!("T′ samples are not monotone in r: {tprime:?}")));
    }
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = mags.iter().map(|t| t.ln()).collect();
    let (beta, _, residual) = linear_fit(&lx, &ly);
    Ok(BetaEstimate { beta: Some(beta), residual, radii: radii.to_vec(), period, tprime, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn agm_degenerate_and_limits() {
        assert_eq!(period_agm(1.0).unwrap(), 2.0 * PI);
        assert!(period_agm(0.0).is_err());
        assert!(period_agm(-1.0).is_err());
        let h = 1e-6;
        assert!(rel(period_agm(h).unwrap(), 4.0 * (4.0 / h).ln()) < 1e-4);
        for h in [1e-8, 1e-4, 0.3, 0.999] {
            assert!(agm(1.0, h).1 <= 8, "h = {h}");
        }
    }

    #[test]
    fn quadrature_matches_agm() {
        let (q, a) = (period_quadrature(0.5).unwrap(), period_agm(0.5).unwrap());
        assert!(rel(q, a) < 1e-10);
        for h in logspace(1e-4, 1.0 - 1e-6, 50) {
            let (q, a) = (period_quadrature(h).unwrap(), period_agm(h).unwrap());
            assert!(rel(q, a) <= 1e-9, "h = {h}: {q} vs {a}");
        }
        assert!(period_quadrature(0.0).is_err());
        assert!(period_quadrature(1.0).is_err());
    }

    #[test]
    fn quadrature_asymptotics() {
        let t = period_quadrature(1.0 - 1e-12).unwrap();
        assert!((t - 2.0 * PI).abs() < 1e-3);
        let h = 1e-4;
        assert!(rel(period_quadrature(h).unwrap(), 4.0 * (4.0 / h).ln()) < 5e-3);
    }

    #[test]
    fn derivative_limits_and_finite_difference_oracle() {
        let d = period_derivative(1.0 - 1e-9).unwrap();
        assert!((d + PI).abs() < 1e-6, "{d}");
        let h = 1e-3;
        assert!(rel(period_derivative(h).unwrap(), -4.0 / h) < 0.01);
        let step = 1e-6;
        let fd = (period_agm(0.5 + step).unwrap() - period_agm(0.5 - step).unwrap()) / (2.0 * step);
        assert!(rel(period_derivative(0.5).unwrap(), fd) < 1e-5);
        assert!(period_derivative(1.0).is_err());
    }

    #[test]
    fn table_bounds_and_monotonicity() {
        let levels = logspace(1e-4, 1.0 - 1e-6, 60);
        let table = PeriodTable::cellular(&levels, PeriodMethod::Agm).unwrap();
        assert!(table.period.windows(2).all(|w| w[1] < w[0]));
        assert!(table.tprime.iter().all(|&t| t < 0.0));
        let c = table.estimate_constant();
        assert!(c <= 40.0, "C = {c}");
        for (h, t) in table.levels.iter().zip(&table.period) {
            assert!(*t <= 10.0 + 10.0 * (1.0 / h).ln());
        }
        for (h, tp) in table.levels.iter().zip(&table.tprime) {
            assert!(h * tp.abs() <= 12.0);
        }
    }

    #[test]
    fn second_differences_bound_h2_tpp() {
        // h²|T″| from second differences of the AGM period on a log grid
        for h in logspace(1e-3, 0.9, 30) {
            let e = 1e-3 * h;
            let tpp = (period_agm(h + e).unwrap() - 2.0 * period_agm(h).unwrap() + period_agm(h - e).unwrap()) / (e * e);
            assert!(h * h * tpp.abs() <= 40.0, "h = {h}: {tpp}");
        }
    }

    #[test]
    fn table_csv_shape() {
        let table = PeriodTable::cellular(&linspace(0.1, 0.9, 5), PeriodMethod::Agm).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "h,T,Tprime,method");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].ends_with(",agm"));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let (s, i, r) = linear_fit(&x, &y);
        assert!((s - 2.5).abs() < 1e-14 && (i + 1.0).abs() < 1e-14 && r < 1e-14);
    }

    #[test]
    fn beta_for_cellular_and_radial_models() {
        let f = HamiltonianField::cellular();
        let b = beta_exponent(&f, [FRAC_PI_2, FRAC_PI_2], &default_beta_radii()).unwrap();
        let beta = b.beta.unwrap();
        assert!((beta - 1.0).abs() <= 0.1, "cellular β = {beta}");

        let quartic = HamiltonianField::from_spec_with_domain(
            "expr:(x1^2+x2^2)/2 + (x1^2+x2^2)^2/4",
            Some(crate::field::Domain::Plane),
        )
        .unwrap();
        let b = beta_exponent(&quartic, [0.0, 0.0], &default_beta_radii()).unwrap();
        // closed form T(r) = 2π/(1+r²)
        for (r, t) in b.radii.iter().zip(&b.period) {
            assert!(rel(*t, 2.0 * PI / (1.0 + r * r)) < 1e-9);
        }
        assert!((b.beta.unwrap() - 1.0).abs() <= 0.1);

        let harmonic =
            HamiltonianField::from_spec_with_domain("expr:(x1^2+x2^2)/2", Some(crate::field::Domain::Plane)).unwrap();
        let b = beta_exponent(&harmonic, [0.0, 0.0], &default_beta_radii()).unwrap();
        assert!(b.degenerate && b.beta.is_none());
    }
}
