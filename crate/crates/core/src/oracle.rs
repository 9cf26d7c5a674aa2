//! Exact transport in action-angle variables.
//!
//! A state is a Fourier series in a `2π`-periodic angle `θ` with
//! coefficients sampled on a grid of the level coordinate `s`:
//! `f(θ, s) = Σ_k f_k(s) e^{ikθ}`. Transport by the flow rotates each
//! mode with the angular frequency `2π/T(s)` of its orbit.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::actionangle::{angle_of_point, ActionAngleChart, ChartVariant};
use crate::error::{invalid, MixlabError, Result};
use crate::io::fmt_f64;
use crate::period::{period_agm, period_derivative};
use crate::quad;
use crate::spectral::{grid_point, ScalarField};

/// Period, its derivative and the area weight as functions of the level
/// coordinate `s` on an open interval.
pub trait AngleWeights: Sync {
    fn period(&self, s: f64) -> Result<f64>;
    fn period_derivative(&self, s: f64) -> Result<f64>;
    /// Area density `g(s)` with `dx = g(s) ds dθ/2π`.
    fn weight(&self, s: f64) -> Result<f64>;
    fn domain(&self) -> (f64, f64);
}

/// Cellular flow in the coordinate `I = arcsin H`:
/// `T̃(I) = T(sin I)`, `g(I) = T̃(I) cos I` on `(0, π/2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellularWeights;

impl AngleWeights for CellularWeights {
    fn period(&self, s: f64) -> Result<f64> {
        period_agm(s.sin())
    }

    fn period_derivative(&self, s: f64) -> Result<f64> {
        Ok(period_derivative(s.sin())? * s.cos())
    }

    fn weight(&self, s: f64) -> Result<f64> {
        Ok(period_agm(s.sin())? * s.cos())
    }

    fn domain(&self) -> (f64, f64) {
        (0.0, FRAC_PI_2)
    }
}

/// Weights given by closures, for synthetic period profiles.
pub struct FnWeights<P, D, G> {
    pub period: P,
    pub period_derivative: D,
    pub weight: G,
    pub domain: (f64, f64),
}

impl<P, D, G> AngleWeights for FnWeights<P, D, G>
where
    P: Fn(f64) -> f64 + Sync,
    D: Fn(f64) -> f64 + Sync,
    G: Fn(f64) -> f64 + Sync,
{
    fn period(&self, s: f64) -> Result<f64> {
        Ok((self.period)(s))
    }

    fn period_derivative(&self, s: f64) -> Result<f64> {
        Ok((self.period_derivative)(s))
    }

    fn weight(&self, s: f64) -> Result<f64> {
        Ok((self.weight)(s))
    }

    fn domain(&self) -> (f64, f64) {
        self.domain
    }
}

/// Multiples of `stride` in `[−k_max, k_max]`, in increasing order.
pub fn wavenumber_lattice(k_max: i64, stride: i64) -> Vec<i64> {
    let stride = stride.max(1);
    (-k_max..=k_max).filter(|k| k % stride == 0).collect()
}

#[derive(Clone, Debug)]
pub struct AngleModeField {
    pub k_list: Vec<i64>,
    pub s_grid: Vec<f64>,
    /// `coeffs[ik * n_s + l] = f_{k_list[ik]}(s_grid[l])`.
    pub coeffs: Vec<Complex64>,
    pub weight: Vec<f64>,
    pub period: Vec<f64>,
    pub time: f64,
    pub mean_free: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AngleModeHeader {
    pub k_list: Vec<i64>,
    pub n_s: usize,
    pub s_range: (f64, f64),
    pub time: f64,
    pub mean_free: bool,
    pub angle_period: f64,
}

impl AngleModeField {
    /// Validates shapes, positivity of `g` and `T`, and reality
    /// `f_{−k} = conj f_k` for every pair present. With `mean_free`, the
    /// `k = 0` mode is zeroed.
    pub fn new(
        k_list: Vec<i64>,
        s_grid: Vec<f64>,
        mut coeffs: Vec<Complex64>,
        weight: Vec<f64>,
        period: Vec<f64>,
        mean_free: bool,
    ) -> Result<Self> {
        let ns = s_grid.len();
        if ns < 3 || weight.len() != ns || period.len() != ns || coeffs.len() != k_list.len() * ns {
            return Err(invalid("inconsistent angle-mode shapes (need at least 3 levels)"));
        }
        if s_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("level grid must be strictly increasing"));
        }
        if weight.iter().chain(&period).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid("weight and period must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        if !k_list.iter().all(|k| seen.insert(*k)) {
            return Err(invalid("duplicate wavenumber"));
        }
        if mean_free {
            if let Some(i0) = k_list.iter().position(|&k| k == 0) {
                coeffs[i0 * ns..(i0 + 1) * ns].fill(Complex64::default());
            }
        }
        let f = AngleModeField { k_list, s_grid, coeffs, weight, period, time: 0.0, mean_free };
        for (ik, &k) in f.k_list.iter().enumerate() {
            let scale = f.mode(ik).iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
            match f.k_list.iter().position(|&q| q == -k) {
                Some(jk) => {
                    for (a, b) in f.mode(ik).iter().zip(f.mode(jk)) {
                        if (a - b.conj()).norm() > 1e-12 * scale {
                            return Err(invalid(format!("mode {k} is not the conjugate of mode {}", -k)));
                        }
                    }
                }
                None => {
                    if f.mode(ik).iter().any(|c| c.norm() > 0.0) {
                        return Err(invalid(format!("mode {k} has no conjugate partner")));
                    }
                }
            }
        }
        Ok(f)
    }

    /// Samples `values[l * m + j] = f(2πj/m, s_l)` transformed in `θ`,
    /// keeping the wavenumbers of `lattice` with `|k| < m/2`.
    pub fn from_samples(
        values: &[f64],
        m: usize,
        s_grid: Vec<f64>,
        weight: Vec<f64>,
        period: Vec<f64>,
        stride: i64,
        mean_free: bool,
    ) -> Result<Self> {
        let ns = s_grid.len();
        if m < 4 || values.len() != m * ns {
            return Err(invalid("sample table must be n_levels × n_theta with n_theta ≥ 4"));
        }
        let k_max = (m as i64 - 1) / 2;
        let k_list = wavenumber_lattice(k_max, stride);
        let fft = FftPlanner::<f64>::new().plan_fft_forward(m);
        let rows: Vec<Vec<Complex64>> = (0..ns)
            .map(|l| {
                let mut row: Vec<Complex64> = values[l * m..(l + 1) * m].iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.process(&mut row);
                row
            })
            .collect();
        let mut coeffs = vec![Complex64::default(); k_list.len() * ns];
        for (ik, &k) in k_list.iter().enumerate() {
            let j = k.rem_euclid(m as i64) as usize;
            for l in 0..ns {
                coeffs[ik * ns + l] = rows[l][j] / m as f64;
            }
        }
        // exact conjugate pairs despite rounding in the transform
        for (ik, &k) in k_list.iter().enumerate() {
            if k < 0 {
                let jk = k_list.iter().position(|&q| q == -k).expect("lattice is symmetric");
                for l in 0..ns {
                    coeffs[ik * ns + l] = coeffs[jk * ns + l].conj();
                }
            } else if k == 0 {
                for l in 0..ns {
                    coeffs[ik * ns + l].im = 0.0;
                }
            }
        }
        AngleModeField::new(k_list, s_grid, coeffs, weight, period, mean_free)
    }

    /// Pulls `rho0` back through the chart nodes: `f(θ, s) = ρ₀(Φ(θ/2π, s))`.
    pub fn from_chart<F: Fn([f64; 2]) -> f64>(chart: &ActionAngleChart, rho0: F, stride: i64, mean_free: bool) -> Result<Self> {
        let m = chart.n_theta();
        let values: Vec<f64> = chart.positions.iter().map(|&x| rho0(x)).collect();
        let weight = chart_weights(chart);
        AngleModeField::from_samples(&values, m, chart.levels.clone(), weight, chart.periods.clone(), stride, mean_free)
    }

    /// Builds a state from mode profiles `(k, f_k(s))` on `s_grid`, adding the
    /// conjugate partner of each listed mode.
    pub fn from_profiles<W: AngleWeights + ?Sized>(
        weights: &W,
        s_grid: Vec<f64>,
        modes: &[(i64, Vec<Complex64>)],
        mean_free: bool,
    ) -> Result<Self> {
        let ns = s_grid.len();
        let mut ks: Vec<i64> = modes.iter().flat_map(|(k, _)| [*k, -*k]).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut coeffs = vec![Complex64::default(); ks.len() * ns];
        for (k, prof) in modes {
            if prof.len() != ns {
                return Err(invalid(format!("profile of mode {k} has the wrong length")));
            }
            let i = ks.iter().position(|q| q == k).expect("listed");
            let j = ks.iter().position(|q| *q == -k).expect("listed");
            for l in 0..ns {
                if *k == 0 {
                    coeffs[i * ns + l] = Complex64::new(prof[l].re, 0.0);
                } else {
                    coeffs[i * ns + l] = prof[l];
                    coeffs[j * ns + l] = prof[l].conj();
                }
            }
        }
        let weight = s_grid.iter().map(|&s| weights.weight(s)).collect::<Result<Vec<_>>>()?;
        let period = s_grid.iter().map(|&s| weights.period(s)).collect::<Result<Vec<_>>>()?;
        AngleModeField::new(ks, s_grid, coeffs, weight, period, mean_free)
    }

    pub fn n_s(&self) -> usize {
        self.s_grid.len()
    }

    pub fn mode(&self, ik: usize) -> &[Complex64] {
        let ns = self.n_s();
        &self.coeffs[ik * ns..(ik + 1) * ns]
    }

    /// Largest spacing of the level grid, the step of the difference quotient.
    pub fn s_spacing(&self) -> f64 {
        self.s_grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// `f(θ, s_l)` at a grid level.
    pub fn value_at_node(&self, theta: f64, l: usize) -> f64 {
        let ns = self.n_s();
        self.k_list
            .iter()
            .enumerate()
            .map(|(ik, &k)| (self.coeffs[ik * ns + l] * Complex64::cis(k as f64 * theta)).re)
            .sum()
    }

    /// `∫∫ |f|² g ds dθ` by the trapezoid rule in `s` and Parseval in `θ`.
    pub fn l2g_sq(&self) -> f64 {
        let ns = self.n_s();
        let dens: Vec<f64> = (0..ns)
            .map(|l| (0..self.k_list.len()).map(|ik| self.coeffs[ik * ns + l].norm_sqr()).sum::<f64>() * self.weight[l])
            .collect();
        2.0 * PI * quad::trapezoid(&self.s_grid, &dens)
    }

    /// `∫∫ |∂_s f|² g ds dθ`.
    pub fn ds_l2g_sq(&self) -> f64 {
        let ns = self.n_s();
        let mut dens = vec![0.0; ns];
        for ik in 0..self.k_list.len() {
            let d = diff_s(&self.s_grid, self.mode(ik));
            for l in 0..ns {
                dens[l] += d[l].norm_sqr() * self.weight[l];
            }
        }
        2.0 * PI * quad::trapezoid(&self.s_grid, &dens)
    }

    pub fn header(&self) -> AngleModeHeader {
        AngleModeHeader {
            k_list: self.k_list.clone(),
            n_s: self.n_s(),
            s_range: (self.s_grid[0], self.s_grid[self.n_s() - 1]),
            time: self.time,
            mean_free: self.mean_free,
            angle_period: 2.0 * PI,
        }
    }

    /// Rows `k,s,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,s,re,im")?;
        let ns = self.n_s();
        for (ik, &k) in self.k_list.iter().enumerate() {
            for l in 0..ns {
                let c = self.coeffs[ik * ns + l];
                writeln!(w, "{k},{},{},{}", fmt_f64(self.s_grid[l]), fmt_f64(c.re), fmt_f64(c.im))?;
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.header())?;
        Ok(())
    }
}

/// Area weight of the chart levels: `T(h)` or `T̃(I) cos I`.
pub fn chart_weights(chart: &ActionAngleChart) -> Vec<f64> {
    match chart.variant {
        ChartVariant::Standard => chart.periods.clone(),
        ChartVariant::Cellular => chart.periods.iter().zip(&chart.levels).map(|(t, s)| t * s.cos()).collect(),
    }
}

/// Second-order central differences, one-sided at the ends.
fn diff_s(s: &[f64], f: &[Complex64]) -> Vec<Complex64> {
    let n = s.len();
    let mut d = vec![Complex64::default(); n];
    for l in 1..n - 1 {
        let (h0, h1) = (s[l] - s[l - 1], s[l + 1] - s[l]);
        d[l] = (f[l + 1] - f[l]) * (h0 / (h1 * (h0 + h1))) + (f[l] - f[l - 1]) * (h1 / (h0 * (h0 + h1)));
    }
    let (a, b) = (s[1] - s[0], s[2] - s[1]);
    d[0] = -f[0] * ((2.0 * a + b) / (a * (a + b))) + f[1] * ((a + b) / (a * b)) - f[2] * (a / (b * (a + b)));
    let (a, b) = (s[n - 1] - s[n - 2], s[n - 2] - s[n - 3]);
    d[n - 1] = f[n - 1] * ((2.0 * a + b) / (a * (a + b))) - f[n - 2] * ((a + b) / (a * b)) + f[n - 3] * (a / (b * (a + b)));
    d
}

/// Rotates every mode: `f_k(t, s) = f_k(0, s) e^{−2πikt/T(s)}`.
pub fn transport_exact(state: &AngleModeField, t: f64) -> AngleModeField {
    let ns = state.n_s();
    let mut out = state.clone();
    out.coeffs.par_chunks_mut(ns).zip(state.k_list.par_iter()).for_each(|(row, &k)| {
        for (l, c) in row.iter_mut().enumerate() {
            *c *= Complex64::cis(-2.0 * PI * k as f64 * t / state.period[l]);
        }
    });
    out.time = state.time + t;
    out
}

/// Squared weighted norm `∫∫ (|f|² + |∂_s f|²) g ds dθ`.
pub fn h1g_norm(state: &AngleModeField) -> f64 {
    state.l2g_sq() + state.ds_l2g_sq()
}

/// `∫∫ f φ̄ g ds dθ` over the grid levels inside `s_range`.
pub fn correlation(f: &AngleModeField, phi: &AngleModeField, s_range: (f64, f64)) -> Result<Complex64> {
    if f.s_grid != phi.s_grid {
        return Err(invalid("states live on different level grids"));
    }
    let ns = f.n_s();
    let idx: Vec<usize> = (0..ns).filter(|&l| f.s_grid[l] >= s_range.0 && f.s_grid[l] <= s_range.1).collect();
    if idx.len() < 2 {
        return Ok(Complex64::default());
    }
    let s: Vec<f64> = idx.iter().map(|&l| f.s_grid[l]).collect();
    let mut re = vec![0.0; idx.len()];
    let mut im = vec![0.0; idx.len()];
    for (ik, &k) in f.k_list.iter().enumerate() {
        let Some(jk) = phi.k_list.iter().position(|&q| q == k) else { continue };
        for (p, &l) in idx.iter().enumerate() {
            let v = f.coeffs[ik * ns + l] * phi.coeffs[jk * ns + l].conj() * f.weight[l];
            re[p] += v.re;
            im[p] += v.im;
        }
    }
    Ok(Complex64::new(quad::trapezoid(&s, &re), quad::trapezoid(&s, &im)) * (2.0 * PI))
}

/// The individual terms of the stationary-phase bound, `Q = T²g/T′`:
/// `r(t) = (A (|Q(a)| + |Q(b)| + ‖Q′‖_{L¹} + D) + √A D) / t` with
/// `A = ‖g^{−1/2}‖²_{L²}`, `D = ‖T²g^{1/2}/T′‖_{L²}` on `(a, b) = (δ, π/2 − δ′)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhaseBound {
    pub inv_weight_sq: f64,
    pub boundary_lo: f64,
    pub boundary_hi: f64,
    pub variation: f64,
    pub l2_term: f64,
    pub t: f64,
    pub r: f64,
}

pub fn stationary_phase_terms<W: AngleWeights + ?Sized>(weights: &W, delta: f64, delta_prime: f64, t: f64) -> Result<PhaseBound> {
    for (name, d) in [("delta", delta), ("delta_prime", delta_prime)] {
        if !(d > 0.0 && d < 0.25) {
            return Err(invalid(format!("{name} = {d} must lie in (0, 1/4)")));
        }
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t must be positive"));
    }
    let (lo, hi) = weights.domain();
    let (a, b) = (lo + delta, hi - delta_prime);
    if !(a < b) {
        return Err(invalid("δ and δ′ leave an empty level interval"));
    }
    let q = |s: f64| -> Result<f64> {
        let tp = weights.period(s)?;
        Ok(tp * tp * weights.weight(s)? / weights.period_derivative(s)?)
    };
    // five-point derivative of Q; the step stays inside the open domain
    let dq = |s: f64| -> f64 {
        let h = 1e-4 * (s - lo).min(hi - s).min(1.0);
        let v = |x: f64| q(x).unwrap_or(f64::NAN);
        (v(s - 2.0 * h) - 8.0 * v(s - h) + 8.0 * v(s + h) - v(s + 2.0 * h)) / (12.0 * h)
    };
    let inv_weight_sq = quad::integrate(|s| 1.0 / weights.weight(s).unwrap_or(f64::NAN), a, b, 1e-10, 0.0)?;
    let variation = quad::integrate(|s| dq(s).abs(), a, b, 1e-8, 1e-12)?;
    let l2_term = quad::integrate(
        |s| {
            let tp = weights.period(s).unwrap_or(f64::NAN);
            let v = tp * tp * weights.weight(s).unwrap_or(f64::NAN).sqrt() / weights.period_derivative(s).unwrap_or(f64::NAN);
            v * v
        },
        a,
        b,
        1e-10,
        0.0,
    )?
    .sqrt();
    let boundary_lo = q(a)?.abs();
    let boundary_hi = q(b)?.abs();
    let bracket = boundary_lo + boundary_hi + variation + l2_term;
    let r = (inv_weight_sq * bracket + inv_weight_sq.sqrt() * l2_term) / t;
    if !r.is_finite() {
        return Err(MixlabError::InvalidArgument("stationary-phase terms are not finite on the interval".into()));
    }
    Ok(PhaseBound { inv_weight_sq, boundary_lo, boundary_hi, variation, l2_term, t, r })
}

/// `r(t)` of the stationary-phase estimate.
pub fn stationary_phase_bound<W: AngleWeights + ?Sized>(weights: &W, delta: f64, delta_prime: f64, t: f64) -> Result<f64> {
    Ok(stationary_phase_terms(weights, delta, delta_prime, t)?.r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeRegime {
    /// Data away from both the separatrix and the centre: `C/t`.
    Interior,
    /// Data away from the separatrix, reaching the elliptic point:
    /// `min_δ′ (δ′)^{2−2ε} + κ^{−2}|ln δ′|²/t`.
    Elliptic,
    /// Data away from the centre, reaching the separatrix:
    /// `min_δ [δ(1+|ln δ|)]^{1−ε} + δ^{−2}|ln κ|²/t`.
    Global,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnvelopeOptions {
    /// Distance of the data from the excluded critical set, fixing the
    /// parameter that is not optimised.
    pub kappa: f64,
    pub grid: usize,
    /// Smallest `ln δ` on the search grid.
    pub log_min: f64,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        EnvelopeOptions { kappa: 0.1, grid: 4001, log_min: -300.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub value: f64,
    /// Optimal free parameter (`δ′` for elliptic, `δ` for global).
    pub argmin: Option<f64>,
}

/// `(small-set term, 1/t term)` of the envelope at the free parameter `d`.
pub fn envelope_terms(t: f64, eps: f64, regime: EnvelopeRegime, d: f64, opts: &EnvelopeOptions) -> (f64, f64) {
    let k = opts.kappa;
    match regime {
        EnvelopeRegime::Interior => (0.0, k.ln().powi(2) / (k * k * t)),
        EnvelopeRegime::Elliptic => (d.powf(2.0 - 2.0 * eps), d.ln().powi(2) / (k * k * t)),
        EnvelopeRegime::Global => ((d * (1.0 + d.ln().abs())).powf(1.0 - eps), k.ln().powi(2) / (d * d * t)),
    }
}

/// Minimised envelope: grid search in `ln δ` on `[log_min, ln(1/4))`, then
/// golden-section refinement between the neighbours of the best node.
pub fn mixing_envelope_with(t: f64, eps: f64, regime: EnvelopeRegime, opts: &EnvelopeOptions) -> Result<Envelope> {
    if !(t >= 1.0) {
        return Err(invalid("envelope needs t ≥ 1"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid("eps must lie in [0, 1)"));
    }
    if regime == EnvelopeRegime::Interior {
        let (a, b) = envelope_terms(t, eps, regime, opts.kappa, opts);
        return Ok(Envelope { value: a + b, argmin: None });
    }
    let f = |u: f64| {
        let (a, b) = envelope_terms(t, eps, regime, u.exp(), opts);
        a + b
    };
    let (u0, u1) = (opts.log_min, 0.25f64.ln());
    let n = opts.grid.max(3);
    let h = (u1 - u0) / (n - 1) as f64;
    let (ib, _) = (0..n).map(|i| (i, f(u0 + i as f64 * h))).fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let (mut a, mut b) = ((u0 + (ib as f64 - 1.0) * h).max(u0), (u0 + (ib as f64 + 1.0) * h).min(u1));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let (u, v) = if fc <= fd { (c, fc) } else { (d, fd) };
    Ok(Envelope { value: v, argmin: Some(u.exp()) })
}

pub fn mixing_envelope(t: f64, eps: f64, regime: EnvelopeRegime) -> Result<f64> {
    Ok(mixing_envelope_with(t, eps, regime, &EnvelopeOptions::default())?.value)
}

/// Chart coordinates of the grid points covered by a chart, computed once
/// and reused for every evaluation time.
#[derive(Clone, Debug)]
pub struct ChartGridMap {
    pub n: usize,
    pub index: Vec<usize>,
    /// Angle as a fraction of a turn.
    pub theta: Vec<f64>,
    pub level: Vec<f64>,
}

impl ChartGridMap {
    pub fn new(chart: &ActionAngleChart, n: usize) -> Result<Self> {
        let rows: Vec<Vec<(usize, f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut row = Vec::new();
                for i in 0..n {
                    if let Ok((th, lv)) = angle_of_point(chart, grid_point(n, i, j)) {
                        row.push((j * n + i, th, lv));
                    }
                }
                row
            })
            .collect();
        let mut map = ChartGridMap { n, index: Vec::new(), theta: Vec::new(), level: Vec::new() };
        for (idx, th, lv) in rows.into_iter().flatten() {
            map.index.push(idx);
            map.theta.push(th);
            map.level.push(lv);
        }
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Four-point Lagrange stencil for `s` on a sorted grid.
fn cubic_stencil(grid: &[f64], s: f64) -> (usize, [f64; 4]) {
    let n = grid.len();
    let p = grid.partition_point(|&g| g <= s).clamp(1, n - 1);
    let i0 = p.saturating_sub(2).min(n.saturating_sub(4));
    let mut w = [0.0; 4];
    let m = n.min(4);
    for a in 0..m {
        let mut v = 1.0;
        for b in 0..m {
            if a != b {
                v *= (s - grid[i0 + b]) / (grid[i0 + a] - grid[i0 + b]);
            }
        }
        w[a] = v;
    }
    (i0, w)
}

/// `state` advanced by a further time `t`, sampled on the torus grid: at
/// each mapped point the mode profiles are interpolated to the exact level
/// `s(x)` and rotated with the exact period `T(s(x))`. Points off the chart
/// are zero.
pub fn pushforward<W: AngleWeights + ?Sized>(initial: &AngleModeField, map: &ChartGridMap, weights: &W, t: f64) -> Result<ScalarField> {
    let n = map.n;
    let ns = initial.n_s();
    let (s0, s1) = (initial.s_grid[0], initial.s_grid[ns - 1]);
    let vals: Vec<(usize, f64)> = (0..map.len())
        .into_par_iter()
        .map(|p| -> Result<(usize, f64)> {
            let s = map.level[p];
            if !(s >= s0 && s <= s1) {
                return Ok((map.index[p], 0.0));
            }
            let (i0, w) = cubic_stencil(&initial.s_grid, s);
            let omega_t = 2.0 * PI * t / weights.period(s)?;
            let theta = 2.0 * PI * map.theta[p];
            let mut acc = 0.0;
            for (ik, &k) in initial.k_list.iter().enumerate() {
                let row = initial.mode(ik);
                let mut c = Complex64::default();
                for a in 0..4.min(ns) {
                    c += row[i0 + a] * w[a];
                }
                acc += (c * Complex64::cis(k as f64 * (theta - omega_t))).re;
            }
            Ok((map.index[p], acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut phys = vec![0.0; n * n];
    for (idx, v) in vals {
        phys[idx] = v;
    }
    ScalarField::from_physical(n, &phys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::period::{linear_fit, linspace, logspace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump(s: f64, a: f64, b: f64) -> f64 {
        if s <= a || s >= b {
            0.0
        } else {
            let u = (2.0 * s - a - b) / (b - a);
            (1.0 - 1.0 / (1.0 - u * u)).exp()
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, grid: &[f64], k_max: i64, with_zero: bool) -> AngleModeField {
        let mut modes = Vec::new();
        for k in (if with_zero { 0 } else { 1 })..=k_max {
            let (a, b) = (rng.gen_range(0.2..0.6), rng.gen_range(0.9..1.4));
            let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let w = rng.gen_range(1.0..6.0);
            let prof = grid.iter().map(|&s| c * bump(s, a, b) * Complex64::cis(w * s)).collect();
            modes.push((k, prof));
        }
        AngleModeField::from_profiles(&CellularWeights, grid.to_vec(), &modes, !with_zero).unwrap()
    }

    #[test]
    fn zero_modes_are_stationary_and_full_periods_return() {
        let grid = linspace(0.2, 1.3, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_state(&mut rng, &grid, 3, true);
        let i0 = f.k_list.iter().position(|&k| k == 0).unwrap();
        let g = transport_exact(&f, 123.4);
        assert_eq!(f.mode(i0), g.mode(i0));
        assert_eq!(g.time, 123.4);

        // mass on a single level returns after one period of that level
        let l0 = 17;
        let modes = vec![(2, grid.iter().enumerate().map(|(l, _)| Complex64::new((l == l0) as u8 as f64, 0.5)).collect())];
        let f = AngleModeField::from_profiles(&CellularWeights, grid.clone(), &modes, true).unwrap();
        let back = transport_exact(&f, f.period[l0]);
        for ik in 0..f.k_list.len() {
            assert!((back.mode(ik)[l0] - f.mode(ik)[l0]).norm() < 1e-13);
        }
    }

    #[test]
    fn construction_enforces_reality_and_mean_free() {
        let grid = linspace(0.2, 1.3, 5);
        let (w, p) = (vec![1.0; 5], vec![1.0; 5]);
        let mut c = vec![Complex64::new(1.0, 0.0); 15];
        c[0] = Complex64::new(1.0, 1.0);
        assert!(AngleModeField::new(vec![-1, 0, 1], grid.clone(), c.clone(), w.clone(), p.clone(), false).is_err());
        c[0] = Complex64::new(1.0, 0.0);
        let f = AngleModeField::new(vec![-1, 0, 1], grid.clone(), c.clone(), w.clone(), p.clone(), true).unwrap();
        assert!(f.mode(1).iter().all(|c| c.norm() == 0.0));
        assert!(AngleModeField::new(vec![1], grid.clone(), vec![Complex64::new(1.0, 0.0); 5], w.clone(), p.clone(), false).is_err());
        assert!(AngleModeField::new(vec![0], grid, vec![Complex64::default(); 5], w, vec![0.0; 5], false).is_err());
        assert_eq!(wavenumber_lattice(9, 4), vec![-8, -4, 0, 4, 8]);
    }

    #[test]
    fn h1g_closed_form_and_homogeneity() {
        let grid = linspace(0.0, FRAC_PI_2, 257);
        let ns = grid.len();
        let mut coeffs = vec![Complex64::default(); ns];
        coeffs.extend(vec![Complex64::new(1.0, 0.0); ns]);
        let f = AngleModeField::new(vec![-4, 4], grid.clone(), coeffs, vec![1.0; ns], vec![1.0; ns], true);
        // e^{4iθ} alone is not real; test the real profile cos 4θ as well
        assert!(f.is_err());
        let one = vec![Complex64::new(1.0, 0.0); ns];
        let coeffs: Vec<Complex64> = one.iter().chain(&one).cloned().collect();
        let f = AngleModeField::new(vec![-4, 4], grid.clone(), coeffs, vec![1.0; ns], vec![1.0; ns], true).unwrap();
        // |2cos 4θ|² integrates to 2·2π per unit of s
        let exact = 2.0 * 2.0 * PI * FRAC_PI_2;
        assert!((h1g_norm(&f) - exact).abs() < 1e-8 * exact);
        assert!(f.ds_l2g_sq().abs() < 1e-20);

        let zero = AngleModeField::new(vec![-4, 4], grid.clone(), vec![Complex64::default(); 2 * ns], vec![1.0; ns], vec![1.0; ns], true).unwrap();
        assert_eq!(h1g_norm(&zero), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_state(&mut rng, &linspace(0.1, 1.4, 301), 4, false);
        let mut h = g.clone();
        let c = -2.5;
        h.coeffs.iter_mut().for_each(|v| *v *= c);
        assert!((h1g_norm(&h) - c * c * h1g_norm(&g)).abs() < 1e-12 * h1g_norm(&h));
    }

    #[test]
    fn h1g_of_a_smooth_profile_converges() {
        // f = cos θ · sin(2s) with g ≡ 1 on (0, π/2):
        // ∫∫|f|² = π·π/4, ∫∫|∂_s f|² = π·4·π/4
        let exact = PI * PI / 4.0 * 5.0;
        let w = FnWeights { period: |_| 1.0, period_derivative: |_| 1.0, weight: |_| 1.0, domain: (0.0, FRAC_PI_2) };
        let grid = linspace(0.0, FRAC_PI_2, 2001);
        let prof = grid.iter().map(|&s| Complex64::new(0.5 * (2.0 * s).sin(), 0.0)).collect();
        let f = AngleModeField::from_profiles(&w, grid, &[(1, prof)], true).unwrap();
        assert!((h1g_norm(&f) - exact).abs() < 1e-5 * exact, "{}", h1g_norm(&f));
    }

    #[test]
    fn transport_conserves_l2g_and_grows_derivative_linearly() {
        let grid = linspace(0.15, 1.35, 801);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f0 = random_state(&mut rng, &grid, 5, false);
        let k_max = 5.0;
        let slope_bound = grid
            .iter()
            .map(|&s| (CellularWeights.period_derivative(s).unwrap() / CellularWeights.period(s).unwrap().powi(2)).abs())
            .fold(0.0, f64::max);
        let (l0, d0) = (f0.l2g_sq().sqrt(), f0.ds_l2g_sq().sqrt());
        for t in [0.5, 1.0, 3.0, 7.0, 20.0] {
            let ft = transport_exact(&f0, t);
            assert!((ft.l2g_sq().sqrt() - l0).abs() < 1e-12 * l0);
            let growth = ft.ds_l2g_sq().sqrt() - d0;
            // phase derivative 2πk t T′/T²
            assert!(growth <= 1.01 * 2.0 * PI * k_max * slope_bound * l0 * t, "t = {t}: {growth}");
        }
    }

    #[test]
    fn phase_bound_is_exactly_one_over_t() {
        let r1 = stationary_phase_terms(&CellularWeights, 0.1, 0.05, 10.0).unwrap();
        let r2 = stationary_phase_terms(&CellularWeights, 0.1, 0.05, 20.0).unwrap();
        assert!((r1.r - 2.0 * r2.r).abs() <= 4.0 * f64::EPSILON * r1.r);
        assert!(r1.boundary_lo > 0.0 && r1.boundary_hi > 0.0 && r1.variation > 0.0 && r1.l2_term > 0.0);
        assert!(stationary_phase_bound(&CellularWeights, 0.0, 0.1, 1.0).is_err());
        assert!(stationary_phase_bound(&CellularWeights, 0.1, 0.25, 1.0).is_err());
    }

    #[test]
    fn phase_bound_terms_match_closed_form_weights() {
        // T = 1 + s, g = 1 on (0, π/2): Q = (1+s)², ‖Q′‖₁ = Q(b) − Q(a)
        let w = FnWeights { period: |s: f64| 1.0 + s, period_derivative: |_| 1.0, weight: |_| 1.0, domain: (0.0, FRAC_PI_2) };
        let (d, dp) = (0.1, 0.2);
        let (a, b) = (d, FRAC_PI_2 - dp);
        let p = stationary_phase_terms(&w, d, dp, 1.0).unwrap();
        assert!((p.inv_weight_sq - (b - a)).abs() < 1e-12);
        assert!((p.variation - ((1.0 + b).powi(2) - (1.0 + a).powi(2))).abs() < 1e-7);
        let l2 = (((1.0 + b).powi(5) - (1.0 + a).powi(5)) / 5.0).sqrt();
        assert!((p.l2_term - l2).abs() < 1e-10);
        let expect = (b - a) * ((1.0 + a).powi(2) + (1.0 + b).powi(2) + p.variation + l2) + (b - a).sqrt() * l2;
        assert!((p.r - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn cellular_phase_bound_grows_at_most_like_log_squared() {
        let dps = logspace(1e-3, 1e-1, 9);
        let c: Vec<f64> = dps
            .iter()
            .map(|&dp| stationary_phase_bound(&CellularWeights, 0.1, dp, 1.0).unwrap() / dp.ln().powi(2))
            .collect();
        let cmax = c.iter().cloned().fold(0.0, f64::max);
        // the fitted constant does not grow as δ′ shrinks
        assert!(c[0] <= c[c.len() - 1] * 1.0001, "{c:?}");
        assert!(cmax.is_finite() && cmax > 0.0);
    }

    #[test]
    fn correlations_obey_the_phase_bound() {
        let grid = linspace(0.02, FRAC_PI_2 - 0.02, 1201);
        let (d, dp) = (0.1, 0.1);
        let r1 = stationary_phase_bound(&CellularWeights, d, dp, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let f0 = random_state(&mut rng, &grid, 6, false);
            let nf = h1g_norm(&f0).sqrt();
            for _ in 0..4 {
                let phi = random_state(&mut rng, &grid, 6, true);
                let np = h1g_norm(&phi).sqrt();
                for t in [10.0, 100.0, 1000.0] {
                    let c = correlation(&transport_exact(&f0, t), &phi, (d, FRAC_PI_2 - dp)).unwrap();
                    assert!(c.norm() <= nf * np * r1 / t, "t = {t}: {} > {}", c.norm(), nf * np * r1 / t);
                }
            }
        }
    }

    #[test]
    fn envelopes_scale_and_approach_their_exponents() {
        let o = EnvelopeOptions::default();
        for regime in [EnvelopeRegime::Interior, EnvelopeRegime::Elliptic, EnvelopeRegime::Global] {
            let (a1, b1) = envelope_terms(10.0, 0.05, regime, 0.01, &o);
            let (a2, b2) = envelope_terms(20.0, 0.05, regime, 0.01, &o);
            assert_eq!(a1, a2);
            assert!((b1 - 2.0 * b2).abs() <= 2.0 * f64::EPSILON * b1);
        }
        let interior = mixing_envelope(100.0, 0.05, EnvelopeRegime::Interior).unwrap();
        assert!((interior * 100.0 - mixing_envelope(1.0, 0.05, EnvelopeRegime::Interior).unwrap()).abs() < 1e-12 * interior * 100.0);

        let slope = |regime, a: f64, b: f64| {
            let ts = logspace(a, b, 21);
            let v: Vec<f64> = ts.iter().map(|&t| mixing_envelope(t, 0.05, regime).unwrap().ln()).collect();
            linear_fit(&ts.iter().map(|t| t.ln()).collect::<Vec<_>>(), &v).0
        };
        // logarithmic factors make the local slope creep towards the power
        let g: Vec<f64> = [1e2, 1e10, 1e40].iter().map(|&a| slope(EnvelopeRegime::Global, a, a * 1e4)).collect();
        assert!(g[0] > g[1] && g[1] > g[2], "{g:?}");
        let limit = -(1.0 - 0.05) / (3.0 - 0.05);
        assert!(g[2] > limit && g[2] < -1.0 / 3.0 + 0.05 + 0.02, "{g:?}");
        let e: Vec<f64> = [1e2, 1e10, 1e40].iter().map(|&a| slope(EnvelopeRegime::Elliptic, a, a * 1e4)).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
        assert!(e[2] >= -1.0 - 0.02 && e[2] <= -1.0 + 0.05 + 0.02, "{e:?}");
    }

    #[test]
    fn dump_has_one_row_per_mode_and_level() {
        let grid = linspace(0.3, 1.2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_state(&mut rng, &grid, 2, false);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + f.k_list.len() * 11);
        let mut js = Vec::new();
        f.write_json(&mut js).unwrap();
        let h: AngleModeHeader = serde_json::from_slice(&js).unwrap();
        assert_eq!(h.k_list, f.k_list);
    }

    #[test]
    fn pushforward_composes_with_transport() {
        let chart = crate::actionangle::build_cellular_chart(0.3, 1.1, 64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_state(&mut rng, &chart.levels, 2, false);
        let map = ChartGridMap::new(&chart, 64).unwrap();
        let direct = pushforward(&f, &map, &CellularWeights, 3.0).unwrap();
        let composed = pushforward(&transport_exact(&f, 1.0), &map, &CellularWeights, 2.0).unwrap();
        let rel = direct.sub(&composed).unwrap().l2_norm() / direct.l2_norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn chart_pullback_round_trips_on_nodes() {
        let chart = crate::actionangle::build_cellular_chart(0.3, 1.1, 64, 24).unwrap();
        let rho = |x: [f64; 2]| x[0].cos() * bump(x[0].sin() * x[1].sin(), 0.2, 0.95);
        let f = AngleModeField::from_chart(&chart, rho, 1, false).unwrap();
        for l in [0usize, 7, 23] {
            for j in [0usize, 13, 40] {
                let th = 2.0 * PI * j as f64 / 64.0;
                let x = chart.positions[l * 64 + j];
                assert!((f.value_at_node(th, l) - rho(x)).abs() < 1e-8, "l = {l}, j = {j}");
            }
        }
    }
}
