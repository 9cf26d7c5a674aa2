//! Action–angle charts `Φ(θ, h) = X(θT(h), x(h))` on an invariant annulus,
//! and the cellular variant `Φ̃(θ, I) = X(θT̃(I), (π/2, I))`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MixlabError, Result};
use crate::field::{norm, sub, wrap_pi, Cell, HamiltonianField, Vec2};
use crate::io::fmt_f64;
use crate::lagrangian::{flow_map, return_period_from, sample_orbit, ReturnOptions};
use crate::ode::{Dop853, OdeOptions};

const ORBIT_TOL: f64 = 1e-13;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransversalCurve {
    pub levels: Vec<f64>,
    pub points: Vec<Vec2>,
    /// `|H(x(h)) − h|` per node.
    pub residuals: Vec<f64>,
}

/// Moves `x` along `∇H/|∇H|²` until `H(x) = h`.
fn transport_level(field: &HamiltonianField, x: Vec2, h: f64, min_grad: f64) -> Result<Vec2> {
    let h_start = field.value(x);
    let mut y = x;
    if h != h_start {
        let stall = std::cell::Cell::new(None);
        let rhs = |p: &[f64; 2]| {
            let g = field.gradient(*p);
            let g2 = g[0] * g[0] + g[1] * g[1];
            if g2.sqrt() < min_grad {
                stall.set(Some(*p));
            }
            [g[0] / g2, g[1] / g2]
        };
        let mut ode = Dop853::new(rhs, h_start, x, (h - h_start).signum(), OdeOptions::with_tol(ORBIT_TOL));
        y = ode.advance_to(h)?;
        if let Some(p) = stall.get() {
            return Err(MixlabError::Stall {
                t: field.value(p),
                reason: format!("|∇H| fell below {min_grad:e} at {p:?}; the level band is not a good annulus"),
            });
        }
    }
    // Newton polish along the gradient
    for _ in 0..3 {
        let g = field.gradient(y);
        let g2 = g[0] * g[0] + g[1] * g[1];
        let r = h - field.value(y);
        if r == 0.0 {
            break;
        }
        y = [y[0] + r * g[0] / g2, y[1] + r * g[1] / g2];
    }
    Ok(y)
}

/// Integrates `x′(h) = ∇H/|∇H|²(x(h))` from `x0` and records `n`
/// equispaced levels in `[h0, h1]`. With `c0` given, meeting `|∇H| < c0/2`
/// is an error.
pub fn build_transversal(
    field: &HamiltonianField,
    h0: f64,
    h1: f64,
    x0: Vec2,
    n: usize,
    c0: Option<f64>,
) -> Result<TransversalCurve> {
    if n == 0 || h1 < h0 || (n == 1 && h1 != h0) {
        return Err(invalid("need n ≥ 1 and h0 ≤ h1 (h0 = h1 when n = 1)"));
    }
    let min_grad = c0.map(|c| 0.5 * c).unwrap_or(1e-10);
    let levels: Vec<f64> =
        if n == 1 { vec![h0] } else { (0..n).map(|i| h0 + (h1 - h0) * i as f64 / (n - 1) as f64).collect() };
    let mut points = Vec::with_capacity(n);
    let mut x = x0;
    for &h in &levels {
        x = transport_level(field, x, h, min_grad)?;
        points.push(x);
    }
    let residuals = levels.iter().zip(&points).map(|(h, p)| (field.value(*p) - h).abs()).collect();
    Ok(TransversalCurve { levels, points, residuals })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChartVariant {
    /// Levels are values of `H`; base points from a transversal curve.
    Standard,
    /// Levels are `I ∈ (0, π/2)` with base points `(π/2, I)` and `H = sin I`
    /// (cellular reference cell only).
    Cellular,
}

/// Discrete chart on a `n_theta × n_levels` grid.
#[derive(Clone, Debug)]
pub struct ActionAngleChart {
    pub variant: ChartVariant,
    pub field: HamiltonianField,
    pub cell: usize,
    pub theta: Vec<f64>,
    pub levels: Vec<f64>,
    pub base: Vec<Vec2>,
    pub periods: Vec<f64>,
    /// `Φ(θᵢ, level_l)` at `l * n_theta + i`, unwrapped along the orbit.
    pub positions: Vec<Vec2>,
    /// `∂_θ Φ` and `∂_level Φ` per node.
    pub d_theta: Vec<Vec2>,
    pub d_level: Vec<Vec2>,
    pub jacobian: Vec<f64>,
    /// `Φ(1, level) − Φ(0, level)`: zero for contractible orbits, a lattice
    /// vector for orbits winding around the torus.
    pub winding: Vec<Vec2>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartHeader {
    pub variant: ChartVariant,
    pub field: String,
    pub cell: usize,
    pub n_theta: usize,
    pub n_levels: usize,
    pub level_range: (f64, f64),
    pub periods: Vec<f64>,
    pub orbit_tolerance: f64,
    pub level_step: f64,
}

/// Half-width of the level stencil used for `∂_level Φ`.
fn level_step(variant: ChartVariant, levels: &[f64]) -> f64 {
    let span = match variant {
        ChartVariant::Standard => levels.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - levels.iter().cloned().fold(f64::INFINITY, f64::min),
        ChartVariant::Cellular => 1.0,
    };
    2e-3 * span.max(1e-3).min(1.0)
}

fn orbit_opts() -> ReturnOptions {
    ReturnOptions { tol: ORBIT_TOL, separatrix_guard: false, h_max: 0.25, ..Default::default() }
}

/// Period and orbit samples `X(θᵢT, x)`.
fn trace(field: &HamiltonianField, cell: &Cell, x: Vec2, theta: &[f64]) -> Result<(f64, Vec<Vec2>, Vec2)> {
    let t = return_period_from(field, cell, x, &orbit_opts())?.period;
    let mut times: Vec<f64> = theta.iter().map(|th| th * t).collect();
    times.push(t);
    let mut pts = sample_orbit(field, x, &times, OdeOptions::with_tol(ORBIT_TOL).h_max(0.25))?;
    let end = pts.pop().expect("period sample");
    let d = sub(end, x);
    let winding = if field.domain().is_periodic() {
        let p = 2.0 * std::f64::consts::PI;
        [(d[0] / p).round() * p, (d[1] / p).round() * p]
    } else {
        [0.0, 0.0]
    };
    Ok((t, pts, winding))
}

impl ActionAngleChart {
    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    fn base_point(&self, level: f64) -> Result<Vec2> {
        match self.variant {
            ChartVariant::Cellular => Ok([FRAC_PI_2, level]),
            ChartVariant::Standard => {
                let l = nearest(&self.levels, level);
                transport_level(&self.field, self.base[l], level, 1e-10)
            }
        }
    }

    /// Level coordinate of `x`: `H(x)`, or `arcsin H(x)` for the cellular chart.
    pub fn level_of(&self, x: Vec2) -> f64 {
        let h = self.field.value(x);
        match self.variant {
            ChartVariant::Standard => h,
            ChartVariant::Cellular => h.clamp(-1.0, 1.0).asin(),
        }
    }

    /// `H` on the given level coordinate.
    pub fn h_of_level(&self, level: f64) -> f64 {
        match self.variant {
            ChartVariant::Standard => level,
            ChartVariant::Cellular => level.sin(),
        }
    }

    /// Linear interpolation of `Φ(·, level_l)` in `θ`, with wrap at `θ = 1`.
    fn on_level(&self, l: usize, theta: f64) -> Vec2 {
        let m = self.n_theta();
        let u = theta.rem_euclid(1.0) * m as f64;
        let i = (u.floor() as usize).min(m - 1);
        let w = u - i as f64;
        let a = self.positions[l * m + i];
        let b = if i + 1 < m {
            self.positions[l * m + i + 1]
        } else {
            let p = self.positions[l * m];
            [p[0] + self.winding[l][0], p[1] + self.winding[l][1]]
        };
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    /// Bilinear interpolation of `Φ(θ, level)`.
    pub fn eval(&self, theta: f64, level: f64) -> Result<Vec2> {
        let (l, w) = self.bracket(level)?;
        Ok(self.eval_bracketed(l, w, theta))
    }

    fn eval_bracketed(&self, l: usize, w: f64, theta: f64) -> Vec2 {
        if w == 0.0 {
            return self.on_level(l, theta);
        }
        let a = self.on_level(l, theta);
        let b = self.on_level(l + 1, theta);
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    fn bracket(&self, level: f64) -> Result<(usize, f64)> {
        let lv = &self.levels;
        let (lo, hi) = (lv[0], lv[lv.len() - 1]);
        if !(level >= lo && level <= hi) {
            return Err(MixlabError::OutsideChart(format!("level {level} outside [{lo}, {hi}]")));
        }
        if lv.len() == 1 {
            return Ok((0, 0.0));
        }
        let l = match lv.iter().position(|&v| v > level) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => lv.len() - 2,
        };
        Ok((l, ((level - lv[l]) / (lv[l + 1] - lv[l])).clamp(0.0, 1.0)))
    }

    fn dist2(&self, a: Vec2, b: Vec2) -> f64 {
        let d = sub(a, b);
        let d = if self.field.domain().is_periodic() { [wrap_pi(d[0]), wrap_pi(d[1])] } else { d };
        d[0] * d[0] + d[1] * d[1]
    }

    /// Period at an arbitrary level inside the chart, by return time.
    pub fn period_at(&self, level: f64) -> Result<f64> {
        self.bracket(level)?;
        let x = self.base_point(level)?;
        Ok(return_period_from(&self.field, &self.cell_struct(), x, &orbit_opts())?.period)
    }

    fn cell_struct(&self) -> Cell {
        self.field.cells().get(self.cell).cloned().unwrap_or(Cell {
            id: self.cell,
            section: [self.base[0], self.base[self.base.len() - 1]],
            center: None,
        })
    }

    /// Maximum over nodes of `||det DΦ| − J_expected| / J_expected`, where
    /// the expected Jacobian is `T(h)` (standard) or `T̃(I) cos I` (cellular).
    pub fn jacobian_error(&self) -> f64 {
        let m = self.n_theta();
        let mut worst: f64 = 0.0;
        for l in 0..self.n_levels() {
            let expect = match self.variant {
                ChartVariant::Standard => self.periods[l],
                ChartVariant::Cellular => self.periods[l] * self.levels[l].cos(),
            };
            for i in 0..m {
                worst = worst.max((self.jacobian[l * m + i].abs() - expect).abs() / expect);
            }
        }
        worst
    }

    /// `Σ |det DΦ| Δθ Δlevel` by the trapezoid rule in the level direction.
    pub fn area(&self) -> f64 {
        let m = self.n_theta();
        let per_level: Vec<f64> =
            (0..self.n_levels()).map(|l| self.jacobian[l * m..(l + 1) * m].iter().map(|j| j.abs()).sum::<f64>() / m as f64).collect();
        crate::quad::trapezoid(&self.levels, &per_level)
    }

    /// `(max |∂θΦ̃| / ((1 + |ln I|)(π/2 − I)), max I |∂_I Φ̃|)` over the chart.
    /// The logarithm is bracketed because `|ln I|` itself vanishes at `I = 1`.
    pub fn derivative_bounds(&self) -> (f64, f64) {
        let m = self.n_theta();
        let mut a: f64 = 0.0;
        let mut b: f64 = 0.0;
        for l in 0..self.n_levels() {
            let s = self.levels[l];
            for i in 0..m {
                a = a.max(norm(self.d_theta[l * m + i]) / ((1.0 + s.ln().abs()) * (FRAC_PI_2 - s)));
                b = b.max(s * norm(self.d_level[l * m + i]));
            }
        }
        (a, b)
    }

    /// Largest `|H(Φ(θᵢ, level)) − h(level)|` over the nodes.
    pub fn level_residual(&self) -> f64 {
        let m = self.n_theta();
        let mut worst: f64 = 0.0;
        for l in 0..self.n_levels() {
            let h = self.h_of_level(self.levels[l]);
            for i in 0..m {
                worst = worst.max((self.field.value(self.positions[l * m + i]) - h).abs());
            }
        }
        worst
    }

    pub fn header(&self) -> ChartHeader {
        ChartHeader {
            variant: self.variant,
            field: self.field.name(),
            cell: self.cell,
            n_theta: self.n_theta(),
            n_levels: self.n_levels(),
            level_range: (self.levels[0], self.levels[self.n_levels() - 1]),
            periods: self.periods.clone(),
            orbit_tolerance: ORBIT_TOL,
            level_step: level_step(self.variant, &self.levels),
        }
    }

    /// CSV with columns `theta,level,x1,x2,jac`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "theta,level,x1,x2,jac")?;
        let m = self.n_theta();
        for l in 0..self.n_levels() {
            for i in 0..m {
                let p = self.positions[l * m + i];
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt_f64(self.theta[i]),
                    fmt_f64(self.levels[l]),
                    fmt_f64(p[0]),
                    fmt_f64(p[1]),
                    fmt_f64(self.jacobian[l * m + i])
                )?;
            }
        }
        Ok(())
    }
}

fn nearest(v: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, a) in v.iter().enumerate() {
        if (a - x).abs() < (v[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// One level of a chart: period, positions, and both partial derivatives.
struct LevelRow {
    period: f64,
    positions: Vec<Vec2>,
    d_theta: Vec<Vec2>,
    d_level: Vec<Vec2>,
    winding: Vec2,
}

fn build_row(
    field: &HamiltonianField,
    cell: &Cell,
    theta: &[f64],
    base_at: &(dyn Fn(f64) -> Result<Vec2> + Sync),
    level: f64,
    step: f64,
) -> Result<LevelRow> {
    let x = base_at(level)?;
    let (period, positions, winding) = trace(field, cell, x, theta)?;
    // ∂θΦ = T b(Φ) exactly
    let d_theta = positions.iter().map(|&p| {
        let v = field.velocity(p);
        [period * v[0], period * v[1]]
    });
    let d_theta: Vec<Vec2> = d_theta.collect();
    // ∂_level Φ by the fourth-order centred stencil over neighbouring orbits
    let weights = [(-2.0, 1.0 / 12.0), (-1.0, -8.0 / 12.0), (1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)];
    let mut d_level = vec![[0.0, 0.0]; theta.len()];
    for (o, wgt) in weights {
        let xo = base_at(level + o * step)?;
        let (_, pts, _) = trace(field, cell, xo, theta)?;
        for (d, p) in d_level.iter_mut().zip(&pts) {
            d[0] += wgt * p[0] / step;
            d[1] += wgt * p[1] / step;
        }
    }
    Ok(LevelRow { period, positions, d_theta, d_level, winding })
}

fn assemble(
    field: &HamiltonianField,
    variant: ChartVariant,
    cell: usize,
    levels: Vec<f64>,
    base: Vec<Vec2>,
    n_theta: usize,
    base_at: &(dyn Fn(f64) -> Result<Vec2> + Sync),
) -> Result<ActionAngleChart> {
    if n_theta < 4 {
        return Err(invalid("need at least 4 angle nodes"));
    }
    let theta: Vec<f64> = (0..n_theta).map(|i| i as f64 / n_theta as f64).collect();
    let cell_struct = field.cells().get(cell).cloned().unwrap_or(Cell {
        id: cell,
        section: [base[0], base[base.len() - 1]],
        center: None,
    });
    let step = level_step(variant, &levels);
    let rows: Vec<Result<LevelRow>> =
        levels.par_iter().map(|&lv| build_row(field, &cell_struct, &theta, base_at, lv, step)).collect();
    let mut chart = ActionAngleChart {
        variant,
        field: field.clone(),
        cell,
        theta,
        levels,
        base,
        periods: Vec::new(),
        positions: Vec::new(),
        d_theta: Vec::new(),
        d_level: Vec::new(),
        jacobian: Vec::new(),
        winding: Vec::new(),
    };
    for r in rows {
        let r = r?;
        chart.periods.push(r.period);
        for (a, b) in r.d_theta.iter().zip(&r.d_level) {
            chart.jacobian.push(a[0] * b[1] - a[1] * b[0]);
        }
        chart.positions.extend(r.positions);
        chart.d_theta.extend(r.d_theta);
        chart.d_level.extend(r.d_level);
        chart.winding.push(r.winding);
    }
    Ok(chart)
}

/// Chart `Φ(θ, h) = X(θT(h), x(h))` over the levels of `curve`.
pub fn build_chart(field: &HamiltonianField, curve: &TransversalCurve, n_theta: usize) -> Result<ActionAngleChart> {
    let x0 = curve.points[0];
    let cell = field.cell_index(x0);
    let levels = curve.levels.clone();
    let nodes = curve.points.clone();
    let lv = levels.clone();
    let base_at = move |h: f64| -> Result<Vec2> {
        let l = nearest(&lv, h);
        transport_level(field, nodes[l], h, 1e-10)
    };
    assemble(field, ChartVariant::Standard, cell, levels, curve.points.clone(), n_theta, &base_at)
}

/// Cellular chart `Φ̃(θ, I) = X(θT̃(I), (π/2, I))` on `n_levels` equispaced
/// values of `I` in `[i0, i1] ⊂ (0, π/2)`.
pub fn build_cellular_chart(i0: f64, i1: f64, n_theta: usize, n_levels: usize) -> Result<ActionAngleChart> {
    if !(0.0 < i0 && i0 <= i1 && i1 < FRAC_PI_2) || n_levels == 0 || (n_levels == 1 && i0 != i1) {
        return Err(invalid("need 0 < I₀ ≤ I₁ < π/2"));
    }
    let field = HamiltonianField::cellular();
    let levels: Vec<f64> = if n_levels == 1 {
        vec![i0]
    } else {
        (0..n_levels).map(|i| i0 + (i1 - i0) * i as f64 / (n_levels - 1) as f64).collect()
    };
    let step = level_step(ChartVariant::Cellular, &levels);
    if i0 - 2.0 * step <= 0.0 || i1 + 2.0 * step >= FRAC_PI_2 {
        return Err(invalid(format!("I range must stay {} away from 0 and π/2", 2.0 * step)));
    }
    let base = levels.iter().map(|&i| [FRAC_PI_2, i]).collect();
    let base_at = |i: f64| -> Result<Vec2> { Ok([FRAC_PI_2, i]) };
    assemble(&field, ChartVariant::Cellular, 0, levels, base, n_theta, &base_at)
}

/// `(θ, level)` of `x` from the discrete chart: nearest node on the
/// interpolated orbit, then projection onto the adjacent chart segments.
pub fn angle_of_point(chart: &ActionAngleChart, x: Vec2) -> Result<(f64, f64)> {
    if chart.field.cell_index(x) != chart.cell {
        return Err(MixlabError::OutsideChart(format!("{x:?} lies in another cell")));
    }
    let level = chart.level_of(x);
    let (l, w) = chart.bracket(level)?;
    let m = chart.n_theta();
    let mut best = (0usize, f64::INFINITY);
    for i in 0..m {
        let d = chart.dist2(chart.eval_bracketed(l, w, chart.theta[i]), x);
        if d < best.1 {
            best = (i, d);
        }
    }
    // Φ(·, level) is piecewise linear in θ: project onto the two segments at the nearest node
    let h = 1.0 / m as f64;
    let centre = chart.theta[best.0];
    let mut th = centre;
    let mut d_best = best.1;
    for th0 in [centre - h, centre] {
        let p = chart.eval_bracketed(l, w, th0);
        let q = chart.eval_bracketed(l, w, th0 + h);
        let seg = sub(q, p);
        let mut to_x = sub(x, p);
        if chart.field.domain().is_periodic() {
            to_x = [wrap_pi(to_x[0]), wrap_pi(to_x[1])];
        }
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        if len2 == 0.0 {
            continue;
        }
        let u = ((to_x[0] * seg[0] + to_x[1] * seg[1]) / len2).clamp(0.0, 1.0);
        let cand = th0 + u * h;
        let d = chart.dist2(chart.eval_bracketed(l, w, cand), x);
        if d < d_best {
            d_best = d;
            th = cand;
        }
    }
    Ok((th.rem_euclid(1.0), level))
}

/// [`angle_of_point`] followed by flow refinement: with `τ = θT(h)`, the
/// point `X(−τ, x)` is pulled onto the base point `x(h)` by Newton steps
/// along the flow, giving `θ` to integrator accuracy.
pub fn angle_of_point_refined(chart: &ActionAngleChart, x: Vec2) -> Result<(f64, f64)> {
    let (theta0, level) = angle_of_point(chart, x)?;
    let base = chart.base_point(level)?;
    let period = chart.period_at(level)?;
    let opts = OdeOptions::with_tol(ORBIT_TOL).h_max(0.25);
    let mut tau = theta0 * period;
    for _ in 0..8 {
        let y = flow_map(&chart.field, x, -tau, opts)?;
        let b = chart.field.velocity(base);
        let mut d = sub(y, base);
        if chart.field.domain().is_periodic() {
            d = [wrap_pi(d[0]), wrap_pi(d[1])];
        }
        let s = (d[0] * b[0] + d[1] * b[1]) / (b[0] * b[0] + b[1] * b[1]);
        tau += s;
        if s.abs() < 1e-13 * period {
            break;
        }
    }
    Ok(((tau / period).rem_euclid(1.0), level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::period::period_agm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cellular_curve(h0: f64, h1: f64, n: usize) -> TransversalCurve {
        let f = HamiltonianField::cellular();
        build_transversal(&f, h0, h1, [FRAC_PI_2, h0.asin()], n, None).unwrap()
    }

    #[test]
    fn transversal_matches_closed_forms() {
        let c = cellular_curve(0.2, 0.8, 13);
        for (h, p) in c.levels.iter().zip(&c.points) {
            assert!((p[0] - FRAC_PI_2).abs() < 1e-8 && (p[1] - h.asin()).abs() < 1e-8);
        }
        assert!(c.residuals.iter().all(|&r| r <= 1e-9));

        let f = HamiltonianField::cellular();
        let single = build_transversal(&f, 0.4, 0.4, [FRAC_PI_2, 0.4f64.asin()], 1, None).unwrap();
        assert_eq!(single.points.len(), 1);
        assert!(single.residuals[0] < 1e-15);

        let shear = HamiltonianField::shear_cos();
        let s = build_transversal(&shear, -0.5, 0.5, [1.0, 0.5f64.acos()], 9, None).unwrap();
        for (h, p) in s.levels.iter().zip(&s.points) {
            assert!((p[0] - 1.0).abs() < 1e-10);
            assert!((p[1] - (-h).acos()).abs() < 1e-8);
        }
    }

    #[test]
    fn transversal_stalls_outside_good_annulus() {
        let f = HamiltonianField::cellular();
        let r = build_transversal(&f, 0.5, 0.999, [FRAC_PI_2, 0.5f64.asin()], 5, Some(0.5));
        assert!(matches!(r, Err(MixlabError::Stall { .. })));
    }

    #[test]
    fn standard_chart_identities() {
        let f = HamiltonianField::cellular();
        let chart = build_chart(&f, &cellular_curve(0.2, 0.8, 16), 32).unwrap();
        assert!(chart.jacobian_error() <= 1e-4, "{}", chart.jacobian_error());
        assert!(chart.level_residual() <= 1e-8);
        for (l, &h) in chart.levels.iter().enumerate() {
            assert_eq!(chart.positions[l * 32], chart.base[l]);
            assert!(((chart.periods[l] - period_agm(h).unwrap()) / chart.periods[l]).abs() < 1e-9);
        }
        // area of {0.2 < H < 0.8} in the reference cell, by quadrature in x₁
        let area_above = |h: f64| {
            let a = h.asin();
            crate::quad::integrate(|x: f64| std::f64::consts::PI - 2.0 * (h / x.sin()).asin(), a, std::f64::consts::PI - a, 1e-12, 0.0)
                .unwrap()
        };
        let exact = area_above(0.2) - area_above(0.8);
        assert!(((chart.area() - exact) / exact).abs() < 1e-3, "{} vs {exact}", chart.area());
    }

    #[test]
    fn cellular_chart_weight_and_periods() {
        let chart = build_cellular_chart(0.1, 1.4, 32, 20).unwrap();
        assert!(chart.jacobian_error() <= 1e-4, "{}", chart.jacobian_error());
        for (l, &i) in chart.levels.iter().enumerate() {
            let t = period_agm(i.sin()).unwrap();
            assert!(((chart.periods[l] - t) / t).abs() <= 1e-8);
        }
        let (a, b) = chart.derivative_bounds();
        assert!(a.is_finite() && b.is_finite() && a < 50.0 && b < 50.0, "{a} {b}");
    }

    #[test]
    fn angle_round_trip_and_evolution() {
        let f = HamiltonianField::cellular();
        let chart = build_chart(&f, &cellular_curve(0.2, 0.8, 24), 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (th, h) = angle_of_point(&chart, chart.base[3]).unwrap();
        assert!(th.min(1.0 - th) < 1e-9 && (h - chart.levels[3]).abs() < 1e-12);
        for _ in 0..200 {
            let (th, lv) = (rng.gen::<f64>(), rng.gen_range(0.25..0.75));
            let x = chart.eval(th, lv).unwrap();
            let (th2, _) = angle_of_point(&chart, x).unwrap();
            let back = chart.eval(th2, chart.level_of(x)).unwrap();
            assert!(norm(sub(back, x)) < 2e-3, "{th} {lv}");
        }
        for _ in 0..10 {
            let x = [rng.gen_range(0.9..2.2), rng.gen_range(0.9..1.4)];
            let h = f.value(x);
            if !(0.22..0.78).contains(&h) {
                continue;
            }
            let t = 7.3;
            let y = flow_map(&f, x, t, OdeOptions::with_tol(1e-13)).unwrap();
            let (a, _) = angle_of_point_refined(&chart, x).unwrap();
            let (b, _) = angle_of_point_refined(&chart, y).unwrap();
            let d = (b - a - t / period_agm(h).unwrap()).rem_euclid(1.0);
            assert!(d.min(1.0 - d) <= 1e-5, "{d}");
        }
        assert!(matches!(angle_of_point(&chart, [4.0, 1.0]), Err(MixlabError::OutsideChart(_))));
        assert!(matches!(angle_of_point(&chart, [FRAC_PI_2, FRAC_PI_2]), Err(MixlabError::OutsideChart(_))));
    }

    #[test]
    fn winding_orbits_of_the_shear() {
        let f = HamiltonianField::shear_cos();
        let curve = build_transversal(&f, -0.5, 0.5, [0.0, 0.5f64.acos()], 6, None).unwrap();
        let chart = build_chart(&f, &curve, 16).unwrap();
        for (l, w) in chart.winding.iter().enumerate() {
            assert!((w[0].abs() - 2.0 * std::f64::consts::PI).abs() < 1e-9 && w[1] == 0.0, "{l}: {w:?}");
        }
        assert!(chart.jacobian_error() < 1e-6);
        let x = [1.0, 1.3];
        // X(τ, (0, x₂)) = (−τ sin x₂, x₂), so θ = −x₁/2π mod 1
        let (th, _) = angle_of_point_refined(&chart, x).unwrap();
        assert!((th - (1.0 - 1.0 / (2.0 * std::f64::consts::PI))).abs() < 1e-10, "{th}");
        let (th0, _) = angle_of_point(&chart, x).unwrap();
        assert!((th0 - th).abs() < 1e-3);
    }

    #[test]
    fn csv_dump_shape() {
        let chart = build_cellular_chart(0.3, 0.6, 8, 3).unwrap();
        let mut buf = Vec::new();
        chart.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 24);
        assert!(s.starts_with("theta,level,x1,x2,jac\n"));
        let header = serde_json::to_value(chart.header()).unwrap();
        assert_eq!(header["variant"], "cellular");
    }
}
