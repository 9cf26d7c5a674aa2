//! Lagrangian orbits of `Ẋ = b(X)`: trajectories, return-map periods and
//! flow-gradient probes.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, MixlabError, Result};
use crate::field::{dot, norm, sub, wrap_pi, Cell, HamiltonianField, Vec2};
use crate::io::fmt_f64;
use crate::ode::{find_root, Dop853, OdeOptions};

/// A time-stamped orbit with Hamiltonian-drift bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<Vec2>,
    /// `max |H(X(t)) − H(X(0))|` over the stored samples.
    pub h_drift: f64,
    /// Per-sample `|H(X(t)) − H(X(0))|`.
    pub drift: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("trajectory has at least the initial point")
    }

    /// CSV with columns `t,x1,x2,H_drift`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x1,x2,H_drift")?;
        for ((t, p), d) in self.times.iter().zip(&self.points).zip(&self.drift) {
            writeln!(w, "{},{},{},{}", fmt_f64(*t), fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*d))?;
        }
        Ok(())
    }

    fn from_samples(field: &HamiltonianField, times: Vec<f64>, points: Vec<Vec2>) -> Self {
        let h0 = field.value(points[0]);
        let drift: Vec<f64> = points.iter().map(|p| (field.value(*p) - h0).abs()).collect();
        let h_drift = drift.iter().cloned().fold(0.0, f64::max);
        Trajectory { times, points, h_drift, drift }
    }
}

fn rhs(field: &HamiltonianField) -> impl Fn(&[f64; 2]) -> [f64; 2] + '_ {
    move |y: &[f64; 2]| field.velocity(*y)
}

/// Integrates `Ẋ = b(X)` from `x0` over `[0, t_end]`, storing every
/// accepted step.
pub fn integrate_orbit(field: &HamiltonianField, x0: Vec2, t_end: f64, tol: f64) -> Result<Trajectory> {
    if !(t_end > 0.0) {
        return Err(invalid(format!("t_end must be positive, got {t_end}")));
    }
    if !field.domain().contains(x0) {
        return Err(invalid(format!("initial point {x0:?} outside the domain")));
    }
    // the step cap keeps the stability polynomial bounded near critical points
    let mut ode = Dop853::new(rhs(field), 0.0, x0, 1.0, OdeOptions::with_tol(tol).h_max(0.5));
    let mut times = vec![0.0];
    let mut points = vec![x0];
    while ode.t() < t_end {
        let rec = ode.step(t_end)?;
        times.push(rec.t1);
        points.push(rec.y1);
    }
    Ok(Trajectory::from_samples(field, times, points))
}

/// Positions `X(t, x0)` at the requested times (any order, any sign).
pub fn sample_orbit(field: &HamiltonianField, x0: Vec2, times: &[f64], opts: OdeOptions) -> Result<Vec<Vec2>> {
    let mut out = vec![x0; times.len()];
    for dir in [1.0, -1.0] {
        let mut idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] * dir > 0.0).collect();
        idx.sort_by(|&a, &b| (times[a] * dir).total_cmp(&(times[b] * dir)));
        if idx.is_empty() {
            continue;
        }
        let mut ode = Dop853::new(rhs(field), 0.0, x0, dir, opts);
        for i in idx {
            out[i] = ode.advance_to(times[i])?;
        }
    }
    Ok(out)
}

/// `X(t, x0)` for a single time (negative times integrate backwards).
pub fn flow_map(field: &HamiltonianField, x0: Vec2, t: f64, opts: OdeOptions) -> Result<Vec2> {
    if t == 0.0 {
        return Ok(x0);
    }
    let mut ode = Dop853::new(rhs(field), 0.0, x0, t.signum(), opts);
    ode.advance_to(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeriodMethod {
    ReturnMap,
    Quadrature,
    Agm,
}

impl PeriodMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PeriodMethod::ReturnMap => "return-map",
            PeriodMethod::Quadrature => "quadrature",
            PeriodMethod::Agm => "agm",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OrbitPeriod {
    pub h: f64,
    pub period: f64,
    pub method: PeriodMethod,
    /// Distance between the launch point and the refined return point.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ReturnOptions {
    pub tol: f64,
    pub max_time: f64,
    /// Reject levels within `1e-4` (separatrix side) or `1e-6` (extremum
    /// side) of the section's end levels, in normalised units.
    pub separatrix_guard: bool,
    pub h_max: f64,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        ReturnOptions { tol: 1e-12, max_time: 1e3, separatrix_guard: true, h_max: 0.5 }
    }
}

/// Point on the cell's section where `H = h`.
pub fn section_point(field: &HamiltonianField, cell: &Cell, h: f64) -> Result<Vec2> {
    let ha = field.value(cell.section[0]);
    let hb = field.value(cell.section[1]);
    let (lo, hi) = (ha.min(hb), ha.max(hb));
    if !(h >= lo && h <= hi) {
        return Err(MixlabError::LevelOutOfRange { level: h, range: format!("[{lo}, {hi}]") });
    }
    let s = find_root(|s| field.value(cell.section_point(s)) - h, 0.0, 1.0, 1e-16);
    Ok(cell.section_point(s))
}

/// Normalised position of level `h` along the section, 0 at `section[0]`.
pub fn level_fraction(field: &HamiltonianField, cell: &Cell, h: f64) -> f64 {
    let ha = field.value(cell.section[0]);
    let hb = field.value(cell.section[1]);
    (h - ha) / (hb - ha)
}

struct Section {
    origin: Vec2,
    dir: Vec2,
    len: f64,
    periodic: bool,
}

impl Section {
    fn new(field: &HamiltonianField, cell: &Cell) -> Self {
        let d = sub(cell.section[1], cell.section[0]);
        Section {
            origin: cell.section[0],
            dir: cell.section_direction(),
            len: norm(d),
            periodic: field.domain().is_periodic(),
        }
    }

    fn offset(&self, x: Vec2) -> Vec2 {
        let d = sub(x, self.origin);
        if self.periodic {
            [wrap_pi(d[0]), wrap_pi(d[1])]
        } else {
            d
        }
    }

    /// Signed normal distance to the section line.
    fn sigma(&self, x: Vec2) -> f64 {
        let d = self.offset(x);
        self.dir[0] * d[1] - self.dir[1] * d[0]
    }

    fn along(&self, x: Vec2) -> f64 {
        dot(self.offset(x), self.dir)
    }
}

/// Time of first signed return to the section line through `x0`.
fn first_return(
    field: &HamiltonianField,
    cell: &Cell,
    x0: Vec2,
    opts: &ReturnOptions,
) -> Result<(f64, Vec2)> {
    let section = Section::new(field, cell);
    let b0 = field.velocity(x0);
    let orient = (section.dir[0] * b0[1] - section.dir[1] * b0[0]).signum();
    if orient == 0.0 || norm(b0) < 1e-14 {
        return Err(MixlabError::Stall { t: 0.0, reason: "launch point is a critical point".into() });
    }
    let s_of = |x: Vec2| orient * section.sigma(x);
    let ode_opts = OdeOptions::with_tol(opts.tol).h_max(opts.h_max);
    let mut ode = Dop853::new(rhs(field), 0.0, x0, 1.0, ode_opts);
    let mut seen_positive = false;
    let mut armed = false;
    let mut prev = s_of(x0);
    while ode.t() < opts.max_time {
        let rec = ode.step(opts.max_time)?;
        let cur = s_of(rec.y1);
        if cur > 0.0 {
            seen_positive = true;
        }
        if armed && prev < 0.0 && cur >= 0.0 && (cur - prev).abs() < PI {
            let along = section.along(rec.y1);
            if along > -0.1 * section.len && along < 1.1 * section.len {
                let t = find_root(|t| s_of(ode.state_in(&rec, t)), rec.t0, rec.t1, 1e-15 * rec.t1.max(1.0));
                let x = ode.state_in(&rec, t);
                return Ok((t, x));
            }
        }
        if seen_positive && cur < 0.0 {
            armed = true;
        }
        prev = cur;
    }
    Err(MixlabError::NoReturn { max_time: opts.max_time })
}

/// Period of the closed orbit `{H = h}` in `cell`, by Poincaré return to
/// the cell's section.
pub fn return_period(field: &HamiltonianField, cell: &Cell, h: f64, opts: &ReturnOptions) -> Result<OrbitPeriod> {
    if opts.separatrix_guard {
        let u = level_fraction(field, cell, h);
        if !(1e-4..=1.0 - 1e-6).contains(&u) {
            return Err(MixlabError::LevelOutOfRange {
                level: h,
                range: "normalised level outside [1e-4, 1 - 1e-6]".into(),
            });
        }
    }
    let x0 = section_point(field, cell, h)?;
    let (t, x) = first_return(field, &Cell { section: [x0, cell.section[1]], ..cell.clone() }, x0, opts)?;
    let d = sub(x, x0);
    let d = if field.domain().is_periodic() { [wrap_pi(d[0]), wrap_pi(d[1])] } else { d };
    Ok(OrbitPeriod { h, period: t, method: PeriodMethod::ReturnMap, residual: norm(d) })
}

/// Period of the orbit through `x0`, detected on the line through `x0`
/// along `∇H(x0)`, which the orbit crosses transversally.
pub fn return_period_from(field: &HamiltonianField, cell: &Cell, x0: Vec2, opts: &ReturnOptions) -> Result<OrbitPeriod> {
    let g = field.gradient(x0);
    let gn = norm(g);
    if gn < 1e-14 {
        return Err(MixlabError::Stall { t: 0.0, reason: "launch point is a critical point".into() });
    }
    let len = norm(sub(cell.section[1], cell.section[0]));
    let local = Cell {
        id: cell.id,
        section: [x0, [x0[0] + len * g[0] / gn, x0[1] + len * g[1] / gn]],
        center: cell.center,
    };
    let (t, x) = first_return(field, &local, x0, opts)?;
    let d = sub(x, x0);
    let d = if field.domain().is_periodic() { [wrap_pi(d[0]), wrap_pi(d[1])] } else { d };
    Ok(OrbitPeriod { h: field.value(x0), period: t, method: PeriodMethod::ReturnMap, residual: norm(d) })
}

/// Finite-difference amplification `|X(t, c + r e₁) − X(t, c + (r+δ) e₁)| / δ`
/// around the elliptic point `center`.
pub fn gradient_growth_probe(
    field: &HamiltonianField,
    center: Vec2,
    r: f64,
    t: f64,
    delta: f64,
    tol: f64,
) -> Result<f64> {
    if delta < 10.0 * tol {
        return Err(invalid(format!("separation {delta:e} below 10·tol = {:e}", 10.0 * tol)));
    }
    if !(r > 0.0) || t < 0.0 {
        return Err(invalid("need r > 0 and t ≥ 0"));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let opts = OdeOptions::with_tol(tol);
    let a = flow_map(field, [center[0] + r, center[1]], t, opts)?;
    let b = flow_map(field, [center[0] + r + delta, center[1]], t, opts)?;
    let d = sub(a, b);
    let d = if field.domain().is_periodic() { [wrap_pi(d[0]), wrap_pi(d[1])] } else { d };
    Ok(norm(d) / delta)
}
