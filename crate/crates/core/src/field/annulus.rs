//! Numerical search for a band of regular levels on which `|b|` stays
//! bounded away from zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{norm, Cellular, HamiltonianField};
use crate::error::{MixlabError, Result};
use crate::lagrangian::{flow_map, return_period, sample_orbit, section_point, ReturnOptions};
use crate::ode::OdeOptions;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAnnulus {
    pub h_lo: f64,
    pub h_hi: f64,
    /// Sampled lower bound of `|b|` over the band.
    pub c0: f64,
    pub cell: usize,
}

impl LevelAnnulus {
    pub fn contains(&self, h: f64) -> bool {
        h > self.h_lo && h < self.h_hi
    }
}

/// Bracket `(2h(1−h), 2(1−h²))` of `|b|²` on the cellular orbit `{H = h}`.
pub fn speed_bounds(h: f64) -> Result<(f64, f64)> {
    if !(h > 0.0 && h < 1.0) {
        return Err(MixlabError::LevelOutOfRange { level: h, range: "(0, 1)".into() });
    }
    Ok((2.0 * h * (1.0 - h), 2.0 * (1.0 - h * h)))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnnulusOptions {
    /// Scanned range as fractions of the cell's level span, measured from
    /// the outer end of the section.
    pub level_range: (f64, f64),
    pub n_levels: usize,
    /// Orbit samples per level.
    pub n_samples: usize,
    /// Window width as a fraction of the scanned range.
    pub width: f64,
    /// Levels with `c_S` below this are treated as degenerate.
    pub floor: f64,
}

impl Default for AnnulusOptions {
    fn default() -> Self {
        AnnulusOptions { level_range: (0.05, 0.95), n_levels: 19, n_samples: 256, width: 0.4, floor: 1e-3 }
    }
}

/// `c_S(h) = min |b|` over the closed orbit `{H = h}` of `cell`: one period
/// of samples, with the smallest sample refined by golden-section search.
pub fn min_speed_on_level(field: &HamiltonianField, cell_idx: usize, h: f64, n_samples: usize) -> Result<f64> {
    let cell = field
        .cells()
        .get(cell_idx)
        .cloned()
        .ok_or_else(|| MixlabError::InvalidArgument(format!("field has no cell {cell_idx}")))?;
    let opts = ReturnOptions { separatrix_guard: false, tol: 1e-11, ..Default::default() };
    let period = return_period(field, &cell, h, &opts)?.period;
    let x0 = section_point(field, &cell, h)?;
    let n = n_samples.max(8);
    let dt = period / n as f64;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let ode = OdeOptions::with_tol(1e-11);
    let pts = sample_orbit(field, x0, &times, ode)?;
    let speeds: Vec<f64> = pts.iter().map(|&p| norm(field.velocity(p))).collect();
    let (i_min, _) = speeds
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let start = pts[(i_min + n - 1) % n];
    let speed_at = |tau: f64| -> f64 {
        match flow_map(field, start, tau, ode) {
            Ok(x) => norm(field.velocity(x)),
            Err(_) => f64::INFINITY,
        }
    };
    let refined = golden_min(speed_at, 0.0, 2.0 * dt, 1e-10 * period);
    Ok(refined.min(speeds[i_min]))
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
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
    fc.min(fd)
}

/// Scans `c_S(h)` over a level grid of `cell` and returns the window of
/// levels with the largest sampled floor.
///
/// The four cellular quarter-cells are related by translations under which
/// `H` changes sign, so only the reference cell is traced.
pub fn find_good_annulus(field: &HamiltonianField, cell: usize, opts: &AnnulusOptions) -> Result<LevelAnnulus> {
    if field.name() == "cellular" && cell != 0 && cell < 4 {
        let a = find_good_annulus(field, 0, opts)?;
        return Ok(if Cellular::cell_sign(cell) > 0.0 {
            LevelAnnulus { cell, ..a }
        } else {
            LevelAnnulus { h_lo: -a.h_hi, h_hi: -a.h_lo, c0: a.c0, cell }
        });
    }
    let cells = field.cells();
    let c = cells
        .get(cell)
        .ok_or_else(|| MixlabError::DegenerateField(format!("field `{}` has no cell {cell}", field.name())))?;
    let ha = field.value(c.section[0]);
    let hb = field.value(c.section[1]);
    if !((hb - ha).abs() > 1e-12) {
        return Err(MixlabError::DegenerateField("H is constant along the cell section (no regular values)".into()));
    }
    let (u0, u1) = opts.level_range;
    if !(0.0 < u0 && u0 < u1 && u1 < 1.0) || opts.n_levels < 2 {
        return Err(MixlabError::InvalidArgument("level range must satisfy 0 < lo < hi < 1 with n_levels ≥ 2".into()));
    }
    let levels: Vec<f64> = (0..opts.n_levels)
        .map(|i| {
            let u = u0 + (u1 - u0) * i as f64 / (opts.n_levels - 1) as f64;
            ha + u * (hb - ha)
        })
        .collect();
    let cs: Vec<f64> = levels
        .par_iter()
        .map(|&h| min_speed_on_level(field, cell, h, opts.n_samples).unwrap_or(0.0))
        .collect();
    if cs.iter().all(|&v| v < opts.floor) {
        return Err(MixlabError::DegenerateField(format!(
            "every scanned level has c_S below the floor {}",
            opts.floor
        )));
    }
    let k = ((opts.width * (opts.n_levels - 1) as f64).round() as usize).clamp(1, opts.n_levels - 1);
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..opts.n_levels - k {
        let m = cs[i..=i + k].iter().cloned().fold(f64::INFINITY, f64::min);
        if m > best.1 {
            best = (i, m);
        }
    }
    let (i, c0) = best;
    if c0 < opts.floor {
        return Err(MixlabError::DegenerateField("no window of regular levels clears the floor".into()));
    }
    let (a, b) = (levels[i], levels[i + k]);
    Ok(LevelAnnulus { h_lo: a.min(b), h_hi: a.max(b), c0, cell })
}
