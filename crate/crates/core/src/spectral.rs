//! Pseudospectral advection–diffusion `∂ₜρ + b·∇ρ = νΔρ` on the
//! `[0, 2π)²` torus.
//!
//! The state is kept inside the 2/3-rule band `|k₁|, |k₂| ≤ K`, `K = ⌊(n−1)/3⌋`.
//! Time stepping is the integrating-factor (Lawson) RK4 with the exact
//! diffusion factor `e^{−ν|k|²τ}`. When the velocity is a trigonometric
//! polynomial of low degree (every built-in field), `b·∇ρ` is evaluated
//! directly as a short spectral convolution; this coincides with the
//! dealiased physical-space product because no aliasing occurs. Otherwise
//! the product is formed on the grid.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MixlabError, Result};
use crate::fft::{signed, unsigned, Fft2};
use crate::field::{HamiltonianField, LevelAnnulus, Vec2};
use crate::io::fmt_f64;

const TWO_PI: f64 = 2.0 * PI;
const AREA: f64 = 4.0 * PI * PI;
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn grid_point(n: usize, i: usize, j: usize) -> Vec2 {
    [TWO_PI * i as f64 / n as f64, TWO_PI * j as f64 / n as f64]
}

fn check_grid(n: usize) -> Result<()> {
    if n >= 8 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(invalid(format!("grid size must be a power of two ≥ 8, got {n}")))
    }
}

/// Real scalar on the `n × n` torus grid, stored as its normalised
/// half spectrum (see [`crate::fft`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    n: usize,
    pub coeffs: Vec<Complex64>,
    pub time: f64,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Result<Self> {
        check_grid(n)?;
        Ok(ScalarField { n, coeffs: vec![Complex64::default(); n * (n / 2 + 1)], time: 0.0 })
    }

    pub fn from_physical(n: usize, values: &[f64]) -> Result<Self> {
        check_grid(n)?;
        if values.len() != n * n {
            return Err(invalid(format!("expected {} grid values, got {}", n * n, values.len())));
        }
        let mut s = Self::zeros(n)?;
        Fft2::new(n).forward(values, &mut s.coeffs);
        Ok(s)
    }

    /// Samples `f` on the grid.
    pub fn from_fn<F: Fn(Vec2) -> f64 + Sync>(n: usize, f: F) -> Result<Self> {
        check_grid(n)?;
        let mut values = vec![0.0; n * n];
        values.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = f(grid_point(n, i, j));
            }
        });
        Self::from_physical(n, &values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn to_physical(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        Fft2::new(self.n).inverse(&self.coeffs, &mut out);
        out
    }

    /// `ρ̂_k` for any `k` within the grid's Nyquist range.
    pub fn coeff(&self, k1: i64, k2: i64) -> Complex64 {
        let (n, nh) = (self.n, self.half());
        if k1 >= 0 {
            self.coeffs[unsigned(k2, n) * nh + k1 as usize]
        } else {
            self.coeffs[unsigned(-k2, n) * nh + (-k1) as usize].conj()
        }
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    /// `4π² Σ_k w(|k|²) |ρ̂_k|²` over the full spectrum.
    pub fn spectral_sum<W: Fn(f64) -> f64>(&self, w: W) -> f64 {
        let (n, nh) = (self.n, self.half());
        let mut total = 0.0;
        for j in 0..n {
            let k2 = signed(j, n) as f64;
            for m in 0..nh {
                let mult = if m == 0 || m == n / 2 { 1.0 } else { 2.0 };
                let k1 = m as f64;
                total += mult * w(k1 * k1 + k2 * k2) * self.coeffs[j * nh + m].norm_sqr();
            }
        }
        AREA * total
    }

    pub fn l2_norm(&self) -> f64 {
        self.spectral_sum(|_| 1.0).sqrt()
    }

    /// Largest violation of `ρ̂_{−k} = conj ρ̂_k` among the self-paired
    /// columns of the half spectrum.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let (n, nh) = (self.n, self.half());
        let mut worst: f64 = 0.0;
        for m in [0, n / 2] {
            for j in 0..n {
                let a = self.coeffs[j * nh + m];
                let b = self.coeffs[unsigned(-signed(j, n), n) * nh + m].conj();
                worst = worst.max((a - b).norm());
            }
        }
        worst
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        if self.n != other.n {
            return Err(invalid("grid sizes differ"));
        }
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect();
        Ok(ScalarField { n: self.n, coeffs, time: self.time })
    }

    /// Copy with the `k = 0` coefficient removed.
    pub fn without_mean(&self) -> ScalarField {
        let mut out = self.clone();
        out.coeffs[0] = Complex64::default();
        out
    }

    pub fn scaled(&self, c: f64) -> ScalarField {
        ScalarField { n: self.n, coeffs: self.coeffs.iter().map(|a| a * c).collect(), time: self.time }
    }

    /// Writes `<stem>.bin` (row-major little-endian `f64` grid values, `x₁`
    /// fastest) and the sidecar `<stem>.json`.
    pub fn write_snapshot(&self, stem: &Path, field: &str, nu: f64) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(8 * self.n * self.n);
        for v in self.to_physical() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes)?;
        let meta = SnapshotMeta {
            n: self.n,
            time: self.time,
            field: field.to_string(),
            nu,
            layout: "row-major f64 little-endian, index j*n+i at (2πi/n, 2πj/n)".into(),
        };
        fs::write(&json, serde_json::to_string_pretty(&meta)?)?;
        Ok((bin, json))
    }

    /// Reads a snapshot written by [`ScalarField::write_snapshot`]; `path`
    /// may name either file of the pair.
    pub fn read_snapshot(path: &Path) -> Result<(ScalarField, SnapshotMeta)> {
        let meta: SnapshotMeta = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
        let bytes = fs::read(path.with_extension("bin"))?;
        if bytes.len() != 8 * meta.n * meta.n {
            return Err(invalid(format!("snapshot holds {} bytes, expected {}", bytes.len(), 8 * meta.n * meta.n)));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let mut s = ScalarField::from_physical(meta.n, &values)?;
        s.time = meta.time;
        Ok((s, meta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub n: usize,
    pub time: f64,
    pub field: String,
    pub nu: f64,
    pub layout: String,
}

/// Subtracts conditional averages over level sets of `H`: grid points of
/// each invariant cell are sorted by `H` and split into `n_bins` bins of
/// equal point count (equal measure); each bin's mean is removed.
pub fn project_streamline_mean_free(rho: &ScalarField, field: &HamiltonianField, n_bins: usize) -> Result<ScalarField> {
    if n_bins == 0 {
        return Err(invalid("n_bins must be positive"));
    }
    let n = rho.n();
    let mut values = rho.to_physical();
    let bins = streamline_bins(n, field, n_bins);
    for bin in &bins {
        let mean = bin.iter().map(|&p| values[p]).sum::<f64>() / bin.len() as f64;
        for &p in bin {
            values[p] -= mean;
        }
    }
    let mut out = ScalarField::from_physical(n, &values)?;
    out.time = rho.time;
    Ok(out)
}

/// Grid-point index sets of the streamline bins used by the projection.
pub fn streamline_bins(n: usize, field: &HamiltonianField, n_bins: usize) -> Vec<Vec<usize>> {
    let mut by_cell: std::collections::BTreeMap<usize, Vec<(f64, usize)>> = Default::default();
    for j in 0..n {
        for i in 0..n {
            let x = grid_point(n, i, j);
            by_cell.entry(field.cell_index(x)).or_default().push((field.value(x), j * n + i));
        }
    }
    let mut bins = Vec::new();
    for (_, mut pts) in by_cell {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let len = pts.len();
        let mut start = 0;
        for b in 1..=n_bins {
            let mut cut = if b == n_bins { len } else { (b * len / n_bins).max(start) };
            // keep points of (numerically) equal H in one bin
            while cut < len && cut > 0 && pts[cut].0 - pts[cut - 1].0 <= 1e-12 {
                cut += 1;
            }
            if cut > start {
                bins.push(pts[start..cut].iter().map(|p| p.1).collect());
                start = cut;
            }
        }
    }
    bins
}

enum Advection {
    None,
    /// `b̂` is supported on a few wavenumbers `(q₁, q₂, b̂₁, b̂₂)`.
    Sparse(Vec<(i64, i64, Complex64, Complex64)>),
    Grid(Box<GridAdvection>),
}

struct GridAdvection {
    fft: Fft2,
    bx: Vec<f64>,
    by: Vec<f64>,
    sx: Vec<Complex64>,
    sy: Vec<Complex64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

/// Time integrator for one scalar under one field at one diffusivity.
pub struct Solver {
    n: usize,
    kmax: i64,
    pad: i64,
    stride: usize,
    nu: f64,
    cfl: f64,
    max_speed: f64,
    adv: Advection,
    z: Vec<Complex64>,
    ksq: Vec<f64>,
    band: Vec<usize>,
    time: f64,
    cached_dt: f64,
    e_half: Vec<f64>,
    e_full: Vec<f64>,
    work: [Vec<Complex64>; 5],
}

/// Default advective CFL number.
pub const DEFAULT_CFL: f64 = 0.5;

impl Solver {
    pub fn new(field: &HamiltonianField, rho0: &ScalarField, nu: f64) -> Result<Self> {
        if !(nu >= 0.0) {
            return Err(invalid(format!("diffusivity must be non-negative, got {nu}")));
        }
        let n = rho0.n();
        let kmax = ((n - 1) / 3) as i64;
        let mut fft = Fft2::new(n);
        let mut bx = vec![0.0; n * n];
        let mut by = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let v = field.velocity(grid_point(n, i, j));
                bx[j * n + i] = v[0];
                by[j * n + i] = v[1];
            }
        }
        let max_speed = bx.iter().zip(&by).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        let nh = n / 2 + 1;
        let mut bxh = vec![Complex64::default(); n * nh];
        let mut byh = vec![Complex64::default(); n * nh];
        fft.forward(&bx, &mut bxh);
        fft.forward(&by, &mut byh);
        let scale = bxh.iter().chain(&byh).map(|c| c.norm()).fold(0.0, f64::max);
        let mut terms = Vec::new();
        let mut sparse = true;
        if scale > 0.0 {
            'outer: for j in 0..n {
                for m in 0..nh {
                    let (c1, c2) = (bxh[j * nh + m], byh[j * nh + m]);
                    if c1.norm().max(c2.norm()) > 1e-12 * scale {
                        let (q1, q2) = (m as i64, signed(j, n));
                        if q1.abs().max(q2.abs()) > 4 || terms.len() >= 32 {
                            sparse = false;
                            break 'outer;
                        }
                        terms.push((q1, q2, c1, c2));
                        if q1 > 0 {
                            terms.push((-q1, -q2, c1.conj(), c2.conj()));
                        }
                    }
                }
            }
        }
        let pad = terms.iter().map(|t| t.0.abs().max(t.1.abs())).max().unwrap_or(0);
        let adv = if max_speed == 0.0 {
            Advection::None
        } else if sparse {
            Advection::Sparse(terms)
        } else {
            Advection::Grid(Box::new(GridAdvection {
                fft,
                bx,
                by,
                sx: vec![Complex64::default(); n * nh],
                sy: vec![Complex64::default(); n * nh],
                gx: vec![0.0; n * n],
                gy: vec![0.0; n * n],
            }))
        };
        let pad = if matches!(adv, Advection::Sparse(_)) { pad } else { 0 };
        let stride = (2 * (kmax + pad) + 1) as usize;
        let mut s = Solver {
            n,
            kmax,
            pad,
            stride,
            nu,
            cfl: DEFAULT_CFL,
            max_speed,
            adv,
            z: vec![Complex64::default(); stride * stride],
            ksq: vec![0.0; stride * stride],
            band: Vec::new(),
            time: rho0.time,
            cached_dt: f64::NAN,
            e_half: vec![0.0; stride * stride],
            e_full: vec![0.0; stride * stride],
            work: std::array::from_fn(|_| vec![Complex64::default(); stride * stride]),
        };
        for k2 in -kmax..=kmax {
            for k1 in -kmax..=kmax {
                let p = s.idx(k1, k2);
                s.band.push(p);
                s.ksq[p] = (k1 * k1 + k2 * k2) as f64;
                s.z[p] = rho0.coeff(k1, k2);
            }
        }
        Ok(s)
    }

    pub fn with_cfl(mut self, cfl: f64) -> Self {
        self.cfl = cfl;
        self
    }

    fn idx(&self, k1: i64, k2: i64) -> usize {
        let o = self.kmax + self.pad;
        ((k2 + o) as usize) * self.stride + (k1 + o) as usize
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn band_limit(&self) -> i64 {
        self.kmax
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    /// Whether the convolution form of `b·∇ρ` is in use.
    pub fn uses_sparse_advection(&self) -> bool {
        matches!(self.adv, Advection::Sparse(_))
    }

    /// Largest step allowed by `dt ≤ cfl·(2π/n)/max|b|`.
    pub fn dt_limit(&self) -> f64 {
        if self.max_speed == 0.0 {
            f64::INFINITY
        } else {
            self.cfl * TWO_PI / self.n as f64 / self.max_speed
        }
    }

    pub fn state(&self) -> ScalarField {
        let mut s = ScalarField::zeros(self.n).expect("grid validated at construction");
        let nh = s.half();
        for k2 in -self.kmax..=self.kmax {
            for k1 in 0..=self.kmax {
                s.coeffs[unsigned(k2, self.n) * nh + k1 as usize] = self.z[self.idx(k1, k2)];
            }
        }
        s.time = self.time;
        s
    }

    /// `‖ρ‖²_{L²}`.
    pub fn l2_sq(&self) -> f64 {
        AREA * self.band.iter().map(|&p| self.z[p].norm_sqr()).sum::<f64>()
    }

    /// `‖∇ρ‖²_{L²}`.
    pub fn grad_sq(&self) -> f64 {
        AREA * self.band.iter().map(|&p| self.ksq[p] * self.z[p].norm_sqr()).sum::<f64>()
    }

    /// `‖ρ − ρ̄‖²_{Ḣ⁻¹}`.
    pub fn hminus1_sq(&self) -> f64 {
        AREA * self.band.iter().filter(|&&p| self.ksq[p] > 0.0).map(|&p| self.z[p].norm_sqr() / self.ksq[p]).sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        self.z[self.idx(0, 0)].re
    }

    /// `−P(b·∇u)` restricted to the band.
    fn rhs(adv: &mut Advection, geo: &Geometry, u: &[Complex64], out: &mut [Complex64]) {
        match adv {
            Advection::None => {
                for &p in geo.band {
                    out[p] = Complex64::default();
                }
            }
            Advection::Sparse(terms) => {
                let stride = geo.stride as i64;
                for k2 in -geo.kmax..=geo.kmax {
                    for k1 in -geo.kmax..=geo.kmax {
                        let p = geo.idx(k1, k2);
                        let mut acc = Complex64::default();
                        for &(q1, q2, b1, b2) in terms.iter() {
                            let src = (p as i64 - q2 * stride - q1) as usize;
                            let (p1, p2) = ((k1 - q1) as f64, (k2 - q2) as f64);
                            acc += (b1 * p1 + b2 * p2) * u[src];
                        }
                        out[p] = -I * acc;
                    }
                }
            }
            Advection::Grid(g) => {
                let n = geo.n;
                let nh = n / 2 + 1;
                for k2 in -geo.kmax..=geo.kmax {
                    for k1 in 0..=geo.kmax {
                        let v = u[geo.idx(k1, k2)];
                        let q = unsigned(k2, n) * nh + k1 as usize;
                        g.sx[q] = I * (k1 as f64) * v;
                        g.sy[q] = I * (k2 as f64) * v;
                    }
                }
                g.fft.inverse(&g.sx, &mut g.gx);
                g.fft.inverse(&g.sy, &mut g.gy);
                for i in 0..n * n {
                    g.gx[i] = g.bx[i] * g.gx[i] + g.by[i] * g.gy[i];
                }
                g.fft.forward(&g.gx, &mut g.sx);
                for k2 in -geo.kmax..=geo.kmax {
                    for k1 in -geo.kmax..=geo.kmax {
                        let v = if k1 >= 0 {
                            g.sx[unsigned(k2, n) * nh + k1 as usize]
                        } else {
                            g.sx[unsigned(-k2, n) * nh + (-k1) as usize].conj()
                        };
                        out[geo.idx(k1, k2)] = -v;
                    }
                }
                // the scratch spectrum must stay zero outside the band
                for q in g.sx.iter_mut() {
                    *q = Complex64::default();
                }
            }
        }
    }

    fn prepare(&mut self, dt: f64) {
        if dt == self.cached_dt {
            return;
        }
        for &p in &self.band {
            self.e_half[p] = (-self.nu * self.ksq[p] * 0.5 * dt).exp();
            self.e_full[p] = (-self.nu * self.ksq[p] * dt).exp();
        }
        self.cached_dt = dt;
    }

    /// One integrating-factor RK4 step of size `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let limit = self.dt_limit();
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(MixlabError::Cfl { dt, limit });
        }
        self.prepare(dt);
        let geo = Geometry { n: self.n, kmax: self.kmax, pad: self.pad, stride: self.stride, band: &self.band };
        let [a, b, c, d, u] = &mut self.work;
        let (z, eh, ef) = (&mut self.z, &self.e_half, &self.e_full);
        let half = 0.5 * dt;
        Self::rhs(&mut self.adv, &geo, z, a);
        for &p in geo.band {
            u[p] = eh[p] * (z[p] + half * a[p]);
        }
        Self::rhs(&mut self.adv, &geo, u, b);
        for &p in geo.band {
            u[p] = eh[p] * z[p] + half * b[p];
        }
        Self::rhs(&mut self.adv, &geo, u, c);
        for &p in geo.band {
            u[p] = ef[p] * z[p] + dt * eh[p] * c[p];
        }
        Self::rhs(&mut self.adv, &geo, u, d);
        let sixth = dt / 6.0;
        for &p in geo.band {
            z[p] = ef[p] * z[p] + sixth * (ef[p] * a[p] + 2.0 * eh[p] * (b[p] + c[p]) + d[p]);
        }
        // restore exact conjugate symmetry
        for k2 in 0..=self.kmax {
            for k1 in -self.kmax..=self.kmax {
                if k2 == 0 && k1 < 0 {
                    continue;
                }
                let p = geo.idx(k1, k2);
                let q = geo.idx(-k1, -k2);
                let avg = 0.5 * (z[p] + z[q].conj());
                z[p] = avg;
                z[q] = avg.conj();
            }
        }
        self.time += dt;
        Ok(())
    }

    /// Steps to `t_target` with equal steps no larger than the CFL limit,
    /// calling `each` after every step.
    pub fn advance_with<F: FnMut(&Solver)>(&mut self, t_target: f64, mut each: F) -> Result<()> {
        let span = t_target - self.time;
        if span < 0.0 {
            return Err(invalid(format!("cannot step backwards from {} to {t_target}", self.time)));
        }
        if span == 0.0 {
            return Ok(());
        }
        let steps = (span / self.dt_limit()).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let t0 = self.time;
        for s in 0..steps {
            self.step(dt)?;
            if s + 1 == steps {
                self.time = t_target;
            } else {
                self.time = t0 + (s + 1) as f64 * dt;
            }
            each(self);
        }
        Ok(())
    }

    pub fn advance(&mut self, t_target: f64) -> Result<()> {
        self.advance_with(t_target, |_| {})
    }
}

struct Geometry<'a> {
    n: usize,
    kmax: i64,
    pad: i64,
    stride: usize,
    band: &'a [usize],
}

impl Geometry<'_> {
    fn idx(&self, k1: i64, k2: i64) -> usize {
        let o = self.kmax + self.pad;
        ((k2 + o) as usize) * self.stride + (k1 + o) as usize
    }
}

/// One step of size `dt` from `rho`.
pub fn step(rho: &ScalarField, field: &HamiltonianField, nu: f64, dt: f64) -> Result<ScalarField> {
    let mut s = Solver::new(field, rho, nu)?;
    s.step(dt)?;
    Ok(s.state())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
    pub hminus1: f64,
    /// `|Δ‖ρ‖²/Δt + 2ν⟨‖∇ρ‖²⟩|` over the preceding sample interval.
    pub energy_residual: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub samples: Vec<NormSample>,
    pub snapshots: Vec<ScalarField>,
}

pub fn write_norm_csv<W: Write>(samples: &[NormSample], mut w: W) -> Result<()> {
    writeln!(w, "t,l2,h1,hminus1,energy_residual")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_f64(s.t),
            fmt_f64(s.l2),
            fmt_f64(s.h1),
            fmt_f64(s.hminus1),
            fmt_f64(s.energy_residual)
        )?;
    }
    Ok(())
}

fn check_times(times: &[f64], t_end: f64) -> Result<()> {
    if !(t_end >= 0.0) {
        return Err(invalid("t_end must be non-negative"));
    }
    if times.iter().any(|&t| !(0.0..=t_end).contains(&t)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("sample times must be sorted and lie in [0, t_end]"));
    }
    Ok(())
}

/// Advances `rho0` to `t_end`, recording norms (and, if `keep_snapshots`,
/// the state) at each sample time.
pub fn solve(
    rho0: &ScalarField,
    field: &HamiltonianField,
    nu: f64,
    t_end: f64,
    sample_times: &[f64],
    keep_snapshots: bool,
) -> Result<Solution> {
    check_times(sample_times, t_end)?;
    let mut solver = Solver::new(field, rho0, nu)?;
    let mut out = Solution { samples: Vec::new(), snapshots: Vec::new() };
    let mut last_e = solver.l2_sq();
    let mut last_t = solver.time();
    let mut dissipated = 0.0;
    let mut prev_grad = solver.grad_sq();
    let mut prev_t = solver.time();
    let t0 = solver.time();
    for &ts in sample_times {
        solver.advance_with(t0 + ts, |s| {
            let g = s.grad_sq();
            dissipated += nu * (g + prev_grad) * (s.time() - prev_t);
            prev_grad = g;
            prev_t = s.time();
        })?;
        let e = solver.l2_sq();
        let dt = solver.time() - last_t;
        let residual = if dt > 0.0 { ((e - last_e) + dissipated).abs() / dt } else { 0.0 };
        out.samples.push(NormSample {
            t: solver.time(),
            l2: e.sqrt(),
            h1: solver.grad_sq().sqrt(),
            hminus1: solver.hminus1_sq().sqrt(),
            energy_residual: residual,
        });
        if keep_snapshots {
            out.snapshots.push(solver.state());
        }
        last_e = e;
        last_t = solver.time();
        dissipated = 0.0;
    }
    if solver.time() < t0 + t_end {
        solver.advance(t0 + t_end)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapSeries {
    pub t: Vec<f64>,
    /// `‖ρ^ν(t) − ρ(t)‖²_{L²}`.
    pub gap: Vec<f64>,
    /// `‖ρ^ν(t)‖_{L²}` and `‖ρ(t)‖_{L²}` on the same grid.
    pub l2_viscous: Vec<f64>,
    pub l2_inviscid: Vec<f64>,
    pub nu: f64,
    /// Fraction of `‖ρ₀‖²` outside the annulus.
    pub outside_fraction: f64,
    /// Set when the datum is not supported in the annulus.
    pub support_warning: bool,
}

/// Fraction of `‖ρ‖²` (grid quadrature) on points outside the annulus.
pub fn mass_outside(rho: &ScalarField, field: &HamiltonianField, annulus: &LevelAnnulus) -> f64 {
    let n = rho.n();
    let v = rho.to_physical();
    let (mut inside, mut total) = (0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let x = grid_point(n, i, j);
            let w = v[j * n + i] * v[j * n + i];
            total += w;
            if field.cell_index(x) == annulus.cell && annulus.contains(field.value(x)) {
                inside += w;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (total - inside) / total
    }
}

/// Co-evolves the diffusive and inviscid solutions from `rho0` with the
/// same steps and reports their squared L² distance on `t_grid`.
pub fn viscosity_gap(
    rho0: &ScalarField,
    field: &HamiltonianField,
    nu: f64,
    t_grid: &[f64],
    annulus: Option<&LevelAnnulus>,
) -> Result<GapSeries> {
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|&t| t < 0.0) {
        return Err(invalid("t_grid must be sorted and non-negative"));
    }
    let outside_fraction = annulus.map(|a| mass_outside(rho0, field, a)).unwrap_or(0.0);
    let mut visc = Solver::new(field, rho0, nu)?;
    let mut inv = Solver::new(field, rho0, 0.0)?;
    let t0 = rho0.time;
    let mut gap = Vec::with_capacity(t_grid.len());
    let (mut l2_viscous, mut l2_inviscid) = (Vec::new(), Vec::new());
    for &t in t_grid {
        visc.advance(t0 + t)?;
        inv.advance(t0 + t)?;
        let d: f64 = visc.band.iter().map(|&p| (visc.z[p] - inv.z[p]).norm_sqr()).sum();
        gap.push(AREA * d);
        l2_viscous.push(visc.l2_sq().sqrt());
        l2_inviscid.push(inv.l2_sq().sqrt());
    }
    Ok(GapSeries {
        t: t_grid.to_vec(),
        gap,
        l2_viscous,
        l2_inviscid,
        nu,
        outside_fraction,
        support_warning: outside_fraction > 1e-8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Domain, FnField};

    fn zero_field() -> HamiltonianField {
        HamiltonianField::new(FnField::new("zero", Domain::Torus, |_| 0.0))
    }

    #[test]
    fn norms_of_single_modes() {
        let s = ScalarField::from_fn(32, |x| x[0].sin()).unwrap();
        assert!((s.l2_norm().powi(2) - 2.0 * PI * PI).abs() < 1e-12);
        let s4 = ScalarField::from_fn(32, |x| (4.0 * x[0]).sin() + 2.0).unwrap();
        assert!((s4.mean() - 2.0).abs() < 1e-14);
        assert_eq!(s4.without_mean().mean(), 0.0);
        assert!((s4.without_mean().l2_norm() - s.l2_norm()).abs() < 1e-12);
        assert!(s4.conjugate_asymmetry() < 1e-15);
    }

    #[test]
    fn heat_modes_decay_exactly() {
        let (n, nu) = (32, 0.01);
        let rho = ScalarField::from_fn(n, |x| (3.0 * x[0] - 2.0 * x[1]).cos() + 0.25).unwrap();
        let mut s = Solver::new(&zero_field(), &rho, nu).unwrap();
        assert!(!s.uses_sparse_advection());
        s.advance(3.0).unwrap();
        let out = s.state();
        let expect = 0.5 * (-nu * 13.0 * 3.0f64).exp();
        assert!((out.coeff(3, -2).re - expect).abs() < 1e-15);
        assert!((out.mean() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let rho = ScalarField::from_fn(32, |x| x[0].sin()).unwrap();
        let f = HamiltonianField::cellular();
        let mut s = Solver::new(&f, &rho, 0.0).unwrap();
        assert!(s.uses_sparse_advection());
        let lim = s.dt_limit();
        assert!(matches!(s.step(2.0 * lim), Err(MixlabError::Cfl { .. })));
        assert!(s.step(lim).is_ok());
        assert!(step(&rho, &f, 0.0, 10.0).is_err());
    }

    fn grid_path(field: &HamiltonianField, n: usize) -> Advection {
        let mut bx = vec![0.0; n * n];
        let mut by = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let v = field.velocity(grid_point(n, i, j));
                bx[j * n + i] = v[0];
                by[j * n + i] = v[1];
            }
        }
        let nh = n / 2 + 1;
        Advection::Grid(Box::new(GridAdvection {
            fft: Fft2::new(n),
            bx,
            by,
            sx: vec![Complex64::default(); n * nh],
            sy: vec![Complex64::default(); n * nh],
            gx: vec![0.0; n * n],
            gy: vec![0.0; n * n],
        }))
    }

    #[test]
    fn sparse_and_grid_advection_agree() {
        let n = 64;
        let rho = ScalarField::from_fn(n, |x| (x[0] + 2.0 * x[1]).sin() * (x[1].cos() + 0.3).exp()).unwrap();
        for f in [HamiltonianField::cellular(), HamiltonianField::shear_cos()] {
            let mut a = Solver::new(&f, &rho, 1e-3).unwrap();
            let mut b = Solver::new(&f, &rho, 1e-3).unwrap();
            assert!(a.uses_sparse_advection());
            b.adv = grid_path(&f, n);
            a.advance(1.0).unwrap();
            b.advance(1.0).unwrap();
            let diff = a.state().sub(&b.state()).unwrap().l2_norm() / a.state().l2_norm();
            assert!(diff < 1e-12, "{}: {diff}", f.name());
        }
        let g = HamiltonianField::from_spec("expr:sin(x1)*sin(x2) + 0.001*cos(9*x1)").unwrap();
        assert!(!Solver::new(&g, &rho, 0.0).unwrap().uses_sparse_advection());
    }

    #[test]
    fn shear_transport_matches_closed_form() {
        // b = (−sin x₂, 0): ρ(t, x) = e^{i(x₁ + t sin x₂)}, real part
        let n = 256;
        let f = HamiltonianField::shear_cos();
        let rho = ScalarField::from_fn(n, |x| x[0].cos()).unwrap();
        let mut s = Solver::new(&f, &rho, 0.0).unwrap();
        s.advance(1.0).unwrap();
        let exact = ScalarField::from_fn(n, |x| (x[0] + x[1].sin()).cos()).unwrap();
        let err = s.state().sub(&exact).unwrap().l2_norm() / exact.l2_norm();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn transport_conserves_l2_and_mean() {
        let n = 64;
        let f = HamiltonianField::cellular();
        let rho = ScalarField::from_fn(n, |x| (x[0] - 0.7).cos() * (2.0 * x[1]).sin() + 0.1).unwrap();
        let sol = solve(&rho, &f, 0.0, 2.0, &[1.0, 2.0], true).unwrap();
        let l0 = rho.l2_norm();
        for s in &sol.samples {
            assert!((s.l2 - l0).abs() / l0 < 1e-6);
        }
        for snap in &sol.snapshots {
            assert!((snap.mean() - 0.1).abs() < 1e-15);
            assert!(snap.conjugate_asymmetry() < 1e-15);
        }
    }

    #[test]
    fn energy_balance_residual_is_small() {
        let n = 64;
        let f = HamiltonianField::cellular();
        let rho = ScalarField::from_fn(n, |x| (x[0] + 0.3).sin() * x[1].cos()).unwrap();
        let e0 = rho.l2_norm().powi(2);
        let sol = solve(&rho, &f, 1e-2, 2.0, &[0.5, 1.0, 1.5, 2.0], false).unwrap();
        for s in &sol.samples {
            assert!(s.energy_residual <= 1e-5 * e0, "{s:?}");
        }
        assert!(sol.samples[3].l2 < sol.samples[0].l2);
    }

    #[test]
    fn projection_properties() {
        let n = 64;
        let f = HamiltonianField::cellular();
        let of_h = ScalarField::from_fn(n, |x| {
            let h = x[0].sin() * x[1].sin();
            (2.0 * h).exp() - h * h
        })
        .unwrap();
        let p = project_streamline_mean_free(&of_h, &f, 64).unwrap();
        assert!(p.l2_norm() / of_h.l2_norm() < 5e-2);

        let odd = ScalarField::from_fn(n, |x| x[0].cos() * (x[0].sin() * x[1].sin()).powi(2)).unwrap();
        let po = project_streamline_mean_free(&odd, &f, 64).unwrap();
        assert!(po.sub(&odd).unwrap().l2_norm() < 1e-12 * odd.l2_norm().max(1.0));

        let generic = ScalarField::from_fn(n, |x| (x[0] + 0.4).sin() + x[1].cos().powi(3)).unwrap();
        let once = project_streamline_mean_free(&generic, &f, 32).unwrap();
        let twice = project_streamline_mean_free(&once, &f, 32).unwrap();
        assert!(twice.sub(&once).unwrap().l2_norm() < 1e-12);
        let v = once.to_physical();
        for bin in streamline_bins(n, &f, 32) {
            let m: f64 = bin.iter().map(|&p| v[p]).sum::<f64>() / bin.len() as f64;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rho = ScalarField::from_fn(16, |x| x[0].sin() * x[1].cos()).unwrap();
        rho.time = 2.5;
        rho.write_snapshot(&dir.path().join("snap"), "cellular", 1e-3).unwrap();
        let (back, meta) = ScalarField::read_snapshot(&dir.path().join("snap.bin")).unwrap();
        assert_eq!(meta.n, 16);
        assert_eq!(back.time, 2.5);
        assert!(back.sub(&rho).unwrap().l2_norm() < 1e-14);
    }

    #[test]
    fn viscosity_gap_starts_at_zero_and_grows() {
        let n = 32;
        let f = HamiltonianField::cellular();
        let rho = ScalarField::from_fn(n, |x| x[0].cos() * x[1].sin()).unwrap();
        let g = viscosity_gap(&rho, &f, 1e-3, &[0.0, 1.0, 2.0], None).unwrap();
        assert_eq!(g.gap[0], 0.0);
        assert!(g.gap[1] > 0.0 && g.gap[2] > g.gap[1]);
        assert!(!g.support_warning);
    }
}
