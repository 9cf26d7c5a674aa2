//! Hamiltonian velocity fields `b = ∇⊥H = (−∂₂H, ∂₁H)` and their point evaluators.
//!
//! Built-in fields carry analytic derivatives. Fields given only through a
//! value evaluator ([`FnField`]) fall back to central differences.

mod annulus;
mod builtin;
pub mod expr;

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MixlabError, Result};

pub use annulus::{find_good_annulus, min_speed_on_level, speed_bounds, AnnulusOptions, LevelAnnulus};
pub use builtin::{Cellular, ShearCos};
pub use expr::ExprField;

/// A point or vector in the plane.
pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add_scaled(a: Vec2, s: f64, b: Vec2) -> Vec2 {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

/// Wraps an angle-like coordinate difference into `[-π, π)`.
#[inline]
pub fn wrap_pi(d: f64) -> f64 {
    (d + PI).rem_euclid(2.0 * PI) - PI
}

/// Symmetric 2×2 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }
}

/// Where a field lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// `[0, 2π)²` with periodic identification.
    Torus,
    /// The closed cell `[0, π]²`.
    Rectangle,
    /// The whole plane; used for local models around elliptic points.
    Plane,
}

impl Domain {
    /// Characteristic length used to scale finite-difference steps.
    pub fn size(&self) -> f64 {
        match self {
            Domain::Torus => 2.0 * PI,
            Domain::Rectangle => PI,
            Domain::Plane => 1.0,
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Domain::Torus)
    }

    pub fn contains(&self, x: Vec2) -> bool {
        match self {
            Domain::Rectangle => (0.0..=PI).contains(&x[0]) && (0.0..=PI).contains(&x[1]),
            _ => x[0].is_finite() && x[1].is_finite(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Smoothness {
    C1,
    C2,
    C3,
}

/// An invariant region of the flow together with a segment crossing its
/// orbits transversally (H strictly monotone along it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    /// Segment from `section[0]` to `section[1]`.
    pub section: [Vec2; 2],
    /// Elliptic point bounding the family of closed orbits, when known.
    pub center: Option<Vec2>,
}

impl Cell {
    pub fn section_point(&self, s: f64) -> Vec2 {
        let [a, b] = self.section;
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    }

    pub fn section_direction(&self) -> Vec2 {
        let [a, b] = self.section;
        let d = sub(b, a);
        let n = norm(d);
        [d[0] / n, d[1] / n]
    }
}

/// A scalar Hamiltonian `H` on a two-dimensional domain.
///
/// Implementors must be pure: every evaluator may be called concurrently.
pub trait Hamiltonian: Send + Sync {
    fn name(&self) -> String;

    fn domain(&self) -> Domain;

    fn smoothness(&self) -> Smoothness {
        Smoothness::C3
    }

    fn value(&self, x: Vec2) -> f64;

    /// `∇H(x)`. The default is a central difference with step
    /// `ε^{1/3}` scaled by the domain size.
    fn gradient(&self, x: Vec2) -> Vec2 {
        let h = fd_step(self.domain());
        let dx = (self.value([x[0] + h, x[1]]) - self.value([x[0] - h, x[1]])) / (2.0 * h);
        let dy = (self.value([x[0], x[1] + h]) - self.value([x[0], x[1] - h])) / (2.0 * h);
        [dx, dy]
    }

    fn hessian(&self, x: Vec2) -> Sym2 {
        let h = fd_step(self.domain());
        let f = |a: f64, b: f64| self.value([x[0] + a, x[1] + b]);
        let f0 = f(0.0, 0.0);
        Sym2 {
            xx: (f(h, 0.0) - 2.0 * f0 + f(-h, 0.0)) / (h * h),
            yy: (f(0.0, h) - 2.0 * f0 + f(0.0, -h)) / (h * h),
            xy: (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h),
        }
    }

    /// `b(x) = ∇⊥H(x) = (−∂₂H, ∂₁H)`.
    fn velocity(&self, x: Vec2) -> Vec2 {
        let g = self.gradient(x);
        [-g[1], g[0]]
    }

    /// Known invariant cells. Empty when the field does not advertise any.
    fn cells(&self) -> Vec<Cell> {
        Vec::new()
    }

    /// Index of the invariant cell containing `x`, used to separate
    /// streamlines that share an H value.
    fn cell_index(&self, _x: Vec2) -> usize {
        0
    }
}

pub(crate) fn fd_step(domain: Domain) -> f64 {
    f64::EPSILON.cbrt() * domain.size()
}

/// Shared, thread-safe handle to a Hamiltonian.
#[derive(Clone)]
pub struct HamiltonianField(Arc<dyn Hamiltonian>);

impl fmt::Debug for HamiltonianField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("HamiltonianField").field(&self.0.name()).finish()
    }
}

impl std::ops::Deref for HamiltonianField {
    type Target = dyn Hamiltonian;
    fn deref(&self) -> &Self::Target {
        &*self.0
    }
}

impl HamiltonianField {
    pub fn new<H: Hamiltonian + 'static>(h: H) -> Self {
        HamiltonianField(Arc::new(h))
    }

    pub fn cellular() -> Self {
        Self::new(Cellular)
    }

    pub fn shear_cos() -> Self {
        Self::new(ShearCos)
    }

    /// Parses a field spec: `cellular`, `shear-cos`, or `expr:<formula>`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        Self::from_spec_with_domain(spec, None)
    }

    pub fn from_spec_with_domain(spec: &str, domain: Option<Domain>) -> Result<Self> {
        let spec = spec.trim();
        match spec {
            "cellular" => Ok(Self::cellular()),
            "shear-cos" => Ok(Self::shear_cos()),
            _ => match spec.strip_prefix("expr:") {
                Some(src) => {
                    let field = ExprField::parse(src)?;
                    let field = match domain {
                        Some(d) => field.with_domain(d),
                        None => field,
                    };
                    Ok(Self::new(field))
                }
                None => Err(MixlabError::InvalidArgument(format!(
                    "unknown field spec `{spec}` (expected cellular, shear-cos or expr:<formula>)"
                ))),
            },
        }
    }
}

/// A field defined only through a value evaluator; derivatives are taken
/// by central differences.
pub struct FnField<F> {
    name: String,
    domain: Domain,
    f: F,
    cells: Vec<Cell>,
}

impl<F> FnField<F>
where
    F: Fn(Vec2) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, domain: Domain, f: F) -> Self {
        FnField { name: name.into(), domain, f, cells: Vec::new() }
    }

    pub fn with_cells(mut self, cells: Vec<Cell>) -> Self {
        self.cells = cells;
        self
    }
}

impl<F> Hamiltonian for FnField<F>
where
    F: Fn(Vec2) -> f64 + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::C1
    }

    fn value(&self, x: Vec2) -> f64 {
        (self.f)(x)
    }

    fn cells(&self) -> Vec<Cell> {
        self.cells.clone()
    }
}

/// Free-function form of [`Hamiltonian::velocity`].
pub fn eval_velocity(field: &HamiltonianField, x: Vec2) -> Vec2 {
    field.velocity(x)
}
