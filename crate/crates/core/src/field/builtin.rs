use std::f64::consts::{FRAC_PI_2, PI};

use super::{Cell, Domain, Hamiltonian, Sym2, Vec2};

/// The cellular flow `H = sin x₁ sin x₂` on the 2π-torus.
///
/// The four quarter-cells `(iπ, (i+1)π) × (jπ, (j+1)π)` are translates of
/// the reference cell `(0, π)²`, with `H` flipping sign under each shift
/// by π.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cellular;

impl Cellular {
    /// Sign of `H` on the quarter-cell with the given index.
    pub fn cell_sign(cell: usize) -> f64 {
        let (i, j) = (cell & 1, (cell >> 1) & 1);
        if (i + j) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Translation taking the reference cell `(0, π)²` to `cell`.
    pub fn cell_offset(cell: usize) -> Vec2 {
        let (i, j) = (cell & 1, (cell >> 1) & 1);
        [i as f64 * PI, j as f64 * PI]
    }

    /// Maps a point of `cell` into the reference cell; returns the image
    /// and the sign relating the two H values.
    pub fn to_reference(cell: usize, x: Vec2) -> (Vec2, f64) {
        let o = Self::cell_offset(cell);
        ([x[0] - o[0], x[1] - o[1]], Self::cell_sign(cell))
    }

    pub fn from_reference(cell: usize, x: Vec2) -> Vec2 {
        let o = Self::cell_offset(cell);
        [x[0] + o[0], x[1] + o[1]]
    }
}

impl Hamiltonian for Cellular {
    fn name(&self) -> String {
        "cellular".into()
    }

    fn domain(&self) -> Domain {
        Domain::Torus
    }

    fn value(&self, x: Vec2) -> f64 {
        x[0].sin() * x[1].sin()
    }

    fn gradient(&self, x: Vec2) -> Vec2 {
        let (s1, c1) = x[0].sin_cos();
        let (s2, c2) = x[1].sin_cos();
        [c1 * s2, s1 * c2]
    }

    fn velocity(&self, x: Vec2) -> Vec2 {
        let (s1, c1) = x[0].sin_cos();
        let (s2, c2) = x[1].sin_cos();
        [-s1 * c2, c1 * s2]
    }

    fn hessian(&self, x: Vec2) -> Sym2 {
        let (s1, c1) = x[0].sin_cos();
        let (s2, c2) = x[1].sin_cos();
        Sym2 { xx: -s1 * s2, xy: c1 * c2, yy: -s1 * s2 }
    }

    fn cells(&self) -> Vec<Cell> {
        (0..4)
            .map(|id| {
                let o = Self::cell_offset(id);
                Cell {
                    id,
                    section: [[o[0] + FRAC_PI_2, o[1]], [o[0] + FRAC_PI_2, o[1] + FRAC_PI_2]],
                    center: Some([o[0] + FRAC_PI_2, o[1] + FRAC_PI_2]),
                }
            })
            .collect()
    }

    fn cell_index(&self, x: Vec2) -> usize {
        let i = (x[0].rem_euclid(2.0 * PI) / PI).floor() as usize % 2;
        let j = (x[1].rem_euclid(2.0 * PI) / PI).floor() as usize % 2;
        i + 2 * j
    }
}

/// Shear flow `H = −cos x₂`, `b = (−sin x₂, 0)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ShearCos;

impl Hamiltonian for ShearCos {
    fn name(&self) -> String {
        "shear-cos".into()
    }

    fn domain(&self) -> Domain {
        Domain::Torus
    }

    fn value(&self, x: Vec2) -> f64 {
        -x[1].cos()
    }

    fn gradient(&self, x: Vec2) -> Vec2 {
        [0.0, x[1].sin()]
    }

    fn velocity(&self, x: Vec2) -> Vec2 {
        [-x[1].sin(), 0.0]
    }

    fn hessian(&self, x: Vec2) -> Sym2 {
        Sym2 { xx: 0.0, xy: 0.0, yy: x[1].cos() }
    }

    /// Two bands `x₂ ∈ (0, π)` and `x₂ ∈ (π, 2π)`; orbits are horizontal
    /// circles of the torus.
    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell { id: 0, section: [[0.0, 0.0], [0.0, PI]], center: None },
            Cell { id: 1, section: [[0.0, 2.0 * PI], [0.0, PI]], center: None },
        ]
    }

    fn cell_index(&self, x: Vec2) -> usize {
        (x[1].rem_euclid(2.0 * PI) / PI).floor() as usize % 2
    }
}
