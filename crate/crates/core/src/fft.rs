//! Two-dimensional real FFT on an `n × n` periodic grid.
//!
//! Physical layout: `values[j * n + i]` at `x = (2πi/n, 2πj/n)`.
//! Spectral layout: `coeffs[j * (n/2 + 1) + m]` for `k = (m, signed(j))`,
//! normalised so that `ρ(x) = Σ ρ̂_k e^{ik·x}`.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

/// Signed wavenumber of row or column index `j` on an `n`-point grid.
pub fn signed(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Index of signed wavenumber `k` on an `n`-point grid.
pub fn unsigned(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

pub struct Fft2 {
    n: usize,
    nh: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    row_real: Vec<f64>,
    row_cplx: Vec<Complex64>,
    col: Vec<Complex64>,
    work: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        assert!(n >= 4 && n % 2 == 0, "grid size must be even and at least 4");
        let mut rp = RealFftPlanner::<f64>::new();
        let r2c = rp.plan_fft_forward(n);
        let c2r = rp.plan_fft_inverse(n);
        let mut cp = FftPlanner::<f64>::new();
        let col_fwd = cp.plan_fft_forward(n);
        let col_inv = cp.plan_fft_inverse(n);
        let scratch_len = r2c
            .get_scratch_len()
            .max(c2r.get_scratch_len())
            .max(col_fwd.get_inplace_scratch_len())
            .max(col_inv.get_inplace_scratch_len());
        let nh = n / 2 + 1;
        Fft2 {
            n,
            nh,
            r2c,
            c2r,
            col_fwd,
            col_inv,
            row_real: vec![0.0; n],
            row_cplx: vec![Complex64::default(); nh],
            col: vec![Complex64::default(); n],
            work: vec![Complex64::default(); n * nh],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half(&self) -> usize {
        self.nh
    }

    /// Physical values to normalised half-spectrum coefficients.
    pub fn forward(&mut self, phys: &[f64], spec: &mut [Complex64]) {
        let (n, nh) = (self.n, self.nh);
        assert_eq!(phys.len(), n * n);
        assert_eq!(spec.len(), n * nh);
        let scale = 1.0 / (n * n) as f64;
        for j in 0..n {
            self.row_real.copy_from_slice(&phys[j * n..(j + 1) * n]);
            self.r2c
                .process_with_scratch(&mut self.row_real, &mut self.row_cplx, &mut self.scratch)
                .expect("buffer sizes match the plan");
            spec[j * nh..(j + 1) * nh].copy_from_slice(&self.row_cplx);
        }
        for m in 0..nh {
            for j in 0..n {
                self.col[j] = spec[j * nh + m];
            }
            self.col_fwd.process_with_scratch(&mut self.col, &mut self.scratch);
            for j in 0..n {
                spec[j * nh + m] = self.col[j] * scale;
            }
        }
    }

    /// Half-spectrum coefficients to physical values.
    pub fn inverse(&mut self, spec: &[Complex64], phys: &mut [f64]) {
        let (n, nh) = (self.n, self.nh);
        assert_eq!(phys.len(), n * n);
        assert_eq!(spec.len(), n * nh);
        for m in 0..nh {
            for j in 0..n {
                self.col[j] = spec[j * nh + m];
            }
            self.col_inv.process_with_scratch(&mut self.col, &mut self.scratch);
            for j in 0..n {
                self.work[j * nh + m] = self.col[j];
            }
        }
        for j in 0..n {
            self.row_cplx.copy_from_slice(&self.work[j * nh..(j + 1) * nh]);
            self.row_cplx[0].im = 0.0;
            self.row_cplx[nh - 1].im = 0.0;
            self.c2r
                .process_with_scratch(&mut self.row_cplx, &mut self.row_real, &mut self.scratch)
                .expect("buffer sizes match the plan");
            phys[j * n..(j + 1) * n].copy_from_slice(&self.row_real);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_modes_land_on_expected_coefficients() {
        let n = 16;
        let mut fft = Fft2::new(n);
        let phys: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx % n, idx / n);
                let (x, y) = (2.0 * PI * i as f64 / n as f64, 2.0 * PI * j as f64 / n as f64);
                3.0 * (2.0 * x - 3.0 * y).cos() + 0.5
            })
            .collect();
        let mut spec = vec![Complex64::default(); n * fft.half()];
        fft.forward(&phys, &mut spec);
        let nh = fft.half();
        assert!((spec[0].re - 0.5).abs() < 1e-14);
        // cos(2x − 3y) = ½ e^{i(2x−3y)} + ½ e^{−i(2x−3y)}
        let c = spec[unsigned(-3, n) * nh + 2];
        assert!((c.re - 1.5).abs() < 1e-14 && c.im.abs() < 1e-14, "{c}");
        let total: f64 = spec.iter().map(|c| c.norm()).sum();
        assert!((total - 0.5 - 1.5).abs() < 1e-12);
        let mut back = vec![0.0; n * n];
        fft.inverse(&spec, &mut back);
        for (a, b) in phys.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn index_helpers_invert() {
        for n in [8usize, 16] {
            for j in 0..n {
                assert_eq!(unsigned(signed(j, n), n), j);
            }
        }
        assert_eq!(signed(5, 8), -3);
    }
}
