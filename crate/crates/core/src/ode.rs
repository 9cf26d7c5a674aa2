//! Adaptive Dormand–Prince 8(5,3) integrator for small autonomous systems.
//!
//! Intermediate states inside an accepted step are obtained by repeating
//! the step from its start with the shorter step size; the local error of
//! that sub-step is no larger than that of the accepted step, which is
//! what section-crossing refinement needs.

use crate::error::{MixlabError, Result};

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-12, atol: 1e-13, h_max: f64::INFINITY, max_steps: 5_000_000 }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions { rtol: tol, atol: tol * 0.1, ..Default::default() }
    }

    pub fn h_max(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }
}

/// State of an accepted step, kept so that points inside it can be
/// recomputed.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord<const D: usize> {
    pub t0: f64,
    pub y0: [f64; D],
    pub k0: [f64; D],
    pub t1: f64,
    pub y1: [f64; D],
}

pub struct Dop853<const D: usize, F> {
    f: F,
    opts: OdeOptions,
    t: f64,
    y: [f64; D],
    k1: [f64; D],
    h: f64,
    dir: f64,
    facold: f64,
    steps: usize,
    rejected: usize,
    evals: usize,
}

impl<const D: usize, F> Dop853<D, F>
where
    F: Fn(&[f64; D]) -> [f64; D],
{
    /// Starts at `(t0, y0)`; `dir` is `+1` for forward and `-1` for backward integration.
    pub fn new(f: F, t0: f64, y0: [f64; D], dir: f64, opts: OdeOptions) -> Self {
        let k1 = f(&y0);
        let mut s = Dop853 {
            f,
            opts,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            dir: dir.signum(),
            facold: 1e-4,
            steps: 0,
            rejected: 0,
            evals: 1,
        };
        s.h = s.initial_step();
        s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> [f64; D] {
        self.y
    }

    pub fn evals(&self) -> usize {
        self.evals
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.opts.atol + self.opts.rtol * a.abs().max(b.abs())
    }

    fn initial_step(&mut self) -> f64 {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..D {
            let sk = self.scale(self.y[i], self.y[i]);
            d0 += (self.y[i] / sk).powi(2);
            d1 += (self.k1[i] / sk).powi(2);
        }
        let (d0, d1) = ((d0 / D as f64).sqrt(), (d1 / D as f64).sqrt());
        let mut h0 = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.opts.h_max);
        let mut y1 = self.y;
        for i in 0..D {
            y1[i] += self.dir * h0 * self.k1[i];
        }
        let f1 = (self.f)(&y1);
        self.evals += 1;
        let mut d2 = 0.0;
        for i in 0..D {
            let sk = self.scale(self.y[i], self.y[i]);
            d2 += ((f1[i] - self.k1[i]) / sk).powi(2);
        }
        let d2 = (d2 / D as f64).sqrt() / h0;
        let der = d1.max(d2);
        let h1 = if der <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / der).powf(1.0 / 8.0) };
        (100.0 * h0).min(h1).min(self.opts.h_max)
    }

    /// One trial step of signed size `h` from `(y, k1)`; returns the new
    /// state and the scaled error norm.
    fn trial(&mut self, y: &[f64; D], k1: &[f64; D], h: f64) -> ([f64; D], f64) {
        let f = &self.f;
        let mut k = [[0.0; D]; 12];
        k[0] = *k1;
        let stage = |k: &[[f64; D]; 12], coeffs: &[(usize, f64)]| {
            let mut z = *y;
            for &(j, a) in coeffs {
                for i in 0..D {
                    z[i] += h * a * k[j][i];
                }
            }
            z
        };
        k[1] = f(&stage(&k, &[(0, A21)]));
        k[2] = f(&stage(&k, &[(0, A31), (1, A32)]));
        k[3] = f(&stage(&k, &[(0, A41), (2, A43)]));
        k[4] = f(&stage(&k, &[(0, A51), (2, A53), (3, A54)]));
        k[5] = f(&stage(&k, &[(0, A61), (3, A64), (4, A65)]));
        k[6] = f(&stage(&k, &[(0, A71), (3, A74), (4, A75), (5, A76)]));
        k[7] = f(&stage(&k, &[(0, A81), (3, A84), (4, A85), (5, A86), (6, A87)]));
        k[8] = f(&stage(&k, &[(0, A91), (3, A94), (4, A95), (5, A96), (6, A97), (7, A98)]));
        k[9] = f(&stage(
            &k,
            &[(0, A101), (3, A104), (4, A105), (5, A106), (6, A107), (7, A108), (8, A109)],
        ));
        k[10] = f(&stage(
            &k,
            &[
                (0, A111),
                (3, A114),
                (4, A115),
                (5, A116),
                (6, A117),
                (7, A118),
                (8, A119),
                (9, A1110),
            ],
        ));
        let y12 = stage(
            &k,
            &[
                (0, A121),
                (3, A124),
                (4, A125),
                (5, A126),
                (6, A127),
                (7, A128),
                (8, A129),
                (9, A1210),
                (10, A1211),
            ],
        );
        k[11] = f(&y12);
        self.evals += 11;

        let mut y_new = *y;
        let mut err = 0.0;
        let mut err2 = 0.0;
        for i in 0..D {
            let inc = B1 * k[0][i]
                + B6 * k[5][i]
                + B7 * k[6][i]
                + B8 * k[7][i]
                + B9 * k[8][i]
                + B10 * k[9][i]
                + B11 * k[10][i]
                + B12 * k[11][i];
            y_new[i] = y[i] + h * inc;
            let sk = self.scale(y[i], y_new[i]);
            let e2 = inc - BHH1 * k[0][i] - BHH2 * k[8][i] - BHH3 * k[11][i];
            err2 += (e2 / sk).powi(2);
            let e = ER1 * k[0][i]
                + ER6 * k[5][i]
                + ER7 * k[6][i]
                + ER8 * k[7][i]
                + ER9 * k[8][i]
                + ER10 * k[9][i]
                + ER11 * k[10][i]
                + ER12 * k[11][i];
            err += (e / sk).powi(2);
        }
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let err = h.abs() * err * (1.0 / (deno * D as f64)).sqrt();
        (y_new, err)
    }

    /// Takes one accepted step, never going past `t_limit` (in the
    /// integration direction).
    pub fn step(&mut self, t_limit: f64) -> Result<StepRecord<D>> {
        let mut reject = false;
        loop {
            if self.steps >= self.opts.max_steps {
                return Err(MixlabError::Stall {
                    t: self.t,
                    reason: format!("exceeded {} steps", self.opts.max_steps),
                });
            }
            let remaining = (t_limit - self.t) * self.dir;
            let mut h = self.h.min(self.opts.h_max);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            if h < 1e-14 * self.t.abs().max(1.0) && !last {
                return Err(MixlabError::Stall {
                    t: self.t,
                    reason: format!("step size underflow (h = {h:e})"),
                });
            }
            let (y1, err) = self.trial(&self.y.clone(), &self.k1.clone(), self.dir * h);
            self.steps += 1;
            let fac11 = err.powf(1.0 / 8.0);
            let fac = (fac11 / SAFE).clamp(FACC2, FACC1);
            if err <= 1.0 {
                self.facold = err.max(1e-4);
                let mut h_new = h / fac;
                if reject {
                    h_new = h_new.min(h);
                }
                let rec = StepRecord {
                    t0: self.t,
                    y0: self.y,
                    k0: self.k1,
                    t1: if last { t_limit } else { self.t + self.dir * h },
                    y1,
                };
                self.t = rec.t1;
                self.y = y1;
                self.k1 = (self.f)(&y1);
                self.evals += 1;
                if !last || h_new > self.h {
                    self.h = h_new;
                }
                return Ok(rec);
            }
            reject = true;
            self.rejected += 1;
            self.h = h / FACC1.min(fac11 / SAFE);
            if !self.h.is_finite() {
                self.h = h * 0.1;
            }
        }
    }

    /// State at time `t` inside the step described by `rec`.
    pub fn state_in(&mut self, rec: &StepRecord<D>, t: f64) -> [f64; D] {
        if t == rec.t1 {
            return rec.y1;
        }
        if t == rec.t0 {
            return rec.y0;
        }
        self.trial(&rec.y0, &rec.k0, t - rec.t0).0
    }

    /// Integrates up to exactly `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<[f64; D]> {
        while (t_end - self.t) * self.dir > 0.0 {
            self.step(t_end)?;
        }
        Ok(self.y)
    }
}

/// Brent-style safeguarded root finder on `[a, b]` with `g(a)·g(b) ≤ 0`.
pub fn find_root<G: FnMut(f64) -> f64>(mut g: G, mut a: f64, mut b: f64, xtol: f64) -> f64 {
    let mut fa = g(a);
    let mut fb = g(b);
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return b;
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol * m.signum() };
        fb = g(b);
    }
    b
}

const SAFE: f64 = 0.9;
const FACC1: f64 = 1.0 / 0.333;
const FACC2: f64 = 1.0 / 6.0;

// Butcher tableau of DOP853 (Hairer, Nørsett & Wanner).
const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;

const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;

const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;

const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_one_period() {
        let f = |y: &[f64; 2]| [y[1], -y[0]];
        let mut s = Dop853::new(f, 0.0, [1.0, 0.0], 1.0, OdeOptions::with_tol(1e-12));
        let y = s.advance_to(2.0 * std::f64::consts::PI).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10 && y[1].abs() < 1e-10, "{y:?}");
    }

    #[test]
    fn backward_integration_and_dense_states() {
        let f = |y: &[f64; 1]| [-y[0]];
        let mut s = Dop853::new(f, 1.0, [(-1f64).exp()], -1.0, OdeOptions::with_tol(1e-12));
        let rec = s.step(0.0).unwrap();
        let tm = 0.5 * (rec.t0 + rec.t1);
        let ym = s.state_in(&rec, tm);
        assert!((ym[0] - (-tm).exp()).abs() < 1e-12);
        let y = s.advance_to(0.0).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn brent_finds_cosine_root() {
        let r = find_root(|x| x.cos(), 1.0, 2.0, 1e-15);
        assert!((r - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
    }
}
