//! Melnikov potential
//!
//! ```text
//! L(I, φ, s) = −∫ [h(p0(t), q0(t), I, φ + ωt, s + t) − h(0, 0, I, φ + ωt, s + t)] dt
//! ```
//!
//! For a finite trigonometric perturbation the t-integral factors through the harmonics e^{i(lφ+ms)}:
//! L = Σ Re[C_{l,m}(I) e^{i(lφ+ms)}], so every (φ, s)-derivative is exact once the complex
//! amplitudes C_{l,m}(I) are known. One vector-valued quadrature per action value gives all of them
//! together with ∂_I C_{l,m}, which carries the ω'(I)·t chain-rule term.

use crate::model::{Separatrix, SystemSpec};
use crate::quadrature::{integrate, QuadOptions};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum MelnikovError {
    #[error("quadrature tolerance not met (best achieved {best:.3e})")]
    Tolerance { best: f64 },
    #[error("action {0} outside the configured range [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Value and derivatives of L at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelnikovJet {
    pub point: (f64, f64, f64),
    pub value: f64,
    /// (∂φL, ∂sL)
    pub grad: [f64; 2],
    /// Index 0 is φ, index 1 is s.
    pub hess: [[f64; 2]; 2],
    pub third: [[[f64; 2]; 2]; 2],
    pub d_i: f64,
    pub tol_achieved: f64,
}

/// One (l, m) harmonic of L at a fixed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub l: i32,
    pub m: i32,
    pub c: Complex64,
    /// ∂_I of `c`.
    pub c_i: Complex64,
}

/// L(I, ·, ·) at a fixed action as a finite Fourier series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovSlice {
    pub action: f64,
    pub omega: f64,
    pub domega: f64,
    pub harmonics: Vec<Harmonic>,
    pub tol_achieved: f64,
}

impl MelnikovSlice {
    /// ∂φ^a ∂s^b L.
    pub fn deriv(&self, a: u32, b: u32, phi: f64, s: f64) -> f64 {
        let mut acc = 0.0;
        for h in &self.harmonics {
            let f = Complex64::new(0.0, h.l as f64).powu(a) * Complex64::new(0.0, h.m as f64).powu(b);
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            let e = Complex64::from_polar(1.0, h.l as f64 * phi + h.m as f64 * s);
            acc += (h.c * f * e).re;
        }
        acc
    }

    pub fn value(&self, phi: f64, s: f64) -> f64 {
        self.harmonics.iter().map(|h| (h.c * Complex64::from_polar(1.0, h.l as f64 * phi + h.m as f64 * s)).re).sum()
    }

    /// ∂φ^a ∂s^b ∂_I L.
    pub fn deriv_i(&self, a: u32, b: u32, phi: f64, s: f64) -> f64 {
        let mut acc = 0.0;
        for h in &self.harmonics {
            let f = Complex64::new(0.0, h.l as f64).powu(a) * Complex64::new(0.0, h.m as f64).powu(b);
            let e = Complex64::from_polar(1.0, h.l as f64 * phi + h.m as f64 * s);
            acc += (h.c_i * f * e).re;
        }
        acc
    }

    pub fn jet(&self, phi: f64, s: f64) -> MelnikovJet {
        // Accumulate all derivatives from one exponential per harmonic.
        let mut d = [[0.0; 4]; 4];
        let mut d_i = 0.0;
        for h in &self.harmonics {
            let e = h.c * Complex64::from_polar(1.0, h.l as f64 * phi + h.m as f64 * s);
            let il = Complex64::new(0.0, h.l as f64);
            let im = Complex64::new(0.0, h.m as f64);
            let mut pa = Complex64::new(1.0, 0.0);
            for row in d.iter_mut() {
                let mut pb = Complex64::new(1.0, 0.0);
                for cell in row.iter_mut() {
                    *cell += (e * pa * pb).re;
                    pb *= im;
                }
                pa *= il;
            }
            d_i += (h.c_i * Complex64::from_polar(1.0, h.l as f64 * phi + h.m as f64 * s)).re;
        }
        let mut third = [[[0.0; 2]; 2]; 2];
        for (i, plane) in third.iter_mut().enumerate() {
            for (j, row) in plane.iter_mut().enumerate() {
                for (k, cell) in row.iter_mut().enumerate() {
                    let a = [i, j, k].iter().filter(|x| **x == 0).count();
                    *cell = d[a][3 - a];
                }
            }
        }
        MelnikovJet {
            point: (self.action, phi, s),
            value: d[0][0],
            grad: [d[1][0], d[0][1]],
            hess: [[d[2][0], d[1][1]], [d[1][1], d[0][2]]],
            third,
            d_i,
            tol_achieved: self.tol_achieved,
        }
    }

    pub fn max_order(&self) -> i32 {
        self.harmonics.iter().map(|h| h.l.abs() + h.m.abs()).max().unwrap_or(0)
    }
}

/// Anything that can produce Melnikov slices.
pub trait MelnikovModel: Sync {
    fn slice(&self, action: f64) -> Result<MelnikovSlice, MelnikovError>;
    fn omega(&self, action: f64) -> f64;
    fn domega(&self, action: f64) -> f64;
    fn action_range(&self) -> (f64, f64);
}

#[derive(Debug, Clone)]
struct Member {
    coeff: f64,
    a: Vec<u32>,
    b: u32,
    k: Vec<i32>,
    phase: f64,
    conj: bool,
}

#[derive(Debug, Clone)]
struct Group {
    l: i32,
    m: i32,
    members: Vec<Member>,
}

/// Direct quadrature backend.
#[derive(Debug, Clone)]
pub struct Melnikov {
    pub spec: SystemSpec,
    pub sep: Separatrix,
    pub tol: f64,
    groups: Vec<Group>,
    pub t_cut: f64,
}

impl Melnikov {
    pub fn new(spec: &SystemSpec, sep: &Separatrix, tol: f64) -> Result<Self, MelnikovError> {
        if !(tol > 0.0) {
            return Err(MelnikovError::Invalid("tol must be positive".into()));
        }
        let mut groups: Vec<Group> = Vec::new();
        for t in &spec.perturbation.terms {
            let (l, m) = (t.indices.phi, t.indices.t);
            let flip = l < 0 || (l == 0 && m < 0);
            let (cl, cm) = if flip { (-l, -m) } else { (l, m) };
            let member = Member { coeff: t.coeff, a: t.indices.p.clone(), b: t.indices.i, k: t.indices.q.clone(), phase: t.phase, conj: flip };
            match groups.iter_mut().find(|g| g.l == cl && g.m == cm) {
                Some(g) => g.members.push(member),
                None => groups.push(Group { l: cl, m: cm, members: vec![member] }),
            }
        }
        groups.sort_by_key(|g| (g.l, g.m));
        let mut m = Melnikov { spec: spec.clone(), sep: sep.clone(), tol, groups, t_cut: sep.t_cut(tol / 10.0) };
        // The ∂_I integrand grows like t; lengthen the window until both tails fit in tol/4.
        let (lo, hi) = spec.i_range;
        let worst = |m: &Melnikov| {
            let (a, b) = m.tail_bound(lo);
            let (c, d) = m.tail_bound(hi);
            a.max(b).max(c).max(d)
        };
        while worst(&m) > tol / 4.0 && m.t_cut < 1e4 {
            m.t_cut += 1.0 / sep.lambda;
        }
        Ok(m)
    }

    /// Upper bound of the integrand tail beyond ±t_cut, for the amplitude and its I-derivative.
    fn tail_bound(&self, action: f64) -> (f64, f64) {
        let lam = self.sep.lambda;
        let c = self.sep.decay_const;
        let big_t = self.t_cut;
        let w1 = self.spec.domega(action).abs();
        let e = (-lam * big_t).exp();
        let base = e / lam;
        let weighted = e * (big_t / lam + 1.0 / (lam * lam));
        let (mut tb, mut ti) = (0.0, 0.0);
        for g in &self.groups {
            for mb in &g.members {
                let kn: f64 = mb.k.iter().map(|x| x.abs() as f64).sum();
                let kn = if mb.a.iter().all(|a| *a == 0) { kn } else { kn.max(1.0) };
                let amp = mb.coeff.abs() * action.abs().powi(mb.b as i32) * c * kn;
                let damp = if mb.b > 0 { mb.coeff.abs() * mb.b as f64 * action.abs().powi(mb.b as i32 - 1) * c * kn } else { 0.0 };
                tb += 2.0 * amp * base;
                ti += 2.0 * (damp * base + amp * g.l.abs() as f64 * w1 * weighted);
            }
        }
        (tb, ti)
    }

    fn amplitudes(&self, action: f64) -> Result<MelnikovSlice, MelnikovError> {
        let omega = self.spec.omega(action);
        let domega = self.spec.domega(action);
        let d = self.spec.d;
        let ng = self.groups.len();
        if ng == 0 {
            return Ok(MelnikovSlice { action, omega, domega, harmonics: vec![], tol_achieved: 0.0 });
        }
        let mut p = vec![0.0; d];
        let mut q = vec![0.0; d];
        let integrand = |t: f64, out: &mut [f64]| {
            self.sep.eval(t, &mut p, &mut q);
            for (gi, g) in self.groups.iter().enumerate() {
                let mut x = Complex64::new(0.0, 0.0);
                let mut dx = Complex64::new(0.0, 0.0);
                for mb in &g.members {
                    let kq: f64 = mb.k.iter().zip(q.iter()).map(|(k, v)| *k as f64 * v).sum();
                    let pa: f64 = mb.a.iter().zip(p.iter()).map(|(a, v)| v.powi(*a as i32)).product();
                    let on_sep = Complex64::from_polar(pa, kq + mb.phase);
                    let mut diff = if mb.a.iter().all(|a| *a == 0) { on_sep - Complex64::from_polar(1.0, mb.phase) } else { on_sep };
                    if mb.conj {
                        diff = diff.conj();
                    }
                    let ib = action.powi(mb.b as i32);
                    x -= mb.coeff * ib * diff;
                    if mb.b > 0 {
                        dx -= mb.coeff * mb.b as f64 * action.powi(mb.b as i32 - 1) * diff;
                    }
                }
                let nu = g.l as f64 * omega + g.m as f64;
                let e = Complex64::from_polar(1.0, nu * t);
                let v = x * e;
                let vi = (dx + x * Complex64::new(0.0, g.l as f64 * domega * t)) * e;
                out[4 * gi] = v.re;
                out[4 * gi + 1] = v.im;
                out[4 * gi + 2] = vi.re;
                out[4 * gi + 3] = vi.im;
            }
        };
        let span = 2.0 * self.t_cut;
        let max_nu = self.groups.iter().map(|g| (g.l as f64 * omega + g.m as f64).abs()).fold(1.0, f64::max);
        let initial = ((span * max_nu / std::f64::consts::PI).ceil() as usize).clamp(8, 400);
        let opts = QuadOptions { abs_tol: self.tol / 4.0, rel_tol: 0.0, initial_panels: initial, max_panels: 20_000 };
        let res = integrate(integrand, -self.t_cut, self.t_cut, 4 * ng, opts).map_err(|e| {
            let (tb, ti) = self.tail_bound(action);
            MelnikovError::Tolerance { best: e.error + tb.max(ti) }
        })?;
        let (tb, ti) = self.tail_bound(action);
        let harmonics = self
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| Harmonic {
                l: g.l,
                m: g.m,
                c: Complex64::new(res.value[4 * gi], res.value[4 * gi + 1]),
                c_i: Complex64::new(res.value[4 * gi + 2], res.value[4 * gi + 3]),
            })
            .collect();
        let tol_achieved = res.error + tb.max(ti);
        Ok(MelnikovSlice { action, omega, domega, harmonics, tol_achieved })
    }
}

impl MelnikovModel for Melnikov {
    fn slice(&self, action: f64) -> Result<MelnikovSlice, MelnikovError> {
        let (lo, hi) = self.spec.i_range;
        let slack = 1e-9 * (hi - lo);
        if action < lo - slack || action > hi + slack {
            return Err(MelnikovError::OutOfRange(action, lo, hi));
        }
        self.amplitudes(action)
    }
    fn omega(&self, action: f64) -> f64 {
        self.spec.omega(action)
    }
    fn domega(&self, action: f64) -> f64 {
        self.spec.domega(action)
    }
    fn action_range(&self) -> (f64, f64) {
        self.spec.i_range
    }
}

/// Chebyshev interpolant of the harmonic amplitudes over the action range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelnikovTable {
    range: (f64, f64),
    rotor: crate::model::Rotor,
    modes: Vec<(i32, i32)>,
    /// Per harmonic: Chebyshev coefficients of Re c, Im c, Re c_i, Im c_i.
    coeffs: Vec<[Vec<f64>; 4]>,
    /// Largest discrepancy against direct quadrature at off-node check points.
    pub table_error: f64,
    pub quad_tol: f64,
}

impl MelnikovTable {
    pub fn build(direct: &Melnikov, nodes: usize) -> Result<Self, MelnikovError> {
        let (a, b) = direct.spec.i_range;
        let n = nodes.max(4);
        let xs: Vec<f64> = (0..n).map(|k| (std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos()).collect();
        let slices: Vec<MelnikovSlice> = xs.par_iter().map(|x| direct.slice(0.5 * (a + b) + 0.5 * (b - a) * x)).collect::<Result<_, _>>()?;
        let modes: Vec<(i32, i32)> = direct.groups.iter().map(|g| (g.l, g.m)).collect();
        let mut coeffs = Vec::with_capacity(modes.len());
        for hi in 0..modes.len() {
            let vals: [Vec<f64>; 4] = [
                slices.iter().map(|s| s.harmonics[hi].c.re).collect(),
                slices.iter().map(|s| s.harmonics[hi].c.im).collect(),
                slices.iter().map(|s| s.harmonics[hi].c_i.re).collect(),
                slices.iter().map(|s| s.harmonics[hi].c_i.im).collect(),
            ];
            coeffs.push(vals.map(|v| chebyshev_coeffs(&v)));
        }
        let mut table = MelnikovTable { range: (a, b), rotor: direct.spec.rotor.clone(), modes, coeffs, table_error: 0.0, quad_tol: direct.tol };
        let checks: Vec<f64> = (0..9).map(|k| a + (b - a) * (k as f64 + 0.37) / 9.0).collect();
        let errs: Vec<f64> = checks
            .par_iter()
            .map(|x| {
                let exact = direct.slice(*x)?;
                let approx = table.slice(*x)?;
                let mut e: f64 = 0.0;
                for (h1, h2) in exact.harmonics.iter().zip(&approx.harmonics) {
                    e = e.max((h1.c - h2.c).norm()).max((h1.c_i - h2.c_i).norm());
                }
                Ok(e)
            })
            .collect::<Result<_, MelnikovError>>()?;
        table.table_error = errs.into_iter().fold(0.0, f64::max);
        Ok(table)
    }
}

fn chebyshev_coeffs(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    (0..n)
        .map(|j| {
            let s: f64 = vals.iter().enumerate().map(|(k, v)| v * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / n as f64).cos()).sum();
            let f = if j == 0 { 1.0 } else { 2.0 };
            f * s / n as f64
        })
        .collect()
}

fn clenshaw(c: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for cj in c.iter().skip(1).rev() {
        let b0 = 2.0 * x * b1 - b2 + cj;
        b2 = b1;
        b1 = b0;
    }
    x * b1 - b2 + c[0]
}

impl MelnikovModel for MelnikovTable {
    fn slice(&self, action: f64) -> Result<MelnikovSlice, MelnikovError> {
        let (a, b) = self.range;
        let slack = 1e-9 * (b - a);
        if action < a - slack || action > b + slack {
            return Err(MelnikovError::OutOfRange(action, a, b));
        }
        let x = ((2.0 * action - a - b) / (b - a)).clamp(-1.0, 1.0);
        let harmonics = self
            .modes
            .iter()
            .zip(&self.coeffs)
            .map(|((l, m), c)| Harmonic {
                l: *l,
                m: *m,
                c: Complex64::new(clenshaw(&c[0], x), clenshaw(&c[1], x)),
                c_i: Complex64::new(clenshaw(&c[2], x), clenshaw(&c[3], x)),
            })
            .collect();
        Ok(MelnikovSlice { action, omega: self.rotor.omega(action), domega: self.rotor.domega(action), harmonics, tol_achieved: self.quad_tol.max(self.table_error) })
    }
    fn omega(&self, action: f64) -> f64 {
        self.rotor.omega(action)
    }
    fn domega(&self, action: f64) -> f64 {
        self.rotor.domega(action)
    }
    fn action_range(&self) -> (f64, f64) {
        self.range
    }
}

/// L and its derivatives at (I, φ, s) by direct quadrature.
pub fn melnikov_jet(spec: &SystemSpec, sep: &Separatrix, point: (f64, f64, f64), tol: f64) -> Result<MelnikovJet, MelnikovError> {
    let m = Melnikov::new(spec, sep, tol)?;
    Ok(m.slice(point.0)?.jet(point.1, point.2))
}

/// Row-major (φ outer, s inner) table of jets on a uniform torus grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelnikovGrid {
    pub action: f64,
    pub n_phi: usize,
    pub n_s: usize,
    pub jets: Vec<MelnikovJet>,
    pub tol: f64,
    pub tol_achieved: f64,
}

pub fn melnikov_grid(spec: &SystemSpec, sep: &Separatrix, action: f64, grid: (usize, usize), tol: f64) -> Result<MelnikovGrid, MelnikovError> {
    let m = Melnikov::new(spec, sep, tol)?;
    grid_from_model(&m, action, grid, tol)
}

pub fn grid_from_model<M: MelnikovModel + ?Sized>(m: &M, action: f64, grid: (usize, usize), tol: f64) -> Result<MelnikovGrid, MelnikovError> {
    let (n_phi, n_s) = grid;
    if n_phi < 8 || n_s < 8 {
        return Err(MelnikovError::Invalid("grid must be at least 8×8".into()));
    }
    let slice = m.slice(action)?;
    let tau = std::f64::consts::TAU;
    let jets: Vec<MelnikovJet> = (0..n_phi * n_s)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n_s, idx % n_s);
            slice.jet(tau * i as f64 / n_phi as f64, tau * j as f64 / n_s as f64)
        })
        .collect();
    Ok(MelnikovGrid { action, n_phi, n_s, jets, tol, tol_achieved: slice.tol_achieved })
}

impl MelnikovGrid {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(["I", "phi", "s", "L", "dLdphi", "dLds", "dLdI", "H11", "H12", "H22"])?;
        for j in &self.jets {
            let rec = [j.point.0, j.point.1, j.point.2, j.value, j.grad[0], j.grad[1], j.d_i, j.hess[0][0], j.hess[0][1], j.hess[1][1]];
            wr.write_record(rec.iter().map(|x| format!("{x:.17e}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "I": self.action,
            "n_phi": self.n_phi,
            "n_s": self.n_s,
            "tol": self.tol,
            "tol_achieved": self.tol_achieved,
            "columns": ["I", "phi", "s", "L", "dLdphi", "dLds", "dLdI", "H11", "H12", "H22"],
        })
    }

    pub fn save(&self, csv_path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(csv_path)?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(std::io::Error::other)?;
        std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&self.sidecar())?)
    }
}

/// A(ν) = 2πν / sinh(πν/2), the pendulum amplitude of a (cos q − 1)-type harmonic with frequency ν.
pub fn pendulum_amplitude(nu: f64) -> f64 {
    if nu.abs() < 1e-8 {
        4.0
    } else {
        2.0 * std::f64::consts::PI * nu / (std::f64::consts::PI * nu / 2.0).sinh()
    }
}
