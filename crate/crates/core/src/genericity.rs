//! Localized potential perturbations with prescribed Melnikov derivatives, and the degeneracy scan.
//!
//! A designed perturbation is g(q, φ, t) = R(q) G(φ, t). The window R is concentrated near q0(0),
//! so the Melnikov kernel −[R(q0(t)) − R(0)] approximates a delta at t = 0 and L_g ≈ G near the base
//! point. G is a short trigonometric polynomial whose derivatives at (φ₀, s₀) match the targets.

use crate::melnikov::{Melnikov, MelnikovError, MelnikovModel, MelnikovSlice};
use crate::model::{wrap_pi, PertIndices, PertTerm, Perturbation, Separatrix, SystemSpec};
use crate::quadrature::{integrate_scalar, QuadOptions};
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

/// Δ₃ in a fixed order: (j, k) = orders of ∂φ and ∂s.
pub const DELTA3: [(u32, u32); 10] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];

/// Quadrature tolerance of the verification jets.
pub const VERIFY_TOL: f64 = 1e-10;

/// Condition-number ceiling for the assembled basis matrix.
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GenericityError {
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error("no well-conditioned trigonometric basis for the requested derivatives")]
    Basis,
    #[error("window order {order}: largest derivative deviation {worst:.3e} exceeds delta")]
    Verification { order: usize, worst: f64, deviations: Vec<((u32, u32), f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeTarget {
    /// (I₀, φ₀, s₀)
    pub base: (f64, f64, f64),
    pub targets: Vec<((u32, u32), f64)>,
    pub delta: f64,
}

impl DerivativeTarget {
    pub fn new(base: (f64, f64, f64), targets: Vec<((u32, u32), f64)>, delta: f64) -> Result<Self, GenericityError> {
        if !(delta > 0.0) {
            return Err(GenericityError::Invalid("delta must be positive".into()));
        }
        if targets.is_empty() {
            return Err(GenericityError::Invalid("no targets".into()));
        }
        for (n, ((j, k), c)) in targets.iter().enumerate() {
            if j + k > 3 {
                return Err(GenericityError::Invalid(format!("order {} exceeds 3", j + k)));
            }
            if !c.is_finite() {
                return Err(GenericityError::Invalid("non-finite target".into()));
            }
            if targets[..n].iter().any(|(jk, _)| *jk == (*j, *k)) {
                return Err(GenericityError::Invalid(format!("duplicate target ({j}, {k})")));
            }
        }
        Ok(DerivativeTarget { base, targets, delta })
    }

    /// All ten derivatives of order ≤ 3, in `DELTA3` order.
    pub fn full(base: (f64, f64, f64), values: [f64; 10], delta: f64) -> Result<Self, GenericityError> {
        Self::new(base, DELTA3.iter().copied().zip(values).collect(), delta)
    }

    pub fn order(&self) -> u32 {
        self.targets.iter().map(|((j, k), _)| j + k).max().unwrap_or(0)
    }
}

/// R(q) = −norm · ((1 + cos(q − center)) / 2)^order, truncated where binomial weights drop below 1e-17.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub order: usize,
    pub center: f64,
    pub norm: f64,
    /// Cosine coefficients of ((1 + cos x)/2)^order in cos(kx), k = 0, 1, ...
    pub weights: Vec<f64>,
}

impl Window {
    /// Builds the window centred at q0(0), normalized so the Melnikov kernel has unit mass.
    pub fn new(sep: &Separatrix, order: usize) -> Result<Self, GenericityError> {
        if sep.d != 1 {
            return Err(GenericityError::Invalid("window design needs d = 1".into()));
        }
        if order == 0 {
            return Err(GenericityError::Invalid("window order must be positive".into()));
        }
        let n = order;
        // cos^{2n}(x/2) = 4^{-n} [C(2n, n) + 2 Σ C(2n, n−k) cos kx]
        let mut w0 = 1.0;
        for j in 1..=n {
            w0 *= (2 * j - 1) as f64 / (2 * j) as f64;
        }
        let mut weights = vec![w0];
        let mut w = w0;
        for k in 1..=n {
            w *= (n - k + 1) as f64 / (n + k) as f64;
            if w < 1e-17 * w0 {
                break;
            }
            weights.push(2.0 * w);
        }
        let center = sep.state(0.0).1[0];
        let mut win = Window { order, center, norm: 1.0, weights };
        let at_saddle = win.shape(0.0);
        let t_cut = sep.t_cut(1e-14);
        let opts = QuadOptions { abs_tol: 1e-14, rel_tol: 1e-14, initial_panels: 64, max_panels: 20_000 };
        let (mass, _) = integrate_scalar(|t| win.shape(sep.state(t).1[0]) - at_saddle, -t_cut, t_cut, opts)
            .map_err(|e| GenericityError::Invalid(format!("window mass quadrature failed ({:.3e})", e.error)))?;
        win.norm = 1.0 / mass;
        Ok(win)
    }

    /// ((1 + cos(q − center)) / 2)^order from the truncated series.
    pub fn shape(&self, q: f64) -> f64 {
        self.weights.iter().enumerate().map(|(k, w)| w * (k as f64 * (q - self.center)).cos()).sum()
    }

    pub fn value(&self, q: f64) -> f64 {
        -self.norm * self.shape(q)
    }
}

/// cos(l(φ − φ₀) + m(s − s₀)) or the matching sine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisFn {
    pub l: i32,
    pub m: i32,
    pub sine: bool,
}

impl BasisFn {
    /// ∂φ^j ∂s^k at the base point.
    pub fn deriv(&self, j: u32, k: u32) -> f64 {
        // cos(x + nπ/2) at x = 0, n = j + k − [sine]
        let quarter = [1.0, 0.0, -1.0, 0.0][((j + k + 3 * self.sine as u32) % 4) as usize];
        (self.l as f64).powi(j as i32) * (self.m as f64).powi(k as i32) * quarter
    }

    fn phase(&self, phi0: f64, s0: f64) -> f64 {
        let shift = if self.sine { -FRAC_PI_2 } else { 0.0 };
        -(self.l as f64) * phi0 - self.m as f64 * s0 + shift
    }
}

/// Picks basis functions with small frequency lω₀ + m whose derivative columns are well separated.
pub fn choose_basis(omega: f64, indices: &[(u32, u32)]) -> Result<Vec<BasisFn>, GenericityError> {
    let n = indices.len();
    let mut modes: Vec<(i32, i32)> = vec![(0, 0)];
    for l in 0..=3 {
        for m in -3..=3 {
            if l > 0 || m > 0 {
                modes.push((l, m));
            }
        }
    }
    modes.sort_by(|a, b| {
        let key = |(l, m): (i32, i32)| ((l as f64 * omega + m as f64).abs(), l.abs() + m.abs());
        let (ka, kb) = (key(*a), key(*b));
        ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(a.cmp(b))
    });
    let column = |b: &BasisFn| -> Vec<f64> { indices.iter().map(|(j, k)| b.deriv(*j, *k)).collect() };
    for threshold in [0.3, 0.1, 1e-3] {
        let mut chosen: Vec<BasisFn> = Vec::new();
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        'modes: for &(l, m) in &modes {
            for sine in [false, true] {
                if chosen.len() == n {
                    break 'modes;
                }
                if sine && l == 0 && m == 0 {
                    continue;
                }
                let b = BasisFn { l, m, sine };
                let col = column(&b);
                let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let mut r: Vec<f64> = col.iter().map(|x| x / norm).collect();
                for e in &ortho {
                    let d: f64 = r.iter().zip(e).map(|(a, b)| a * b).sum();
                    r.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
                }
                let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if rn > threshold {
                    ortho.push(r.iter().map(|x| x / rn).collect());
                    chosen.push(b);
                }
            }
        }
        if chosen.len() == n {
            return Ok(chosen);
        }
    }
    Err(GenericityError::Basis)
}

fn condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub perturbation: Perturbation,
    pub window: Window,
    pub basis: Vec<BasisFn>,
    pub coeffs: Vec<f64>,
    /// Condition number of the basis derivative matrix.
    pub condition: f64,
    pub achieved: Vec<((u32, u32), f64)>,
    pub deviations: Vec<((u32, u32), f64)>,
    pub worst: f64,
}

/// The perturbation R(q) Σ aᵢ bᵢ(φ, t) as a finite series.
pub fn assemble(window: &Window, basis: &[BasisFn], coeffs: &[f64], phi0: f64, s0: f64) -> Perturbation {
    let mut terms = Vec::new();
    for (b, a) in basis.iter().zip(coeffs) {
        if *a == 0.0 {
            continue;
        }
        let psi = b.phase(phi0, s0);
        let term = |coeff: f64, k: i32, phase: f64| PertTerm { coeff, indices: PertIndices { p: vec![0], i: 0, q: vec![k], phi: b.l, t: b.m }, phase };
        for (k, w) in window.weights.iter().enumerate() {
            let c = -window.norm * a * w;
            if k == 0 {
                terms.push(term(c, 0, psi));
            } else {
                let kc = k as f64 * window.center;
                terms.push(term(0.5 * c, k as i32, psi - kc));
                terms.push(term(0.5 * c, -(k as i32), psi + kc));
            }
        }
    }
    Perturbation { terms }
}

/// Derivatives of L_g at the base point by direct quadrature.
pub fn achieved_derivatives(spec: &SystemSpec, sep: &Separatrix, g: &Perturbation, base: (f64, f64, f64), indices: &[(u32, u32)], tol: f64) -> Result<Vec<f64>, GenericityError> {
    if g.terms.is_empty() {
        return Ok(vec![0.0; indices.len()]);
    }
    let m = Melnikov::new(&spec.with_perturbation(g.clone()), sep, tol)?;
    let slice = m.slice(base.0)?;
    Ok(indices.iter().map(|(j, k)| slice.deriv(*j, *k, base.1, base.2)).collect())
}

/// Designs g with window order `order` and verifies every target within delta.
pub fn design_perturbation(spec: &SystemSpec, sep: &Separatrix, target: &DerivativeTarget, order: usize) -> Result<Design, GenericityError> {
    let (i0, phi0, s0) = target.base;
    let indices: Vec<(u32, u32)> = target.targets.iter().map(|(jk, _)| *jk).collect();
    let basis = choose_basis(spec.omega(i0), &indices)?;
    let n = indices.len();
    let a = DMatrix::from_fn(n, n, |r, c| basis[c].deriv(indices[r].0, indices[r].1));
    let rhs = DVector::from_iterator(n, target.targets.iter().map(|(_, c)| *c));
    let coeffs = a.clone().lu().solve(&rhs).ok_or(GenericityError::Basis)?;
    let coeffs: Vec<f64> = coeffs.iter().copied().collect();
    let window = Window::new(sep, order)?;
    let perturbation = assemble(&window, &basis, &coeffs, phi0, s0);
    let vals = achieved_derivatives(spec, sep, &perturbation, target.base, &indices, VERIFY_TOL)?;
    let achieved: Vec<((u32, u32), f64)> = indices.iter().copied().zip(vals).collect();
    let deviations: Vec<((u32, u32), f64)> = achieved.iter().zip(&target.targets).map(|((jk, v), (_, c))| (*jk, (v - c).abs())).collect();
    let worst = deviations.iter().map(|d| d.1).fold(0.0, f64::max);
    if worst >= target.delta {
        return Err(GenericityError::Verification { order, worst, deviations });
    }
    Ok(Design { perturbation, window, basis, coeffs, condition: condition(&a), achieved, deviations, worst })
}

/// Doubles the window order from `start` until the design verifies or `max_order` is passed.
pub fn design_adaptive(spec: &SystemSpec, sep: &Separatrix, target: &DerivativeTarget, start: usize, max_order: usize) -> Result<Design, GenericityError> {
    let mut order = start.max(1);
    loop {
        match design_perturbation(spec, sep, target, order) {
            Err(GenericityError::Verification { .. }) if order * 2 <= max_order => order *= 2,
            other => return other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCheck {
    /// Row i holds E(gᵢ), the achieved derivatives of the design for the i-th unit target.
    pub matrix: Vec<Vec<f64>>,
    pub worst: f64,
    pub condition: f64,
    pub order: usize,
}

/// Designs g₁…g₁₀ for the unit targets at `base` and measures the conditioning of their jets.
pub fn basis_matrix(spec: &SystemSpec, sep: &Separatrix, base: (f64, f64, f64), delta: f64, start: usize, max_order: usize) -> Result<BasisCheck, GenericityError> {
    let mut order = start;
    let designs: Vec<Design> = loop {
        let res: Result<Vec<Design>, GenericityError> = (0..10)
            .into_par_iter()
            .map(|i| {
                let mut e = [0.0; 10];
                e[i] = 1.0;
                design_perturbation(spec, sep, &DerivativeTarget::full(base, e, delta)?, order)
            })
            .collect();
        match res {
            Err(GenericityError::Verification { .. }) if order * 2 <= max_order => order *= 2,
            other => break other?,
        }
    };
    let matrix: Vec<Vec<f64>> = designs.iter().map(|d| d.achieved.iter().map(|a| a.1).collect()).collect();
    let worst = designs.iter().map(|d| d.worst).fold(0.0, f64::max);
    let m = DMatrix::from_fn(10, 10, |r, c| matrix[r][c]);
    Ok(BasisCheck { condition: condition(&m), matrix, worst, order })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyVector {
    /// (I, φ, s)
    pub point: (f64, f64, f64),
    /// Unit vector in the (φ, s)-plane.
    pub v: (f64, f64),
    pub value: [f64; 5],
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub minimum: Option<DegeneracyVector>,
    /// Refined local minima with ‖F‖ below `threshold`, plus the global minimum.
    pub local_minima: Vec<DegeneracyVector>,
    pub near_critical: usize,
    pub evaluated: usize,
    pub threshold: f64,
    pub vacuous: bool,
    /// True when no near-critical point exists or the minimum of ‖F‖ exceeds `zero_tol`.
    pub certified: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    /// A grid point is near-critical when ‖∇L‖ ≤ crit_frac · max ‖∇L‖ on its slice.
    pub crit_frac: f64,
    pub seeds: usize,
    pub threshold: f64,
    pub zero_tol: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { crit_frac: 0.1, seeds: 12, threshold: 1e-3, zero_tol: 1e-8 }
    }
}

/// F(x, v) and its Jacobian in (I, φ, s, α), v = (cos α, sin α).
fn f_and_jacobian(slice: &MelnikovSlice, phi: f64, s: f64, alpha: f64) -> ([f64; 5], [[f64; 4]; 5]) {
    let d = |a: u32, b: u32| slice.deriv(a, b, phi, s);
    let di = |a: u32, b: u32| slice.deriv_i(a, b, phi, s);
    let (c, sn) = (alpha.cos(), alpha.sin());
    // Generic assembly from a derivative oracle D(a, b), shifted by (da, db) for the φ/s columns.
    let assemble = |g: &dyn Fn(u32, u32) -> f64| -> [f64; 5] {
        [
            g(1, 0),
            g(0, 1),
            g(2, 0) * c + g(1, 1) * sn,
            g(1, 1) * c + g(0, 2) * sn,
            g(3, 0) * c.powi(3) + 3.0 * g(2, 1) * c * c * sn + 3.0 * g(1, 2) * c * sn * sn + g(0, 3) * sn.powi(3),
        ]
    };
    let f = assemble(&d);
    let f_i = assemble(&di);
    let f_phi = assemble(&|a, b| d(a + 1, b));
    let f_s = assemble(&|a, b| d(a, b + 1));
    let f_a = [
        0.0,
        0.0,
        -d(2, 0) * sn + d(1, 1) * c,
        -d(1, 1) * sn + d(0, 2) * c,
        3.0 * (-d(3, 0) * c * c * sn + d(2, 1) * (c.powi(3) - 2.0 * c * sn * sn) + d(1, 2) * (2.0 * c * c * sn - sn.powi(3)) + d(0, 3) * sn * sn * c),
    ];
    let mut j = [[0.0; 4]; 5];
    for r in 0..5 {
        j[r] = [f_i[r], f_phi[r], f_s[r], f_a[r]];
    }
    (f, j)
}

fn norm5(f: &[f64; 5]) -> f64 {
    f.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn vector_at(slice: &MelnikovSlice, phi: f64, s: f64, alpha: f64) -> DegeneracyVector {
    let (f, _) = f_and_jacobian(slice, phi, s, alpha);
    DegeneracyVector { point: (slice.action, phi, s), v: (alpha.cos(), alpha.sin()), value: f, norm: norm5(&f) }
}

/// Levenberg–Marquardt descent of ‖F‖² over (I, φ, s, α), with I clamped to the model range.
fn refine<M: MelnikovModel + ?Sized>(model: &M, start: (f64, f64, f64, f64)) -> Result<DegeneracyVector, MelnikovError> {
    let (lo, hi) = model.action_range();
    let mut x = Vector4::new(start.0, start.1, start.2, start.3);
    let mut slice = model.slice(x[0])?;
    let (mut f, mut j) = f_and_jacobian(&slice, x[1], x[2], x[3]);
    let mut cost = norm5(&f);
    let mut mu = 1e-3;
    for _ in 0..100 {
        if cost < 1e-15 {
            break;
        }
        let jm = nalgebra::SMatrix::<f64, 5, 4>::from_fn(|r, c| j[r][c]);
        let fv = nalgebra::SVector::<f64, 5>::from_iterator(f);
        let jtj = jm.transpose() * jm;
        let g = jm.transpose() * fv;
        let scale = jtj.diagonal().map(|v| v.max(1e-12));
        let mut improved = false;
        for _ in 0..20 {
            let sys: Matrix4<f64> = jtj + Matrix4::from_diagonal(&(scale * mu));
            let Some(step) = sys.lu().solve(&(-g)) else { break };
            let mut y = x + step;
            y[0] = y[0].clamp(lo, hi);
            let s2 = model.slice(y[0])?;
            let (f2, j2) = f_and_jacobian(&s2, y[1], y[2], y[3]);
            let c2 = norm5(&f2);
            if c2 < cost {
                x = y;
                slice = s2;
                f = f2;
                j = j2;
                improved = cost - c2 > 1e-15 * cost.max(1.0);
                cost = c2;
                mu = (mu * 0.3).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(vector_at(&slice, wrap_pi(x[1]), wrap_pi(x[2]), x[3].rem_euclid(PI)))
}

fn same_point(a: &DegeneracyVector, b: &DegeneracyVector) -> bool {
    let dv = (a.v.0 * b.v.1 - a.v.1 * b.v.0).abs();
    (a.point.0 - b.point.0).abs() < 1e-6 && wrap_pi(a.point.1 - b.point.1).abs() < 1e-6 && wrap_pi(a.point.2 - b.point.2).abs() < 1e-6 && dv < 1e-6
}

/// Scans ‖F‖ over I_grid × angle_grid² × v_grid at near-critical points and refines the best seeds.
pub fn scan_degeneracy_model<M: MelnikovModel + ?Sized>(model: &M, i_grid: &[f64], angle_grid: usize, v_grid: usize, opts: ScanOptions) -> Result<DegeneracyReport, MelnikovError> {
    if i_grid.is_empty() || angle_grid == 0 || v_grid == 0 {
        return Err(MelnikovError::Invalid("scan grids must be nonempty".into()));
    }
    let slices: Vec<MelnikovSlice> = i_grid.par_iter().map(|i| model.slice(*i)).collect::<Result<_, _>>()?;
    let ang = |k: usize| 2.0 * PI * k as f64 / angle_grid as f64;
    // ±v give the same ‖F‖, so half the circle suffices.
    let alphas: Vec<f64> = (0..v_grid).map(|k| PI * k as f64 / v_grid as f64).collect();
    let mut candidates: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let mut near = 0;
    for slice in &slices {
        let grads: Vec<f64> = (0..angle_grid * angle_grid)
            .map(|idx| {
                let (p, s) = (ang(idx / angle_grid), ang(idx % angle_grid));
                slice.deriv(1, 0, p, s).hypot(slice.deriv(0, 1, p, s))
            })
            .collect();
        let gmax = grads.iter().copied().fold(0.0, f64::max);
        for (idx, g) in grads.iter().enumerate() {
            if *g > opts.crit_frac * gmax {
                continue;
            }
            near += 1;
            let (p, s) = (ang(idx / angle_grid), ang(idx % angle_grid));
            let best = alphas.iter().map(|a| (norm5(&f_and_jacobian(slice, p, s, *a).0), *a)).min_by(|x, y| x.0.total_cmp(&y.0)).unwrap();
            candidates.push((best.0, slice.action, p, s, best.1));
        }
    }
    let evaluated = slices.len() * angle_grid * angle_grid * v_grid;
    if candidates.is_empty() {
        return Ok(DegeneracyReport { minimum: None, local_minima: vec![], near_critical: 0, evaluated, threshold: opts.threshold, vacuous: true, certified: true });
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let seeds: Vec<_> = candidates.iter().take(opts.seeds).collect();
    let refined: Vec<DegeneracyVector> = seeds.par_iter().map(|c| refine(model, (c.1, c.2, c.3, c.4))).collect::<Result<_, _>>()?;
    let mut minima: Vec<DegeneracyVector> = Vec::new();
    for r in refined {
        if !minima.iter().any(|m| same_point(m, &r)) {
            minima.push(r);
        }
    }
    minima.sort_by(|a, b| a.norm.total_cmp(&b.norm));
    let minimum = minima[0];
    let local_minima: Vec<DegeneracyVector> = minima.iter().enumerate().filter(|(k, m)| *k == 0 || m.norm < opts.threshold).map(|(_, m)| *m).collect();
    Ok(DegeneracyReport { minimum: Some(minimum), local_minima, near_critical: near, evaluated, threshold: opts.threshold, vacuous: false, certified: minimum.norm > opts.zero_tol })
}

/// `scan_degeneracy_model` on direct Melnikov quadrature at tolerance 1e-10.
pub fn scan_degeneracy(spec: &SystemSpec, sep: &Separatrix, i_grid: &[f64], angle_grid: usize, v_grid: usize) -> Result<DegeneracyReport, MelnikovError> {
    let m = Melnikov::new(spec, sep, 1e-10)?;
    scan_degeneracy_model(&m, i_grid, angle_grid, v_grid, ScanOptions::default())
}

impl DegeneracyReport {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["I", "phi", "s", "v_phi", "v_s", "F1", "F2", "F3", "F4", "F5", "norm"])?;
        for m in &self.local_minima {
            let mut rec = vec![m.point.0, m.point.1, m.point.2, m.v.0, m.v.1];
            rec.extend(m.value);
            rec.push(m.norm);
            out.write_record(rec.iter().map(|x| format!("{x:.15e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}
