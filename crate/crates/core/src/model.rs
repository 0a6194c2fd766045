//! Hamiltonian data and the unperturbed separatrix.
//!
//! H_ε(p, q, I, φ, t) = ½|p|² + V(q) + G(I) + ε h(p, q, I, φ, t), with every angle 2π-periodic.

use crate::ode::{dop853, Dop853Options};
use crate::ModelError;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// `coeff · cos(k·q + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosTerm {
    pub coeff: f64,
    pub indices: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub terms: Vec<CosTerm>,
}

impl Potential {
    pub fn value(&self, q: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.coeff * (dot(&t.indices, q) + t.phase).cos()).sum()
    }

    pub fn gradient(&self, q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            let s = -t.coeff * (dot(&t.indices, q) + t.phase).sin();
            for (o, k) in out.iter_mut().zip(&t.indices) {
                *o += s * *k as f64;
            }
        }
    }

    /// Row-major d×d Hessian.
    pub fn hessian(&self, q: &[f64]) -> Vec<f64> {
        let d = q.len();
        let mut h = vec![0.0; d * d];
        for t in &self.terms {
            let c = -t.coeff * (dot(&t.indices, q) + t.phase).cos();
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += c * (t.indices[i] * t.indices[j]) as f64;
                }
            }
        }
        h
    }

    /// True when V(−q) = V(q) identically (all phases are multiples of π).
    pub fn is_even(&self) -> bool {
        self.terms.iter().all(|t| (t.phase / PI - (t.phase / PI).round()).abs() < 1e-14)
    }
}

/// G(I) = Σ coeffs[n] Iⁿ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotor {
    pub coeffs: Vec<f64>,
}

impl Rotor {
    fn derivative(&self, order: usize, x: f64) -> f64 {
        let mut sum = 0.0;
        for (n, c) in self.coeffs.iter().enumerate().skip(order) {
            let falling: f64 = (0..order).map(|j| (n - j) as f64).product();
            sum += c * falling * x.powi((n - order) as i32);
        }
        sum
    }

    pub fn value(&self, i: f64) -> f64 {
        self.derivative(0, i)
    }
    /// ω(I) = G'(I).
    pub fn omega(&self, i: f64) -> f64 {
        self.derivative(1, i)
    }
    /// ω'(I) = G''(I).
    pub fn domega(&self, i: f64) -> f64 {
        self.derivative(2, i)
    }
}

/// Integer indices of one perturbation monomial: `p^a · I^b · cos(k·q + l φ + m t + phase)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PertIndices {
    #[serde(default)]
    pub p: Vec<u32>,
    #[serde(default)]
    pub i: u32,
    #[serde(default)]
    pub q: Vec<i32>,
    #[serde(default)]
    pub phi: i32,
    #[serde(default)]
    pub t: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PertTerm {
    pub coeff: f64,
    pub indices: PertIndices,
    #[serde(default)]
    pub phase: f64,
}

impl PertTerm {
    fn angle(&self, q: &[f64], phi: f64, t: f64) -> f64 {
        dot(&self.indices.q, q) + self.indices.phi as f64 * phi + self.indices.t as f64 * t + self.phase
    }

    fn p_monomial(&self, p: &[f64]) -> f64 {
        self.indices.p.iter().zip(p).map(|(a, x)| x.powi(*a as i32)).product()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub terms: Vec<PertTerm>,
}

/// Value and first partial derivatives of h at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PertDerivs {
    pub value: f64,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub di: f64,
    pub dphi: f64,
    pub dt: f64,
}

impl Perturbation {
    pub fn zero() -> Self {
        Perturbation { terms: Vec::new() }
    }

    pub fn value(&self, p: &[f64], q: &[f64], i: f64, phi: f64, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|tm| tm.coeff * tm.p_monomial(p) * i.powi(tm.indices.i as i32) * tm.angle(q, phi, t).cos())
            .sum()
    }

    pub fn derivs(&self, p: &[f64], q: &[f64], i: f64, phi: f64, t: f64) -> PertDerivs {
        let d = q.len();
        let mut out = PertDerivs { value: 0.0, dp: vec![0.0; d], dq: vec![0.0; d], di: 0.0, dphi: 0.0, dt: 0.0 };
        for tm in &self.terms {
            let ang = tm.angle(q, phi, t);
            let (s, c) = ang.sin_cos();
            let b = tm.indices.i as i32;
            let ib = i.powi(b);
            let pm = tm.p_monomial(p);
            let amp = tm.coeff * pm * ib;
            out.value += amp * c;
            for (k, o) in tm.indices.q.iter().zip(out.dq.iter_mut()) {
                *o -= amp * s * *k as f64;
            }
            out.dphi -= amp * s * tm.indices.phi as f64;
            out.dt -= amp * s * tm.indices.t as f64;
            if b > 0 {
                out.di += tm.coeff * pm * b as f64 * i.powi(b - 1) * c;
            }
            for (j, a) in tm.indices.p.iter().enumerate() {
                if *a > 0 {
                    let mut dm = *a as f64 * p[j].powi(*a as i32 - 1);
                    for (jj, aa) in tm.indices.p.iter().enumerate() {
                        if jj != j {
                            dm *= p[jj].powi(*aa as i32);
                        }
                    }
                    out.dp[j] += tm.coeff * dm * ib * c;
                }
            }
        }
        out
    }

    /// h(0, 0, I, φ, t): the restriction to the unperturbed NHIM.
    pub fn on_nhim(&self, d: usize, i: f64, phi: f64, t: f64) -> f64 {
        let z = vec![0.0; d];
        self.value(&z, &z, i, phi, t)
    }

    /// c · (cos q − 1) · cos(l φ + m t + phase) for d = 1, expanded into monomials.
    pub fn pendulum_harmonic(c: f64, l: i32, m: i32, phase: f64) -> Self {
        let term = |coeff: f64, k: i32| PertTerm { coeff, indices: PertIndices { p: vec![0], i: 0, q: vec![k], phi: l, t: m }, phase };
        Perturbation { terms: vec![term(0.5 * c, 1), term(0.5 * c, -1), term(-c, 0)] }
    }

    /// The reference two-harmonic perturbation (cos q − 1)(cos(φ − t) + ½ cos(φ − 2t)).
    pub fn reference() -> Self {
        Perturbation::pendulum_harmonic(1.0, 1, -1, 0.0).plus(&Perturbation::pendulum_harmonic(0.5, 1, -2, 0.0))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Perturbation { terms: self.terms.iter().map(|t| PertTerm { coeff: c * t.coeff, ..t.clone() }).collect() }
    }

    pub fn plus(&self, other: &Perturbation) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Perturbation { terms }
    }
}

fn dot(k: &[i32], q: &[f64]) -> f64 {
    k.iter().zip(q).map(|(a, b)| *a as f64 * b).sum()
}

/// Config record as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(default = "one")]
    pub d: usize,
    pub potential: Potential,
    pub rotor: Rotor,
    pub perturbation: PerturbationConfig,
    pub range: RangeConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub terms: Vec<PertTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeConfig {
    pub i_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub d: usize,
    pub potential: Potential,
    pub rotor: Rotor,
    pub perturbation: Perturbation,
    pub epsilon: f64,
    pub sigma_meta: Option<f64>,
    pub i_range: (f64, f64),
}

impl SystemSpec {
    pub fn omega(&self, i: f64) -> f64 {
        self.rotor.omega(i)
    }
    pub fn domega(&self, i: f64) -> f64 {
        self.rotor.domega(i)
    }

    /// Pendulum, G = I²/2, with the given perturbation and action range.
    pub fn pendulum(perturbation: Perturbation, i_range: (f64, f64)) -> Result<SystemSpec, ModelError> {
        build_system(&SystemConfig {
            d: 1,
            potential: Potential { terms: vec![CosTerm { coeff: 1.0, indices: vec![1], phase: 0.0 }, CosTerm { coeff: -1.0, indices: vec![0], phase: 0.0 }] },
            rotor: Rotor { coeffs: vec![0.0, 0.0, 0.5] },
            perturbation: PerturbationConfig { epsilon: 0.0, sigma: None, terms: perturbation.terms },
            range: RangeConfig { i_range: [i_range.0, i_range.1] },
        })
    }

    pub fn with_perturbation(&self, perturbation: Perturbation) -> SystemSpec {
        SystemSpec { perturbation, ..self.clone() }
    }
}

/// Validates a config record into a system.
pub fn build_system(cfg: &SystemConfig) -> Result<SystemSpec, ModelError> {
    let d = cfg.d;
    if d == 0 {
        return Err(ModelError::Malformed("d must be positive".into()));
    }
    for t in &cfg.potential.terms {
        if t.indices.len() != d {
            return Err(ModelError::Malformed(format!("potential term has {} indices, expected {d}", t.indices.len())));
        }
        if !t.coeff.is_finite() || !t.phase.is_finite() {
            return Err(ModelError::Malformed("non-finite potential coefficient".into()));
        }
    }
    for t in &cfg.perturbation.terms {
        let ix = &t.indices;
        let p_ok = ix.p.is_empty() || ix.p.len() == d;
        let q_ok = ix.q.is_empty() || ix.q.len() == d;
        if !p_ok || !q_ok {
            return Err(ModelError::Malformed(format!("perturbation term indices must have length {d}")));
        }
        if !t.coeff.is_finite() || !t.phase.is_finite() {
            return Err(ModelError::Malformed("non-finite perturbation coefficient".into()));
        }
    }
    if cfg.rotor.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(ModelError::Malformed("non-finite rotor coefficient".into()));
    }
    let [lo, hi] = cfg.range.i_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ModelError::Malformed(format!("invalid action range [{lo}, {hi}]")));
    }
    if !cfg.perturbation.epsilon.is_finite() || cfg.perturbation.epsilon < 0.0 {
        return Err(ModelError::Malformed("epsilon must be finite and non-negative".into()));
    }
    if let Some(s) = cfg.perturbation.sigma {
        if !(s > 0.0) {
            return Err(ModelError::Malformed("sigma must be positive".into()));
        }
    }

    let zero = vec![0.0; d];
    let mut g = vec![0.0; d];
    cfg.potential.gradient(&zero, &mut g);
    if g.iter().any(|x| x.abs() > 1e-12) {
        return Err(ModelError::NotCritical);
    }
    let hess = nalgebra::DMatrix::from_row_slice(d, d, &cfg.potential.hessian(&zero));
    let eig = hess.symmetric_eigenvalues();
    let max_eig = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_eig < -1e-12) {
        return Err(ModelError::DegenerateMaximum(max_eig));
    }

    let n = 401;
    for k in 0..n {
        let i = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let g2 = cfg.rotor.domega(i);
        if !(g2 > 0.0) {
            return Err(ModelError::TwistViolation(i));
        }
    }

    // Pad indices so evaluation never needs to special-case empty vectors.
    let terms = cfg
        .perturbation
        .terms
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.indices.p.is_empty() {
                t.indices.p = vec![0; d];
            }
            if t.indices.q.is_empty() {
                t.indices.q = vec![0; d];
            }
            t
        })
        .collect();

    Ok(SystemSpec {
        d,
        potential: cfg.potential.clone(),
        rotor: cfg.rotor.clone(),
        perturbation: Perturbation { terms },
        epsilon: cfg.perturbation.epsilon,
        sigma_meta: cfg.perturbation.sigma,
        i_range: (lo, hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparatrixKind {
    ClosedForm,
    Tabulated,
}

#[derive(Debug, Clone)]
enum Repr {
    /// V = a(cos q − 1) + const: q0 = 4 atan(e^{√a t}), p0 = 2√a sech(√a t).
    Pendulum { root_a: f64 },
    Table(HermiteTable),
}

/// The homoclinic orbit of the saddle at the origin.
#[derive(Debug, Clone)]
pub struct Separatrix {
    pub kind: SeparatrixKind,
    pub d: usize,
    /// Hyperbolic rate at the saddle.
    pub lambda: f64,
    /// C with |p0(t)| + dist(q0(t), 0) ≤ C e^{−λ|t|}.
    pub decay_const: f64,
    /// Energy level V(0).
    pub energy: f64,
    repr: Repr,
}

impl Separatrix {
    /// Writes p0(t), q0(t) (q0 lifted continuously from 0 to its limit lattice point).
    pub fn eval(&self, t: f64, p: &mut [f64], q: &mut [f64]) {
        match &self.repr {
            Repr::Pendulum { root_a } => {
                let s = root_a * t;
                p[0] = 2.0 * root_a / s.cosh();
                q[0] = 4.0 * s.exp().atan();
            }
            Repr::Table(tab) => tab.eval(t, p, q),
        }
    }

    pub fn state(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.d];
        let mut q = vec![0.0; self.d];
        self.eval(t, &mut p, &mut q);
        (p, q)
    }

    /// |p0(t)| + distance of q0(t) to the nearest lattice point 2πℤ^d.
    pub fn distance_to_saddle(&self, t: f64) -> f64 {
        let (p, q) = self.state(t);
        if let Repr::Pendulum { root_a } = self.repr {
            // Closed forms avoid the cancellation in 2π − q0 for large t.
            let s = root_a * t;
            return 2.0 * root_a / s.cosh() + 4.0 * (-s.abs()).exp().atan();
        }
        norm(&p) + torus_distance(&q)
    }

    /// Smallest T with distance_to_saddle(±T) < tol.
    pub fn t_cut(&self, tol: f64) -> f64 {
        let f = |t: f64| self.distance_to_saddle(t).max(self.distance_to_saddle(-t));
        let mut hi = (self.decay_const / tol).ln().max(1.0) / self.lambda + 1.0;
        while f(hi) >= tol {
            hi *= 1.5;
        }
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < tol {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Energy ½|p0|² + V(q0) − V(0) at time t.
    pub fn energy_defect(&self, spec: &SystemSpec, t: f64) -> f64 {
        let (p, q) = self.state(t);
        0.5 * p.iter().map(|x| x * x).sum::<f64>() + spec.potential.value(&q) - self.energy
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance from q to the lattice 2πℤ^d.
pub fn torus_distance(q: &[f64]) -> f64 {
    q.iter().map(|x| wrap_pi(*x).powi(2)).sum::<f64>().sqrt()
}

/// Reduces an angle to (−π, π].
pub fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Reduces an angle to [0, 2π).
pub fn wrap_tau(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

fn pendulum_amplitude(v: &Potential) -> Option<f64> {
    if v.terms.iter().any(|t| t.indices.len() != 1) {
        return None;
    }
    let mut a = 0.0;
    for t in &v.terms {
        match t.indices[0].abs() {
            0 => {}
            1 => {
                let ph = t.phase * t.indices[0].signum() as f64;
                let (s, c) = ph.sin_cos();
                if s.abs() > 1e-14 {
                    return None;
                }
                a += t.coeff * c;
            }
            _ => {
                if t.coeff != 0.0 {
                    return None;
                }
            }
        }
    }
    (a > 0.0).then_some(a)
}

/// Computes the separatrix: closed form for pendulum potentials, shooting otherwise.
pub fn separatrix(spec: &SystemSpec) -> Result<Separatrix, ModelError> {
    let d = spec.d;
    let zero = vec![0.0; d];
    let energy = spec.potential.value(&zero);
    if d == 1 {
        if let Some(a) = pendulum_amplitude(&spec.potential) {
            let r = a.sqrt();
            return Ok(Separatrix { kind: SeparatrixKind::ClosedForm, d, lambda: r, decay_const: 8.0, energy, repr: Repr::Pendulum { root_a: r } });
        }
    }
    let hess = nalgebra::DMatrix::from_row_slice(d, d, &spec.potential.hessian(&zero));
    let eig = hess.symmetric_eigen();
    let (imin, mu) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let lambda = (-mu).sqrt();
    let mut dir: Vec<f64> = eig.eigenvectors.column(imin).iter().cloned().collect();
    // Leave the saddle towards increasing first nonzero component.
    if let Some(x) = dir.iter().find(|x| x.abs() > 1e-12) {
        if *x < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let table = if d == 1 { shoot_1d(spec, lambda, energy)? } else { shoot_nd(spec, lambda, &dir, energy)? };
    let mut sep = Separatrix { kind: SeparatrixKind::Tabulated, d, lambda, decay_const: 1.0, energy, repr: Repr::Table(table) };
    let Repr::Table(tab) = &sep.repr else { unreachable!() };
    let (t0, t1) = (tab.times[0], *tab.times.last().unwrap());
    let mut c: f64 = 0.0;
    let n = 2000;
    for k in 0..=n {
        let t = t0 + (t1 - t0) * k as f64 / n as f64;
        c = c.max(sep.distance_to_saddle(t) * (lambda * t.abs()).exp());
    }
    sep.decay_const = 1.05 * c;
    Ok(sep)
}

fn saddle_field(spec: &SystemSpec) -> impl Fn(f64, &[f64], &mut [f64]) + '_ {
    let d = spec.d;
    move |_t, y, dy| {
        // y = (p, q)
        spec.potential.gradient(&y[d..], &mut dy[..d]);
        for i in 0..d {
            dy[i] = -dy[i];
            dy[d + i] = y[i];
        }
    }
}

/// Integrates along the unstable manifold from `start`, recording every accepted step.
fn record_branch<S>(spec: &SystemSpec, start: &[f64], t_end: f64, h_max: f64, mut stop: S) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError>
where
    S: FnMut(&[f64]) -> bool,
{
    let f = saddle_field(spec);
    let mut ts = vec![0.0];
    let mut ys = vec![start.to_vec()];
    let opts = Dop853Options { rtol: 1e-13, atol: 1e-15, h_max, ..Default::default() };
    dop853(&f, 0.0, start, t_end, opts, |t, y| {
        ts.push(t);
        ys.push(y.to_vec());
        !stop(y)
    })
    .map_err(|e| ModelError::NoHomoclinic(format!("integration failed: {e}")))?;
    Ok((ts, ys))
}

fn shoot_1d(spec: &SystemSpec, lambda: f64, energy: f64) -> Result<HermiteTable, ModelError> {
    let delta = 1e-8;
    let t_end = 60.0 / lambda;
    let h_max = 0.01 / lambda;
    // Forward from q = 0 up to the section q = π.
    let start = [lambda * delta, delta];
    let (tf, yf) = record_branch(spec, &start, t_end, h_max, |y| y[1] >= PI || y[0] <= 0.0)?;
    let last = yf.last().unwrap();
    if !(last[1] >= PI && last[0] > 0.0) {
        return Err(ModelError::NoHomoclinic("unstable branch turned back before the midpoint".into()));
    }
    // Backward from q = 2π: reversing time, the stable branch is unstable with p > 0 along the orbit.
    let back_field = saddle_field(spec);
    let start_b = [lambda * delta, TAU - delta];
    let mut tb = vec![0.0];
    let mut yb = vec![start_b.to_vec()];
    let opts = Dop853Options { rtol: 1e-13, atol: 1e-15, h_max, ..Default::default() };
    dop853(&back_field, 0.0, &start_b, -t_end, opts, |t, y| {
        tb.push(t);
        yb.push(y.to_vec());
        !(y[1] <= PI || y[0] <= 0.0)
    })
    .map_err(|e| ModelError::NoHomoclinic(format!("integration failed: {e}")))?;
    let lastb = yb.last().unwrap();
    if !(lastb[1] <= PI && lastb[0] > 0.0) {
        return Err(ModelError::NoHomoclinic("stable branch turned back before the midpoint".into()));
    }
    // Energy-matching at the section: both branches must carry the same |p| at q = π.
    let pm_expected = (2.0 * (energy - spec.potential.value(&[PI]))).sqrt();
    let f = saddle_field(spec);
    let (tcf, ycf) = refine_crossing(&f, tf[tf.len() - 2], &yf[yf.len() - 2], 1, PI)?;
    let (tcb, ycb) = refine_crossing(&f, tb[tb.len() - 2], &yb[yb.len() - 2], 1, PI)?;
    if (ycf[0] - pm_expected).abs() > 1e-7 * pm_expected.max(1.0) || (ycb[0] - pm_expected).abs() > 1e-7 * pm_expected.max(1.0) {
        return Err(ModelError::NoHomoclinic("branches do not meet at the saddle energy".into()));
    }
    // Forward branch up to the section, the section point at t = 0, then the backward branch
    // in increasing time.
    let mut all_t: Vec<f64> = Vec::new();
    let mut all_y: Vec<Vec<f64>> = Vec::new();
    for k in 0..tf.len() - 1 {
        all_t.push(tf[k] - tcf);
        all_y.push(yf[k].clone());
    }
    all_t.push(0.0);
    all_y.push(vec![0.5 * (ycf[0] + ycb[0]), PI]);
    for k in (0..tb.len() - 1).rev() {
        all_t.push(tb[k] - tcb);
        all_y.push(yb[k].clone());
    }
    dedupe(&mut all_t, &mut all_y);
    Ok(HermiteTable::new(spec, 1, all_t, all_y, lambda))
}

fn dedupe(ts: &mut Vec<f64>, ys: &mut Vec<Vec<f64>>) {
    let mut k = 1;
    while k < ts.len() {
        if ts[k] - ts[k - 1] < 1e-9 {
            ts.remove(k);
            ys.remove(k);
        } else {
            k += 1;
        }
    }
}

/// Locates the time at which component `idx` of the state crosses `level`, starting from (t0, y0).
fn refine_crossing<F>(f: &F, t0: f64, y0: &[f64], idx: usize, level: f64) -> Result<(f64, Vec<f64>), ModelError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let opts = Dop853Options { rtol: 1e-14, atol: 1e-15, ..Default::default() };
    let sign = if y0[idx] < level { 1.0 } else { -1.0 };
    let g = |y: &[f64]| sign * (y[idx] - level);
    let mut dy = vec![0.0; y0.len()];
    let mut t = 0.0;
    let mut y = y0.to_vec();
    // Newton on the crossing time using the vector field as derivative.
    for _ in 0..50 {
        f(t, &y, &mut dy);
        let rate = sign * dy[idx];
        if rate.abs() < 1e-300 {
            break;
        }
        let dt = -g(&y) / rate;
        if dt.abs() < 1e-15 {
            break;
        }
        let out = dop853(f, t, &y, t + dt, opts, |_, _| true).map_err(|e| ModelError::NoHomoclinic(e.to_string()))?;
        t = out.t;
        y = out.y;
    }
    Ok((t0 + t, y))
}

fn shoot_nd(spec: &SystemSpec, lambda: f64, dir: &[f64], energy: f64) -> Result<HermiteTable, ModelError> {
    let d = spec.d;
    let delta = 1e-8;
    let mut start = vec![0.0; 2 * d];
    for i in 0..d {
        start[i] = lambda * delta * dir[i];
        start[d + i] = delta * dir[i];
    }
    let mut left = false;
    let mut best = f64::INFINITY;
    let mut best_index = 0usize;
    let mut count = 0usize;
    let (ts, ys) = record_branch(spec, &start, 80.0 / lambda, 0.01 / lambda, |y| {
        count += 1;
        let dist = norm(&y[..d]) + distance_to_nonzero_lattice(&y[d..]);
        if norm(&y[d..]) > 1.0 {
            left = true;
        }
        if left && dist < best {
            best = dist;
            best_index = count;
        }
        left && dist > 1e3 * best.max(1e-12) && best < 1e-4
    })?;
    if !(best < 1e-4) {
        return Err(ModelError::NoHomoclinic(format!("closest return to a saddle copy is {best:.3e}")));
    }
    let mut ts = ts[..=best_index].to_vec();
    let mut ys = ys[..=best_index].to_vec();
    let _ = energy;
    // Origin at the maximum of |p|.
    let imax = ys.iter().enumerate().fold((0, 0.0), |acc, (i, y)| {
        let n = norm(&y[..d]);
        if n > acc.1 {
            (i, n)
        } else {
            acc
        }
    });
    let t0 = ts[imax.0];
    ts.iter_mut().for_each(|t| *t -= t0);
    dedupe(&mut ts, &mut ys);
    Ok(HermiteTable::new(spec, d, ts, ys, lambda))
}

fn distance_to_nonzero_lattice(q: &[f64]) -> f64 {
    let nearest: Vec<f64> = q.iter().map(|x| (x / TAU).round()).collect();
    if nearest.iter().all(|k| *k == 0.0) {
        return f64::INFINITY;
    }
    q.iter().zip(&nearest).map(|(x, k)| (x - k * TAU).powi(2)).sum::<f64>().sqrt()
}

/// Quintic Hermite interpolation of (p, q) with exact first and second derivatives, exponential tails.
#[derive(Debug, Clone)]
struct HermiteTable {
    d: usize,
    times: Vec<f64>,
    y: Vec<Vec<f64>>,
    dy: Vec<Vec<f64>>,
    ddy: Vec<Vec<f64>>,
    lambda: f64,
    q_lo: Vec<f64>,
    q_hi: Vec<f64>,
}

impl HermiteTable {
    fn new(spec: &SystemSpec, d: usize, times: Vec<f64>, y: Vec<Vec<f64>>, lambda: f64) -> Self {
        let mut dy = Vec::with_capacity(y.len());
        let mut ddy = Vec::with_capacity(y.len());
        for s in &y {
            let (p, q) = s.split_at(d);
            let mut g = vec![0.0; d];
            spec.potential.gradient(q, &mut g);
            let h = spec.potential.hessian(q);
            let mut f = vec![0.0; 2 * d];
            let mut f2 = vec![0.0; 2 * d];
            for i in 0..d {
                f[i] = -g[i];
                f[d + i] = p[i];
                // d/dt(−∇V(q)) = −∇²V q̇ ; d/dt p = −∇V.
                f2[i] = -(0..d).map(|j| h[i * d + j] * p[j]).sum::<f64>();
                f2[d + i] = -g[i];
            }
            dy.push(f);
            ddy.push(f2);
        }
        let q_lo: Vec<f64> = y[0][d..].iter().map(|x| (x / TAU).round() * TAU).collect();
        let q_hi: Vec<f64> = y.last().unwrap()[d..].iter().map(|x| (x / TAU).round() * TAU).collect();
        HermiteTable { d, times, y, dy, ddy, lambda, q_lo, q_hi }
    }

    fn eval(&self, t: f64, p: &mut [f64], q: &mut [f64]) {
        let d = self.d;
        let n = self.times.len();
        if t <= self.times[0] {
            let k = (self.lambda * (t - self.times[0])).exp();
            for i in 0..d {
                p[i] = self.y[0][i] * k;
                q[i] = self.q_lo[i] + (self.y[0][d + i] - self.q_lo[i]) * k;
            }
            return;
        }
        if t >= self.times[n - 1] {
            let k = (-self.lambda * (t - self.times[n - 1])).exp();
            for i in 0..d {
                p[i] = self.y[n - 1][i] * k;
                q[i] = self.q_hi[i] + (self.y[n - 1][d + i] - self.q_hi[i]) * k;
            }
            return;
        }
        let j = match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(j) => j.min(n - 2),
            Err(j) => j - 1,
        };
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let s4 = s3 * s;
        let s5 = s4 * s;
        let h00 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
        let h10 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
        let h20 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5;
        let h01 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
        let h11 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
        let h21 = 0.5 * s3 - s4 + 0.5 * s5;
        for c in 0..2 * d {
            let v = h00 * self.y[j][c]
                + h10 * h * self.dy[j][c]
                + h20 * h * h * self.ddy[j][c]
                + h01 * self.y[j + 1][c]
                + h11 * h * self.dy[j + 1][c]
                + h21 * h * h * self.ddy[j + 1][c];
            if c < d {
                p[c] = v;
            } else {
                q[c - d] = v;
            }
        }
    }
}
