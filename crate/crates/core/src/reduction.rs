//! Minima of L(I, ·, ·), their continuation in I, and the reduced Poincaré function
//!
//! ```text
//! τ̄*(I, θ) = τ*(I, φ, s) − s,          θ = φ − s ω(I)
//! L*(I, θ)  = L(I, θ − τ̄* ω(I), −τ̄*)
//! ```
//!
//! τ* minimizes τ ↦ L(I, φ − τω, s − τ) near the critical curve. With v = (ω, 1) and H the
//! (φ, s)-Hessian of L at the shifted point:
//!
//! ```text
//! ∂θL*   = ∂φL
//! ∂IL*   = ∂IL − τ̄* ω'(I) ∂φL
//! ∂²θθL* = det H / (vᵀ H v)
//! ```
//!
//! Curves store φ*, s* and θ* unwrapped (continuous in I); exported angles are wrapped to [0, 2π).

use crate::melnikov::{MelnikovError, MelnikovModel, MelnikovSlice};
use crate::model::wrap_pi;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::sync::Arc;

pub type SharedModel = Arc<dyn MelnikovModel + Send + Sync>;

/// Largest admissible half-width of the θ-neighborhood (0.2 of a turn).
pub const MAX_HALF_WIDTH: f64 = 0.4 * PI;
/// Longest θ-step of the τ̄* continuation inside one evaluation.
const THETA_STEP: f64 = 0.25;
/// Eigenvalues below this magnitude count as degenerate.
pub const DEGENERATE_EIG: f64 = 1e-8;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ReductionError {
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error("grid must be at least 16x16, got {0}")]
    GridTooSmall(usize),
    #[error("seed rejected: {0}")]
    SeedRejected(String),
    #[error("curve has fewer than 2 nodes")]
    TooShort,
    #[error("gap ({0:?}, {1:?})")]
    Gap(f64, f64),
    #[error("action {0} outside curve interval [{1}, {2}]")]
    OutsideCurve(f64, f64, f64),
    #[error("theta offset {0:.4} outside the neighborhood half-width {1:.4}")]
    OutsideNeighborhood(f64, f64),
    #[error("neighborhood width {0:.3e} collapsed below 1e-3")]
    NarrowNeighborhood(f64),
    #[error("wrong branch: second derivative {0:.3e} <= 0")]
    WrongBranch(f64),
    #[error("Newton diverged: {0}")]
    NewtonDiverged(String),
}

fn min_eig(h: &[[f64; 2]; 2]) -> f64 {
    let m = 0.5 * (h[0][0] + h[1][1]);
    let r = (0.25 * (h[0][0] - h[1][1]).powi(2) + h[0][1] * h[0][1]).sqrt();
    m - r
}

fn max_eig(h: &[[f64; 2]; 2]) -> f64 {
    let m = 0.5 * (h[0][0] + h[1][1]);
    let r = (0.25 * (h[0][0] - h[1][1]).powi(2) + h[0][1] * h[0][1]).sqrt();
    m + r
}

/// Upper bound for |∇L| over the torus; sets the scale of gradient tolerances.
fn grad_scale(slice: &MelnikovSlice) -> f64 {
    slice.harmonics.iter().map(|h| h.c.norm() * (h.l.abs() + h.m.abs()) as f64).sum()
}

fn grad_tol(slice: &MelnikovSlice) -> f64 {
    1e-13 * grad_scale(slice).max(1.0)
}

fn grad_hess(slice: &MelnikovSlice, phi: f64, s: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let j = slice.jet(phi, s);
    (j.grad, j.hess)
}

/// Levenberg–Marquardt iteration on ∇L = 0; converges to critical points of any type.
fn newton_critical(slice: &MelnikovSlice, mut phi: f64, mut s: f64, max_iter: usize) -> Option<(f64, f64)> {
    let tol = grad_tol(slice);
    let (mut g, mut h) = grad_hess(slice, phi, s);
    let mut mu = 1e-14 * (h[0][0].powi(2) + 2.0 * h[0][1].powi(2) + h[1][1].powi(2)).max(1e-300);
    for _ in 0..max_iter {
        let gn = g[0].abs().max(g[1].abs());
        if gn <= tol {
            return Some((phi, s));
        }
        // (HᵀH + μ) δ = −Hᵀ g with H symmetric.
        let a = h[0][0] * h[0][0] + h[0][1] * h[0][1] + mu;
        let b = h[0][0] * h[0][1] + h[0][1] * h[1][1];
        let c = h[0][1] * h[0][1] + h[1][1] * h[1][1] + mu;
        let r0 = -(h[0][0] * g[0] + h[0][1] * g[1]);
        let r1 = -(h[0][1] * g[0] + h[1][1] * g[1]);
        let det = a * c - b * b;
        if !(det.abs() > 0.0) {
            return None;
        }
        let mut dphi = (c * r0 - b * r1) / det;
        let mut ds = (a * r1 - b * r0) / det;
        let len = (dphi * dphi + ds * ds).sqrt();
        if len > 0.5 {
            dphi *= 0.5 / len;
            ds *= 0.5 / len;
        }
        let (g1, h1) = grad_hess(slice, phi + dphi, s + ds);
        if g1[0].abs().max(g1[1].abs()) < gn {
            phi += dphi;
            s += ds;
            g = g1;
            h = h1;
            mu = (mu * 0.1).max(1e-300);
        } else {
            mu = mu * 10.0 + 1e-12 * grad_scale(slice).powi(2);
            if len < 1e-15 {
                return if gn <= 1e3 * tol { Some((phi, s)) } else { None };
            }
        }
    }
    let g = slice.jet(phi, s).grad;
    (g[0].abs().max(g[1].abs()) <= 1e3 * tol).then_some((phi, s))
}

/// Plain Newton for a non-degenerate minimum near the seed; returns iteration count too.
fn newton_minimum(slice: &MelnikovSlice, mut phi: f64, mut s: f64, max_iter: usize) -> Option<(f64, f64, usize)> {
    let tol = grad_tol(slice);
    for it in 0..=max_iter {
        let (g, h) = grad_hess(slice, phi, s);
        if g[0].abs().max(g[1].abs()) <= tol {
            return (min_eig(&h) > 0.0).then_some((phi, s, it));
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        if !(det.abs() > 0.0) {
            return None;
        }
        let dphi = -(h[1][1] * g[0] - h[0][1] * g[1]) / det;
        let ds = -(h[0][0] * g[1] - h[0][1] * g[0]) / det;
        if !(dphi.abs() + ds.abs() < 0.5) {
            return None;
        }
        phi += dphi;
        s += ds;
    }
    None
}

/// A critical point of L(I, ·, ·).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub phi: f64,
    pub s: f64,
    pub value: f64,
    pub hess: [[f64; 2]; 2],
    pub min_eig: f64,
    pub is_global: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaReport {
    pub action: f64,
    /// Non-degenerate minima, angles in [0, 2π).
    pub minima: Vec<CriticalPoint>,
    /// Critical points with a positive semi-definite Hessian whose smallest eigenvalue is below 1e-8.
    pub degenerate: Vec<CriticalPoint>,
    pub diagnostic: Option<String>,
}

/// Non-degenerate minima of L(I, ·, ·) from Newton seeds in every grid cell where both gradient components change sign.
pub fn find_minima<M: MelnikovModel + ?Sized>(model: &M, action: f64, grid: usize) -> Result<MinimaReport, ReductionError> {
    let slice = model.slice(action)?;
    find_minima_slice(&slice, grid)
}

pub fn find_minima_slice(slice: &MelnikovSlice, grid: usize) -> Result<MinimaReport, ReductionError> {
    if grid < 16 {
        return Err(ReductionError::GridTooSmall(grid));
    }
    let action = slice.action;
    let scale = grad_scale(slice);
    let amp: f64 = slice.harmonics.iter().map(|h| h.c.norm()).sum();
    if amp <= 1e-14 || scale <= 1e-14 {
        return Ok(MinimaReport {
            action,
            minima: vec![],
            degenerate: vec![],
            diagnostic: Some("L vanishes identically; every point is degenerate".into()),
        });
    }
    let n = grid;
    let step = TAU / n as f64;
    let zero = 1e-13 * scale;
    let mut gp = vec![0.0; n * n];
    let mut gs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let g = slice.jet(i as f64 * step, j as f64 * step).grad;
            gp[i * n + j] = g[0];
            gs[i * n + j] = g[1];
        }
    }
    let changes = |f: &[f64], i: usize, j: usize| {
        let c = [f[i * n + j], f[((i + 1) % n) * n + j], f[i * n + (j + 1) % n], f[((i + 1) % n) * n + (j + 1) % n]];
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo <= zero && hi >= -zero
    };
    let mut found: Vec<CriticalPoint> = Vec::new();
    let mut seeds = 0;
    let mut converged = 0;
    for i in 0..n {
        for j in 0..n {
            if !(changes(&gp, i, j) && changes(&gs, i, j)) {
                continue;
            }
            seeds += 1;
            let Some((phi, s)) = newton_critical(slice, (i as f64 + 0.5) * step, (j as f64 + 0.5) * step, 80) else {
                continue;
            };
            converged += 1;
            let (phi, s) = (phi.rem_euclid(TAU), s.rem_euclid(TAU));
            if found.iter().any(|c| wrap_pi(c.phi - phi).hypot(wrap_pi(c.s - s)) < 1e-7) {
                continue;
            }
            let j = slice.jet(phi, s);
            found.push(CriticalPoint { phi, s, value: j.value, hess: j.hess, min_eig: min_eig(&j.hess), is_global: false });
        }
    }
    let mut minima: Vec<CriticalPoint> = Vec::new();
    let mut degenerate = Vec::new();
    for c in found {
        if c.min_eig.abs() < DEGENERATE_EIG && max_eig(&c.hess) > -DEGENERATE_EIG {
            degenerate.push(c);
        } else if c.min_eig >= DEGENERATE_EIG {
            minima.push(c);
        }
    }
    minima.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.phi.total_cmp(&b.phi)));
    if let Some(best) = minima.first().map(|m| m.value) {
        let tie = 1e-12 * best.abs().max(1.0);
        for m in &mut minima {
            m.is_global = m.value <= best + tie;
        }
    }
    let diagnostic = if seeds == 0 {
        Some("no grid cell with a gradient sign change".into())
    } else if converged == 0 {
        Some(format!("Newton failed from all {seeds} seeds"))
    } else if !degenerate.is_empty() {
        Some(format!("{} degenerate critical points (smallest Hessian eigenvalue below 1e-8)", degenerate.len()))
    } else {
        None
    };
    Ok(MinimaReport { action, minima, degenerate, diagnostic })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Range,
    Degeneracy,
    NewtonFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveNode {
    pub action: f64,
    pub phi: f64,
    pub s: f64,
    pub theta: f64,
    /// d/dI of (φ*, s*, θ*).
    pub dphi: f64,
    pub ds: f64,
    pub dtheta: f64,
    pub value: f64,
    pub min_eig: f64,
    pub grad_norm: f64,
}

/// A branch I ↦ (φ*(I), s*(I)) of non-degenerate minima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalCurve {
    pub index: usize,
    pub nodes: Vec<CurveNode>,
    pub stop_lo: StopReason,
    pub stop_hi: StopReason,
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuationOptions {
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub eig_floor: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions { h_init: 0.02, h_min: 1e-5, h_max: 0.05, eig_floor: 1e-6 }
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// Interpolated curve data at one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSample {
    pub phi: f64,
    pub s: f64,
    pub theta: f64,
    pub min_eig: f64,
}

impl CriticalCurve {
    pub fn lo(&self) -> f64 {
        self.nodes[0].action
    }
    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1].action
    }

    /// Cubic Hermite interpolation of (φ*, s*, θ*); linear in the eigenvalue.
    pub fn interp(&self, action: f64) -> Result<CurveSample, ReductionError> {
        let (lo, hi) = (self.lo(), self.hi());
        let slack = 1e-12 * (hi - lo).max(1.0);
        if action < lo - slack || action > hi + slack {
            return Err(ReductionError::OutsideCurve(action, lo, hi));
        }
        let x = action.clamp(lo, hi);
        let k = self.nodes.partition_point(|n| n.action <= x).clamp(1, self.nodes.len() - 1);
        let (a, b) = (&self.nodes[k - 1], &self.nodes[k]);
        let t = (x - a.action) / (b.action - a.action);
        Ok(CurveSample {
            phi: hermite(a.action, b.action, a.phi, b.phi, a.dphi, b.dphi, x),
            s: hermite(a.action, b.action, a.s, b.s, a.ds, b.ds, x),
            theta: hermite(a.action, b.action, a.theta, b.theta, a.dtheta, b.dtheta, x),
            min_eig: a.min_eig + t * (b.min_eig - a.min_eig),
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// CSV of the curve with wrapped angles: I, theta, phi, s, L, min_eig.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["I", "theta", "phi", "s", "L", "min_eig"])?;
        for n in &self.nodes {
            out.write_record(
                [n.action, n.theta.rem_euclid(TAU), n.phi.rem_euclid(TAU), n.s.rem_euclid(TAU), n.value, n.min_eig].map(|v| format!("{v:.15e}")),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn make_node(slice: &MelnikovSlice, phi: f64, s: f64) -> CurveNode {
    let j = slice.jet(phi, s);
    let h = j.hess;
    let rhs = [-slice.deriv_i(1, 0, phi, s), -slice.deriv_i(0, 1, phi, s)];
    let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
    let dphi = (h[1][1] * rhs[0] - h[0][1] * rhs[1]) / det;
    let ds = (h[0][0] * rhs[1] - h[0][1] * rhs[0]) / det;
    CurveNode {
        action: slice.action,
        phi,
        s,
        theta: phi - s * slice.omega,
        dphi,
        ds,
        dtheta: dphi - slice.domega * s - slice.omega * ds,
        value: j.value,
        min_eig: min_eig(&h),
        grad_norm: j.grad[0].abs().max(j.grad[1].abs()),
    }
}

/// Natural-parameter continuation of a minimum in both directions from the seed action.
pub fn continue_curve<M: MelnikovModel + ?Sized>(
    model: &M,
    seed: (f64, f64, f64),
    range: (f64, f64),
    opts: ContinuationOptions,
) -> Result<CriticalCurve, ReductionError> {
    let (i0, phi0, s0) = seed;
    let slice = model.slice(i0)?;
    let Some((phi, s, _)) = newton_minimum(&slice, phi0, s0, 30) else {
        return Err(ReductionError::SeedRejected(format!("Newton failed at I = {i0}")));
    };
    let first = make_node(&slice, phi, s);
    if first.min_eig <= opts.eig_floor.max(DEGENERATE_EIG) {
        return Err(ReductionError::SeedRejected(format!("degenerate minimum at I = {i0} (smallest eigenvalue {:.3e})", first.min_eig)));
    }
    let mut halves = Vec::new();
    for dir in [1.0, -1.0] {
        let end = if dir > 0.0 { range.1 } else { range.0 };
        let mut nodes = vec![first];
        let mut h = opts.h_init;
        let reason = loop {
            let cur = *nodes.last().unwrap();
            if (end - cur.action) * dir <= 1e-14 {
                break StopReason::Range;
            }
            let step = h.min((end - cur.action).abs());
            let i1 = if step == (end - cur.action).abs() { end } else { cur.action + dir * step };
            let dx = i1 - cur.action;
            let pred = (cur.phi + dx * cur.dphi, cur.s + dx * cur.ds);
            let sl = model.slice(i1)?;
            let ok = newton_minimum(&sl, pred.0, pred.1, 8).filter(|(p, q, _)| (p - pred.0).hypot(q - pred.1) < 0.1);
            let node = ok.map(|(p, q, it)| (make_node(&sl, p, q), it));
            match node {
                Some((n, it)) if n.min_eig > opts.eig_floor => {
                    nodes.push(n);
                    if it <= 3 {
                        h = (h * 1.5).min(opts.h_max);
                    }
                }
                Some(_) => {
                    if step <= opts.h_min {
                        break StopReason::Degeneracy;
                    }
                    h = step * 0.5;
                }
                None => {
                    if step <= opts.h_min {
                        break StopReason::NewtonFailure;
                    }
                    h = step * 0.5;
                }
            }
        };
        halves.push((nodes, reason));
    }
    let (fwd, stop_hi) = halves.remove(0);
    let (mut bwd, stop_lo) = halves.remove(0);
    bwd.reverse();
    bwd.pop();
    bwd.extend(fwd);
    if bwd.len() < 2 {
        return Err(ReductionError::TooShort);
    }
    Ok(CriticalCurve { index: 0, nodes: bwd, stop_lo, stop_hi })
}

/// Seeds find_minima at `seeds` actions across the range and continues every minimum not already on a curve.
pub fn discover_curves<M: MelnikovModel + ?Sized>(
    model: &M,
    range: (f64, f64),
    seeds: usize,
    grid: usize,
    opts: ContinuationOptions,
) -> Result<Vec<CriticalCurve>, ReductionError> {
    let mut curves: Vec<CriticalCurve> = Vec::new();
    let n = seeds.max(1);
    for k in 0..n {
        let i0 = range.0 + (range.1 - range.0) * (k as f64 + 0.5) / n as f64;
        let report = find_minima(model, i0, grid)?;
        for m in report.minima {
            let known = curves.iter().any(|c| {
                c.lo() <= i0 && i0 <= c.hi() && c.interp(i0).map(|p| wrap_pi(p.phi - m.phi).hypot(wrap_pi(p.s - m.s)) < 1e-6).unwrap_or(false)
            });
            if known {
                continue;
            }
            let s0 = wrap_pi(m.s);
            if let Ok(mut c) = continue_curve(model, (i0, m.phi, s0), range, opts) {
                c.index = curves.len();
                curves.push(c);
            }
        }
    }
    Ok(curves)
}

/// One interval of a cover, tied to the curve it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverInterval {
    pub curve: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Inductive cover of [I⁻, I⁺]: the first interval contains I⁻; each next one contains the current
/// upper end and starts at max{a, midpoint of the current interval}. Containment is open except at I⁻.
pub fn select_intervals(intervals: &[(f64, f64)], i_minus: f64, i_plus: f64) -> Result<Vec<CoverInterval>, ReductionError> {
    let gap_from = |x: f64| {
        let next = intervals.iter().map(|iv| iv.0).filter(|a| *a >= x).fold(f64::INFINITY, f64::min);
        ReductionError::Gap(x, next.min(i_plus))
    };
    let best = |x: f64, closed_left: bool| {
        intervals
            .iter()
            .enumerate()
            .filter(|(_, iv)| (iv.0 < x || (closed_left && iv.0 <= x)) && x < iv.1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(k, iv)| (k, *iv))
    };
    let Some((k, (a, b))) = best(i_minus, true) else {
        return Err(gap_from(i_minus));
    };
    let mut chain = vec![CoverInterval { curve: k, lo: a, hi: b }];
    while chain.last().unwrap().hi < i_plus {
        let cur = *chain.last().unwrap();
        let Some((k, (a, b))) = best(cur.hi, false) else {
            return Err(gap_from(cur.hi));
        };
        if b <= cur.hi {
            return Err(gap_from(cur.hi));
        }
        chain.push(CoverInterval { curve: k, lo: a.max(0.5 * (cur.lo + cur.hi)), hi: b });
    }
    Ok(chain)
}

/// select_intervals over curve I-ranges; `curve` fields index into `curves`.
pub fn select_cover(curves: &[CriticalCurve], i_minus: f64, i_plus: f64) -> Result<Vec<CoverInterval>, ReductionError> {
    let iv: Vec<(f64, f64)> = curves.iter().map(|c| (c.lo(), c.hi())).collect();
    select_intervals(&iv, i_minus, i_plus)
}

/// L* and its derivatives at one (I, θ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedEval {
    pub action: f64,
    pub theta: f64,
    pub theta_star: f64,
    pub tau_bar: f64,
    pub value: f64,
    pub d_theta: f64,
    pub d_action: f64,
    pub d_theta_theta: f64,
    /// vᵀHv, the second τ-derivative at the minimizer.
    pub q: f64,
    /// |ω∂φL + ∂sL| at the shifted point.
    pub residual: f64,
}

/// The reduced Poincaré function of one critical curve on a θ-neighborhood of θ*(I).
#[derive(Clone)]
pub struct ReducedPoincare {
    model: SharedModel,
    pub curve: CriticalCurve,
    pub half_width: f64,
}

impl std::fmt::Debug for ReducedPoincare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedPoincare").field("curve", &self.curve.index).field("half_width", &self.half_width).finish()
    }
}

struct TauSolve {
    tau: f64,
    q: f64,
    residual: f64,
    phi: f64,
    s: f64,
}

/// Newton on ω∂φL + ∂sL = 0 along the line (φ0 − τω, s0 − τ).
fn solve_tau(slice: &MelnikovSlice, phi0: f64, s0: f64, mut tau: f64) -> Result<TauSolve, ReductionError> {
    let w = slice.omega;
    let tol = grad_tol(slice);
    for _ in 0..40 {
        let (phi, s) = (phi0 - tau * w, s0 - tau);
        let j = slice.jet(phi, s);
        let f = w * j.grad[0] + j.grad[1];
        let q = w * w * j.hess[0][0] + 2.0 * w * j.hess[0][1] + j.hess[1][1];
        if !(q > 0.0) {
            return Err(ReductionError::WrongBranch(q));
        }
        let dt = f / q;
        if !dt.is_finite() || dt.abs() > 1.0 {
            return Err(ReductionError::NewtonDiverged(format!("tau step {dt:.3e}")));
        }
        tau += dt;
        // Near roundoff the step can hover above 1e-15 forever; a residual at the gradient tolerance also counts.
        if dt.abs() <= 1e-14 * (1.0 + tau.abs()) || f.abs() <= tol {
            let (phi, s) = (phi0 - tau * w, s0 - tau);
            let j = slice.jet(phi, s);
            let q = w * w * j.hess[0][0] + 2.0 * w * j.hess[0][1] + j.hess[1][1];
            if !(q > 0.0) {
                return Err(ReductionError::WrongBranch(q));
            }
            return Ok(TauSolve { tau, q, residual: (w * j.grad[0] + j.grad[1]).abs(), phi, s });
        }
    }
    Err(ReductionError::NewtonDiverged("no convergence in 40 iterations".into()))
}

impl ReducedPoincare {
    /// Builds the evaluator and measures the achieved neighborhood half-width.
    pub fn new(model: SharedModel, curve: CriticalCurve) -> Result<Self, ReductionError> {
        let mut rp = ReducedPoincare { model, curve, half_width: MAX_HALF_WIDTH };
        let w = rp.measure_half_width(9)?;
        if w < 1e-3 {
            return Err(ReductionError::NarrowNeighborhood(w));
        }
        rp.half_width = w;
        Ok(rp)
    }

    /// Uses a prescribed half-width without measuring it.
    pub fn with_half_width(model: SharedModel, curve: CriticalCurve, half_width: f64) -> Self {
        ReducedPoincare { model, curve, half_width }
    }

    pub fn model(&self) -> &SharedModel {
        &self.model
    }

    pub fn omega(&self, action: f64) -> f64 {
        self.model.omega(action)
    }

    pub fn action_range(&self) -> (f64, f64) {
        (self.curve.lo(), self.curve.hi())
    }

    /// Critical point (φ*, s*) at this action, Newton-polished from the curve interpolant.
    fn critical(&self, slice: &MelnikovSlice) -> Result<(f64, f64), ReductionError> {
        let p = self.curve.interp(slice.action)?;
        newton_minimum(slice, p.phi, p.s, 30)
            .map(|(a, b, _)| (a, b))
            .ok_or_else(|| ReductionError::NewtonDiverged(format!("critical point at I = {}", slice.action)))
    }

    pub fn theta_star(&self, action: f64) -> Result<f64, ReductionError> {
        let slice = self.model.slice(action)?;
        let (phi, s) = self.critical(&slice)?;
        Ok(phi - s * slice.omega)
    }

    /// Marches τ̄ from θ* to θ* + offset in steps of at most 0.25 rad.
    fn march(&self, slice: &MelnikovSlice, offset: f64) -> Result<(f64, TauSolve), ReductionError> {
        let (phi, s) = self.critical(slice)?;
        let w = slice.omega;
        let theta_star = phi - s * w;
        let n = (offset.abs() / THETA_STEP).ceil().max(1.0) as usize;
        let mut tau = -s;
        let mut slope = 0.0;
        let mut last = None;
        for k in 1..=n {
            let th = theta_star + offset * k as f64 / n as f64;
            let seed = tau + slope * offset / n as f64;
            let sol = solve_tau(slice, th, 0.0, seed)?;
            let j = slice.jet(sol.phi, sol.s);
            slope = (w * j.hess[0][0] + j.hess[0][1]) / sol.q;
            tau = sol.tau;
            last = Some(sol);
        }
        Ok((theta_star, last.expect("at least one step")))
    }

    pub fn eval(&self, action: f64, theta: f64) -> Result<ReducedEval, ReductionError> {
        let slice = self.model.slice(action)?;
        let (phi, s) = self.critical(&slice)?;
        let offset = wrap_pi(theta - (phi - s * slice.omega));
        if offset.abs() > self.half_width * (1.0 + 1e-12) {
            return Err(ReductionError::OutsideNeighborhood(offset, self.half_width));
        }
        let (theta_star, sol) = self.march(&slice, offset)?;
        let j = slice.jet(sol.phi, sol.s);
        let h = j.hess;
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        Ok(ReducedEval {
            action,
            theta: theta_star + offset,
            theta_star,
            tau_bar: sol.tau,
            value: j.value,
            d_theta: j.grad[0],
            d_action: j.d_i - sol.tau * slice.domega * j.grad[0],
            d_theta_theta: det / sol.q,
            q: sol.q,
            residual: sol.residual,
        })
    }

    pub fn value(&self, action: f64, theta: f64) -> Result<f64, ReductionError> {
        Ok(self.eval(action, theta)?.value)
    }

    /// τ*(I, φ, s) with the second τ-derivative and the residual of the criticality equation.
    pub fn tau_star(&self, action: f64, phi: f64, s: f64) -> Result<(f64, f64, f64), ReductionError> {
        let ev = self.eval(action, phi - s * self.model.omega(action))?;
        let slice = self.model.slice(action)?;
        let sol = solve_tau(&slice, phi, s, ev.tau_bar + s)?;
        Ok((sol.tau, sol.q, sol.residual))
    }

    /// Largest offset (≤ 0.4π) reachable on both sides at `samples` actions with vᵀHv staying above 1% of its value at θ*.
    pub fn measure_half_width(&self, samples: usize) -> Result<f64, ReductionError> {
        let (lo, hi) = self.action_range();
        let n = samples.max(2);
        let mut width = MAX_HALF_WIDTH;
        for k in 0..n {
            let action = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            let slice = self.model.slice(action)?;
            let (phi, s) = self.critical(&slice)?;
            let theta_star = phi - s * slice.omega;
            let q0 = solve_tau(&slice, theta_star, 0.0, -s)?.q;
            for dir in [1.0, -1.0] {
                let steps = 40;
                let mut tau = -s;
                let mut good = 0.0;
                for i in 1..=steps {
                    let off = dir * MAX_HALF_WIDTH * i as f64 / steps as f64;
                    match solve_tau(&slice, theta_star + off, 0.0, tau) {
                        Ok(sol) if sol.q > 1e-2 * q0 && (sol.tau - tau).abs() < 0.5 => {
                            tau = sol.tau;
                            good = off.abs();
                        }
                        _ => break,
                    }
                }
                width = width.min(good);
            }
        }
        Ok(width)
    }
}

/// A reduced Hamiltonian L*(I, θ) on a θ-neighborhood of a minimum branch θ*(I).
pub trait ReducedFunction: Sync {
    fn eval(&self, action: f64, theta: f64) -> Result<ReducedEval, ReductionError>;
    fn theta_star(&self, action: f64) -> Result<f64, ReductionError>;
    fn half_width(&self) -> f64;
    fn action_range(&self) -> (f64, f64);
}

impl ReducedFunction for ReducedPoincare {
    fn eval(&self, action: f64, theta: f64) -> Result<ReducedEval, ReductionError> {
        ReducedPoincare::eval(self, action, theta)
    }
    fn theta_star(&self, action: f64) -> Result<f64, ReductionError> {
        ReducedPoincare::theta_star(self, action)
    }
    fn half_width(&self) -> f64 {
        self.half_width
    }
    fn action_range(&self) -> (f64, f64) {
        ReducedPoincare::action_range(self)
    }
}

/// Closed-form L*(I, θ) = (a₀ + a₁ I) cos θ with minimum branch θ* = π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineReduced {
    pub a0: f64,
    pub a1: f64,
    pub range: (f64, f64),
    pub half_width: f64,
}

impl ReducedFunction for CosineReduced {
    fn eval(&self, action: f64, theta: f64) -> Result<ReducedEval, ReductionError> {
        let (lo, hi) = self.range;
        if action < lo || action > hi {
            return Err(ReductionError::OutsideCurve(action, lo, hi));
        }
        let offset = wrap_pi(theta - PI);
        if offset.abs() > self.half_width * (1.0 + 1e-12) {
            return Err(ReductionError::OutsideNeighborhood(offset, self.half_width));
        }
        let a = self.a0 + self.a1 * action;
        let (s, c) = theta.sin_cos();
        Ok(ReducedEval {
            action,
            theta: PI + offset,
            theta_star: PI,
            tau_bar: 0.0,
            value: a * c,
            d_theta: -a * s,
            d_action: self.a1 * c,
            d_theta_theta: -a * c,
            q: 1.0,
            residual: 0.0,
        })
    }
    fn theta_star(&self, _action: f64) -> Result<f64, ReductionError> {
        Ok(PI)
    }
    fn half_width(&self) -> f64 {
        self.half_width
    }
    fn action_range(&self) -> (f64, f64) {
        self.range
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melnikov::Melnikov;
    use crate::model::{separatrix, Perturbation, SystemSpec};

    fn model(p: Perturbation) -> Melnikov {
        let spec = SystemSpec::pendulum(p, (0.5, 2.0)).unwrap();
        let sep = separatrix(&spec).unwrap();
        Melnikov::new(&spec, &sep, 1e-11).unwrap()
    }

    fn spec_h() -> Perturbation {
        Perturbation::pendulum_harmonic(1.0, 1, 0, 0.0).plus(&Perturbation::pendulum_harmonic(0.5, 1, 1, 0.0))
    }

    /// Local minima of the 512×512 grid, each refined by shrinking grids (no derivatives).
    fn brute_minima(slice: &MelnikovSlice) -> Vec<(f64, f64, f64)> {
        let n = 512;
        let h = TAU / n as f64;
        let v: Vec<f64> = (0..n * n).map(|k| slice.value((k / n) as f64 * h, (k % n) as f64 * h)).collect();
        let at = |i: isize, j: isize| v[(i.rem_euclid(n as isize) as usize) * n + j.rem_euclid(n as isize) as usize];
        let mut out = Vec::new();
        for i in 0..n as isize {
            for j in 0..n as isize {
                let c = at(i, j);
                let is_min = (-1..=1).all(|a| (-1..=1).all(|b| (a == 0 && b == 0) || at(i + a, j + b) > c));
                if !is_min {
                    continue;
                }
                let (mut p, mut s, mut r) = (i as f64 * h, j as f64 * h, h);
                for _ in 0..30 {
                    let mut best = (slice.value(p, s), p, s);
                    for a in -10..=10 {
                        for b in -10..=10 {
                            let (pp, ss) = (p + r * a as f64 / 10.0, s + r * b as f64 / 10.0);
                            let val = slice.value(pp, ss);
                            if val < best.0 {
                                best = (val, pp, ss);
                            }
                        }
                    }
                    p = best.1;
                    s = best.2;
                    r *= 0.3;
                }
                out.push((p.rem_euclid(TAU), s.rem_euclid(TAU), slice.value(p, s)));
            }
        }
        out
    }

    #[test]
    fn minima_match_brute_force_grid() {
        let m = model(spec_h());
        for action in [0.7, 1.3] {
            let slice = m.slice(action).unwrap();
            let report = find_minima_slice(&slice, 32).unwrap();
            let brute = brute_minima(&slice);
            assert_eq!(report.minima.len(), brute.len(), "I={action}: {:?} vs {:?}", report.minima, brute);
            for (p, s, v) in brute {
                let hit = report.minima.iter().find(|c| wrap_pi(c.phi - p).hypot(wrap_pi(c.s - s)) < 1e-5);
                let hit = hit.unwrap_or_else(|| panic!("brute minimum ({p}, {s}) not found"));
                assert!((hit.value - v).abs() < 1e-10);
                assert!(hit.min_eig > 1e-8);
            }
            assert!(report.minima.iter().any(|c| c.is_global));
        }
    }

    #[test]
    fn cos_phi_minima_are_degenerate_in_s() {
        let m = model(Perturbation::pendulum_harmonic(1.0, 1, 0, 0.0));
        let report = find_minima(&m, 1.0, 16).unwrap();
        assert!(report.minima.is_empty());
        assert!(!report.degenerate.is_empty());
        for c in &report.degenerate {
            assert!((c.phi - PI).abs() < 1e-9, "phi = {}", c.phi);
        }
        let s: std::collections::BTreeSet<i64> = report.degenerate.iter().map(|c| (c.s * 1e3) as i64).collect();
        assert!(s.len() > 1, "degenerate family should span several s values");
        let err = continue_curve(&m, (1.0, PI, 0.3), (0.5, 2.0), ContinuationOptions::default()).unwrap_err();
        assert!(matches!(err, ReductionError::SeedRejected(_)));
    }

    #[test]
    fn zero_perturbation_has_no_critical_points() {
        let m = model(Perturbation::zero());
        let report = find_minima(&m, 1.0, 16).unwrap();
        assert!(report.minima.is_empty() && report.degenerate.is_empty());
        assert!(report.diagnostic.is_some());
        assert_eq!(find_minima(&m, 1.0, 8).unwrap_err(), ReductionError::GridTooSmall(8));
    }

    #[test]
    fn cover_examples() {
        let one = select_intervals(&[(0.5, 2.0)], 0.6, 1.9).unwrap();
        assert_eq!(one.len(), 1);
        let two = select_intervals(&[(0.5, 1.3), (1.1, 2.0)], 0.6, 1.9).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two[1].lo < two[0].hi);
        assert_eq!((two[1].lo, two[0].hi), (1.1, 1.3));
        let err = select_intervals(&[(0.5, 1.0), (1.2, 2.0)], 0.6, 1.9).unwrap_err();
        assert_eq!(err.to_string(), "gap (1.0, 1.2)");
    }

    #[test]
    fn cover_uses_midpoint_rule() {
        let c = select_intervals(&[(0.0, 1.0), (0.2, 1.5), (1.2, 3.0)], 0.1, 2.5).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[1].lo, 0.5);
        assert_eq!(c[2].lo, 1.2);
        assert!(c.windows(2).all(|w| w[0].lo < w[1].lo && w[1].lo < w[0].hi));
    }

    #[test]
    fn reference_curve_spans_range_and_reduces() {
        let m: SharedModel = Arc::new(model(Perturbation::reference()));
        let curve = continue_curve(m.as_ref(), (1.2, PI, 0.0), (0.5, 2.0), ContinuationOptions::default()).unwrap();
        assert_eq!((curve.lo(), curve.hi()), (0.5, 2.0));
        assert_eq!((curve.stop_lo, curve.stop_hi), (StopReason::Range, StopReason::Range));
        for n in &curve.nodes {
            assert!(n.grad_norm <= 1e-10 && n.min_eig > 0.0);
            assert!((n.phi - PI).abs() < 1e-9 && n.s.abs() < 1e-9);
        }
        let rp = ReducedPoincare::new(m.clone(), curve).unwrap();
        assert!(rp.half_width > 0.5, "half width {}", rp.half_width);
        for action in [0.55, 1.0, 1.7] {
            let ts = rp.theta_star(action).unwrap();
            let e = rp.eval(action, ts).unwrap();
            assert!(e.d_theta.abs() < 1e-10 && e.d_theta_theta > 0.0);
            let slice = m.slice(action).unwrap();
            let j = slice.jet(PI, 0.0);
            assert!((e.value - j.value).abs() < 1e-12);
            let (tau, q, res) = rp.tau_star(action, PI, 0.0).unwrap();
            assert!(tau.abs() < 1e-10 && q > 0.0 && res < 1e-10);
        }
    }

    #[test]
    fn reduced_derivatives_match_finite_differences() {
        let m: SharedModel = Arc::new(model(spec_h()));
        let report = find_minima(m.as_ref(), 1.0, 32).unwrap();
        let g = report.minima.iter().find(|c| c.is_global).unwrap();
        let curve = continue_curve(m.as_ref(), (1.0, g.phi, wrap_pi(g.s)), (0.9, 1.1), ContinuationOptions::default()).unwrap();
        let rp = ReducedPoincare::new(m.clone(), curve).unwrap();
        let action = 1.03;
        let ts = rp.theta_star(action).unwrap();
        for off in [-0.3, -0.1, 0.05, 0.2] {
            let off = off * rp.half_width / 0.3_f64.max(rp.half_width);
            let th = ts + off;
            let e = rp.eval(action, th).unwrap();
            let hth = 1e-4;
            let fd = (rp.value(action, th + hth).unwrap() - rp.value(action, th - hth).unwrap()) / (2.0 * hth);
            assert!((fd - e.d_theta).abs() < 1e-6, "dθ: {fd} vs {}", e.d_theta);
            let fdd = (rp.eval(action, th + hth).unwrap().d_theta - rp.eval(action, th - hth).unwrap().d_theta) / (2.0 * hth);
            assert!((fdd - e.d_theta_theta).abs() < 1e-6, "dθθ: {fdd} vs {}", e.d_theta_theta);
            let hi = 1e-4;
            // θ held fixed while I moves.
            let fi = (rp.value(action + hi, th).unwrap() - rp.value(action - hi, th).unwrap()) / (2.0 * hi);
            assert!((fi - e.d_action).abs() < 1e-6, "dI: {fi} vs {}", e.d_action);
        }
    }

    #[test]
    fn tau_star_equivariance_and_flow_invariance() {
        let m: SharedModel = Arc::new(model(spec_h()));
        let report = find_minima(m.as_ref(), 1.0, 32).unwrap();
        let g = report.minima.iter().find(|c| c.is_global).unwrap();
        let curve = continue_curve(m.as_ref(), (1.0, g.phi, wrap_pi(g.s)), (0.95, 1.05), ContinuationOptions::default()).unwrap();
        let rp = ReducedPoincare::new(m.clone(), curve).unwrap();
        let slice = m.slice(1.0).unwrap();
        let w = slice.omega;
        let node = rp.curve.interp(1.0).unwrap();
        let (t0, _, r0) = rp.tau_star(1.0, node.phi, node.s).unwrap();
        assert!(t0.abs() < 1e-10 && r0 <= 1e-10);
        let (phi, s) = (node.phi + 0.1, node.s - 0.05);
        let (tau, _, _) = rp.tau_star(1.0, phi, s).unwrap();
        let base = slice.value(phi - tau * w, s - tau);
        for sigma in [0.1, -0.37, 0.8, 1.9, -2.5] {
            let (ts, _, res) = rp.tau_star(1.0, phi - sigma * w, s - sigma).unwrap();
            assert!((ts - (tau - sigma)).abs() < 1e-9, "σ={sigma}");
            assert!(res <= 1e-10);
            let shifted = slice.value(phi - sigma * w - ts * w, s - sigma - ts);
            assert!((shifted - base).abs() < 1e-8);
        }
    }

    #[test]
    fn degeneracy_floor_truncates_curve() {
        let m = model(Perturbation::reference());
        let full = continue_curve(&m, (1.2, PI, 0.0), (0.5, 2.0), ContinuationOptions::default()).unwrap();
        let eigs: Vec<f64> = full.nodes.iter().map(|n| n.min_eig).collect();
        let (lo, hi) = eigs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), e| (a.min(*e), b.max(*e)));
        let floor = 0.5 * (lo + hi);
        let seed_eig = full.interp(1.2).unwrap().min_eig;
        assert!(seed_eig > floor, "seed must start above the floor");
        let opts = ContinuationOptions { eig_floor: floor, ..Default::default() };
        let cut = continue_curve(&m, (1.2, PI, 0.0), (0.5, 2.0), opts).unwrap();
        assert!(cut.stop_lo == StopReason::Degeneracy || cut.stop_hi == StopReason::Degeneracy);
        assert!(cut.nodes.iter().all(|n| n.min_eig > floor));
        assert!(cut.hi() - cut.lo() < 1.5);
    }
}
