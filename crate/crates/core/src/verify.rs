//! Direct integration of H_ε and the single-excursion action jump.
//!
//! A jump is measured on orbits launched at the unperturbed homoclinic point z* = (p0(τ*), q0(τ*), I, φ)
//! at time s. Each side is followed along its (perturbed) invariant manifold by shooting on the
//! launch momentum, so that both segments settle near the NHIM for a whole averaging window.

use crate::model::{wrap_pi, Separatrix, SystemSpec};
use crate::ode::{dop853, Dop853Options, OdeError};
use crate::reduction::{ReducedPoincare, ReductionError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error("orbit does not settle near the NHIM ({0}); try a smaller epsilon or a refined launch")]
    NoApproach(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Samples of an integrated orbit. States are (p, q, I, φ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<f64>,
    /// H_ε(z(t), t) − H_ε(z₀, t₀) − ∫ ε ∂_t h dt at every sample.
    pub drift: Vec<f64>,
    pub max_drift: f64,
    /// Set when integration stopped early.
    pub diagnostic: Option<String>,
}

/// Right-hand side on the augmented state (p, q, I, φ, W) with Ẇ = ε ∂_t h.
pub fn vector_field(spec: &SystemSpec, eps: f64, t: f64, y: &[f64], dy: &mut [f64]) {
    let d = spec.d;
    let (p, rest) = y.split_at(d);
    let (q, rest) = rest.split_at(d);
    let (i, phi) = (rest[0], rest[1]);
    let mut vq = vec![0.0; d];
    spec.potential.gradient(q, &mut vq);
    let h = spec.perturbation.derivs(p, q, i, phi, t);
    for k in 0..d {
        dy[k] = -vq[k] - eps * h.dq[k];
        dy[d + k] = p[k] + eps * h.dp[k];
    }
    dy[2 * d] = -eps * h.dphi;
    dy[2 * d + 1] = spec.omega(i) + eps * h.di;
    if dy.len() > 2 * d + 2 {
        dy[2 * d + 2] = eps * h.dt;
    }
}

pub fn energy(spec: &SystemSpec, eps: f64, t: f64, y: &[f64]) -> f64 {
    let d = spec.d;
    let (p, rest) = y.split_at(d);
    let (q, rest) = rest.split_at(d);
    0.5 * p.iter().map(|x| x * x).sum::<f64>() + spec.potential.value(q) + spec.rotor.value(rest[0]) + eps * spec.perturbation.value(p, q, rest[0], rest[1], t)
}

/// Integrates from z₀ at t_span.0 to t_span.1 with DOP853 at local tolerance `tol`.
pub fn integrate(spec: &SystemSpec, eps: f64, z0: &[f64], t_span: (f64, f64), tol: f64) -> Result<Trajectory, VerifyError> {
    integrate_with(spec, eps, z0, t_span, Dop853Options::tol(tol))
}

pub fn integrate_with(spec: &SystemSpec, eps: f64, z0: &[f64], t_span: (f64, f64), opts: Dop853Options) -> Result<Trajectory, VerifyError> {
    let n = 2 * spec.d + 2;
    if z0.len() != n {
        return Err(VerifyError::Invalid(format!("state has {} entries, expected {n}", z0.len())));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(VerifyError::Invalid("tolerance must be positive".into()));
    }
    let mut y0 = z0.to_vec();
    y0.push(0.0);
    let h0 = energy(spec, eps, t_span.0, z0);
    let mut times = vec![t_span.0];
    let mut states = vec![z0.to_vec()];
    let mut drift = vec![0.0];
    let record = |t: f64, y: &[f64], times: &mut Vec<f64>, states: &mut Vec<Vec<f64>>, drift: &mut Vec<f64>| {
        times.push(t);
        states.push(y[..n].to_vec());
        drift.push(energy(spec, eps, t, &y[..n]) - h0 - y[n]);
    };
    let res = dop853(
        |t, y, dy| vector_field(spec, eps, t, y, dy),
        t_span.0,
        &y0,
        t_span.1,
        opts,
        |t, y| {
            record(t, y, &mut times, &mut states, &mut drift);
            true
        },
    );
    let (steps, diagnostic) = match res {
        Ok(out) => (out.steps, None),
        Err(e) => (times.windows(2).map(|w| w[1] - w[0]).collect(), Some(e.to_string())),
    };
    let max_drift = drift.iter().map(|d| d.abs()).fold(0.0, f64::max);
    Ok(Trajectory { times, states, steps, drift, max_drift, diagnostic })
}

#[derive(Debug, Clone, Copy)]
pub struct JumpOptions {
    pub nhim_tol: f64,
    /// Averaging window in natural periods 2π/ω(I).
    pub window_periods: f64,
    pub ode_tol: f64,
    pub t_max: f64,
    pub max_stages: usize,
}

impl Default for JumpOptions {
    fn default() -> Self {
        JumpOptions { nhim_tol: 1e-4, window_periods: 5.0, ode_tol: 1e-12, t_max: 400.0, max_stages: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpMeasurement {
    pub eps: f64,
    /// (I, φ, s)
    pub anchor: (f64, f64, f64),
    pub tau_star: f64,
    pub theta: f64,
    pub i_in: f64,
    pub i_out: f64,
    pub measured: f64,
    pub predicted: f64,
    pub error: f64,
    /// Largest |p| + dist(q, 0) over the incoming and outgoing averaging windows.
    pub window_distance: (f64, f64),
    pub shooting_stages: (usize, usize),
}

fn saddle_distance(y: &[f64]) -> f64 {
    y[0].abs() + wrap_pi(y[1]).abs()
}

/// One side of the excursion: direction of time, target lattice point of q, averaging window.
struct Side<'a> {
    spec: &'a SystemSpec,
    eps: f64,
    dir: f64,
    q_target: f64,
    opts: JumpOptions,
}

#[derive(PartialEq)]
enum Fate {
    Passes,
    FallsBack,
}

impl Side<'_> {
    fn ode(&self) -> Dop853Options {
        Dop853Options { h_max: 0.5, ..Dop853Options::tol(self.opts.ode_tol) }
    }

    /// Whether the orbit from (t, y) crosses over the saddle or turns back.
    fn fate(&self, t: f64, y: &[f64]) -> Result<Fate, VerifyError> {
        let side = (self.q_target - y[1]).signum();
        let mut fate = None;
        let mut y0 = y.to_vec();
        y0.push(0.0);
        dop853(
            |t, y, dy| vector_field(self.spec, self.eps, t, y, dy),
            t,
            &y0,
            t + self.dir * self.opts.t_max,
            self.ode(),
            |_, y| {
                if (y[1] - self.q_target) * side > 0.5 {
                    fate = Some(Fate::Passes);
                } else if y[0] * self.dir * side < 0.0 {
                    fate = Some(Fate::FallsBack);
                }
                fate.is_none()
            },
        )?;
        fate.ok_or_else(|| VerifyError::NoApproach("shooting orbit undecided at t_max".into()))
    }

    /// Momentum offset at (t, y) separating passing from returning orbits.
    fn shoot(&self, t: f64, y: &[f64]) -> Result<f64, VerifyError> {
        let shifted = |a: f64| {
            let mut z = y.to_vec();
            z[0] += a;
            z
        };
        let mut a = 1e-9 * saddle_distance(y).max(1e-12);
        let mut tries = 0;
        while !(self.fate(t, &shifted(a))? == Fate::Passes && self.fate(t, &shifted(-a))? == Fate::FallsBack) {
            a *= 4.0;
            tries += 1;
            if tries > 30 {
                return Err(VerifyError::NoApproach("no momentum bracket".into()));
            }
        }
        let (mut lo, mut hi) = (-a, a);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.fate(t, &shifted(mid))? == Fate::Passes {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    /// Staged shooting; returns samples (t, y) from the launch up to the end of the window.
    fn follow(&self, t0: f64, y0: &[f64], window: f64) -> Result<(Vec<(f64, Vec<f64>)>, f64, usize), VerifyError> {
        let tol = self.opts.nhim_tol;
        let mut samples: Vec<(f64, Vec<f64>)> = vec![(t0, y0.to_vec())];
        let mut entry: Option<f64> = None;
        for stage in 1..=self.opts.max_stages {
            let (ta, ya) = samples.last().cloned().unwrap();
            let a = self.shoot(ta, &ya)?;
            let mut start = ya.clone();
            start[0] += a;
            *samples.last_mut().unwrap() = (ta, start.clone());
            let mut seg: Vec<(f64, Vec<f64>)> = Vec::new();
            let mut entered = entry;
            let mut done = false;
            let side = (self.q_target - ya[1]).signum();
            let mut aug = start.clone();
            aug.push(0.0);
            dop853(
                |t, y, dy| vector_field(self.spec, self.eps, t, y, dy),
                ta,
                &aug,
                ta + self.dir * self.opts.t_max,
                self.ode(),
                |t, y| {
                    let dist = saddle_distance(y);
                    seg.push((t, y[..4].to_vec()));
                    if entered.is_none() && dist < tol {
                        entered = Some(t);
                    }
                    match entered {
                        Some(te) if self.dir * (t - te) >= window => {
                            done = true;
                            false
                        }
                        Some(_) => dist < tol,
                        None => (y[1] - self.q_target) * side <= 0.5 && y[0] * self.dir * side >= 0.0,
                    }
                },
            )?;
            let Some(te) = entered else {
                let closest = seg.iter().map(|s| saddle_distance(&s.1)).fold(f64::INFINITY, f64::min);
                return Err(VerifyError::NoApproach(format!("closest approach {closest:.3e}")));
            };
            entry = Some(te);
            if done {
                samples.extend(seg);
                return Ok((samples, te, stage));
            }
            // Re-anchor at the deepest point of this stage and shoot again from there.
            let k = seg.iter().enumerate().filter(|(_, s)| self.dir * (s.0 - te) >= 0.0).min_by(|a, b| saddle_distance(&a.1 .1).total_cmp(&saddle_distance(&b.1 .1))).map(|(k, _)| k).unwrap();
            seg.truncate(k + 1);
            samples.extend(seg);
        }
        Err(VerifyError::NoApproach(format!("window not covered after {} shooting stages", self.opts.max_stages)))
    }
}

/// Time average of I over samples in the window starting at `te` (trapezoid rule); also the largest
/// saddle distance there.
fn window_average(samples: &[(f64, Vec<f64>)], te: f64, window: f64, dir: f64) -> (f64, f64) {
    let inside: Vec<&(f64, Vec<f64>)> = samples.iter().filter(|s| dir * (s.0 - te) >= 0.0 && dir * (s.0 - te) <= window).collect();
    let base = inside.first().map(|s| s.1[2]).unwrap_or(f64::NAN);
    let mut area = 0.0;
    let mut span = 0.0;
    for w in inside.windows(2) {
        let dt = (w[1].0 - w[0].0).abs();
        area += 0.5 * dt * ((w[0].1[2] - base) + (w[1].1[2] - base));
        span += dt;
    }
    let worst = inside.iter().map(|s| saddle_distance(&s.1)).fold(0.0, f64::max);
    let avg = if span > 0.0 { base + area / span } else { base };
    (avg, worst)
}

/// Launch state z* = (p0(τ*), q0(τ*), I, φ) of the excursion through (I, φ, s).
pub fn launch_state(sep: &Separatrix, rp: &ReducedPoincare, anchor: (f64, f64, f64)) -> Result<(f64, Vec<f64>), VerifyError> {
    let (i, phi, s) = anchor;
    let (tau, _, _) = rp.tau_star(i, phi, s)?;
    let (p, q) = sep.state(tau);
    Ok((tau, vec![p[0], q[0], i, phi]))
}

/// Measures the action jump across one homoclinic excursion and compares it with ε ∂θL*.
pub fn measure_jump(spec: &SystemSpec, sep: &Separatrix, rp: &ReducedPoincare, eps: f64, anchor: (f64, f64, f64), opts: JumpOptions) -> Result<JumpMeasurement, VerifyError> {
    if spec.d != 1 {
        return Err(VerifyError::Invalid("jump measurement needs d = 1".into()));
    }
    let (i, phi, s) = anchor;
    let (tau, z) = launch_state(sep, rp, anchor)?;
    let theta = phi - s * rp.omega(i);
    let predicted = eps * rp.eval(i, theta)?.d_theta;
    let window = opts.window_periods * TAU / spec.omega(i).abs();
    // q0 runs from 0 to 2π; the outgoing side approaches 2π, the incoming side 0.
    let forward = Side { spec, eps, dir: 1.0, q_target: TAU, opts };
    let backward = Side { spec, eps, dir: -1.0, q_target: 0.0, opts };
    let (fw, bw) = rayon::join(|| forward.follow(s, &z, window), || backward.follow(s, &z, window));
    let (fw, te_out, st_out) = fw?;
    let (bw, te_in, st_in) = bw?;
    let (i_out, d_out) = window_average(&fw, te_out, window, 1.0);
    let (i_in, d_in) = window_average(&bw, te_in, window, -1.0);
    let measured = i_out - i_in;
    Ok(JumpMeasurement {
        eps,
        anchor,
        tau_star: tau,
        theta,
        i_in,
        i_out,
        measured,
        predicted,
        error: (measured - predicted).abs(),
        window_distance: (d_in, d_out),
        shooting_stages: (st_in, st_out),
    })
}

/// Closest approach to {p = q = 0} of the orbit launched at z* without shooting (forward side).
pub fn closest_approach(spec: &SystemSpec, sep: &Separatrix, rp: &ReducedPoincare, eps: f64, anchor: (f64, f64, f64), t_max: f64) -> Result<f64, VerifyError> {
    let (_, z) = launch_state(sep, rp, anchor)?;
    let mut best = f64::INFINITY;
    let mut y0 = z.clone();
    y0.push(0.0);
    dop853(|t, y, dy| vector_field(spec, eps, t, y, dy), anchor.2, &y0, anchor.2 + t_max, Dop853Options { h_max: 0.5, ..Dop853Options::tol(1e-12) }, |_, y| {
        best = best.min(saddle_distance(y));
        (y[1] - TAU).abs() < 3.0
    })?;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStudy {
    pub measurements: Vec<JumpMeasurement>,
    pub failures: Vec<(f64, String)>,
    /// Least-squares slope of log|error| against log ε.
    pub slope: f64,
    /// Slope of log|measured| against log ε (the leading term alone).
    pub slope_raw: f64,
    /// Fewer than three surviving points.
    pub flagged: bool,
}

/// Least-squares slope of log y against log x.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn jump_convergence(spec: &SystemSpec, sep: &Separatrix, rp: &ReducedPoincare, anchor: (f64, f64, f64), eps_list: &[f64], opts: JumpOptions) -> Result<JumpStudy, VerifyError> {
    if eps_list.len() < 4 || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(VerifyError::Invalid("need at least four positive epsilon values".into()));
    }
    let results: Vec<(f64, Result<JumpMeasurement, VerifyError>)> = eps_list.par_iter().map(|e| (*e, measure_jump(spec, sep, rp, *e, anchor, opts))).collect();
    let mut measurements = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in results {
        match r {
            Ok(m) => measurements.push(m),
            Err(err) => failures.push((e, err.to_string())),
        }
    }
    let slope = fit_slope(&measurements.iter().map(|m| (m.eps, m.error)).collect::<Vec<_>>());
    let slope_raw = fit_slope(&measurements.iter().map(|m| (m.eps, m.measured.abs())).collect::<Vec<_>>());
    Ok(JumpStudy { flagged: measurements.len() < 3, measurements, failures, slope, slope_raw })
}

impl JumpStudy {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["eps", "measured", "predicted", "error", "i_in", "i_out"])?;
        for m in &self.measurements {
            out.write_record([m.eps, m.measured, m.predicted, m.error, m.i_in, m.i_out].iter().map(|x| format!("{x:.15e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

impl Trajectory {
    /// CSV with columns t, p, q, I, phi, drift (d = 1) or t, p1.., q1.., I, phi, drift.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let d = self.states.first().map(|s| (s.len() - 2) / 2).unwrap_or(1);
        let mut header = vec!["t".to_string()];
        if d == 1 {
            header.extend(["p".into(), "q".into()]);
        } else {
            header.extend((1..=d).map(|k| format!("p{k}")));
            header.extend((1..=d).map(|k| format!("q{k}")));
        }
        header.extend(["I".into(), "phi".into(), "drift".into()]);
        out.write_record(&header)?;
        for ((t, y), dr) in self.times.iter().zip(&self.states).zip(&self.drift) {
            let mut rec = vec![*t];
            rec.extend(y);
            rec.push(*dr);
            out.write_record(rec.iter().map(|x| format!("{x:.15e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::melnikov::{Melnikov, MelnikovTable};
    use crate::model::{separatrix, Perturbation};
    use crate::reduction::{discover_curves, ContinuationOptions, SharedModel};
    use std::sync::Arc;

    fn pendulum(p: Perturbation) -> (SystemSpec, Separatrix) {
        let spec = SystemSpec::pendulum(p, (0.5, 2.0)).unwrap();
        let sep = separatrix(&spec).unwrap();
        (spec, sep)
    }

    fn reference_rp(spec: &SystemSpec, sep: &Separatrix) -> ReducedPoincare {
        let direct = Melnikov::new(spec, sep, 1e-10).unwrap();
        let table = MelnikovTable::build(&direct, 48).unwrap();
        let model: SharedModel = Arc::new(table);
        let curves = discover_curves(model.as_ref(), spec.i_range, 4, 32, ContinuationOptions::default()).unwrap();
        ReducedPoincare::new(model, curves[0].clone()).unwrap()
    }

    #[test]
    fn unperturbed_separatrix_invariants() {
        let (spec, sep) = pendulum(Perturbation::reference());
        let (p, q) = sep.state(-30.0);
        let tr = integrate(&spec, 0.0, &[p[0], q[0], 1.3, 0.2], (-30.0, 30.0), 1e-13).unwrap();
        assert!(tr.diagnostic.is_none());
        for y in &tr.states {
            let e = 0.5 * y[0] * y[0] + y[1].cos() - 1.0;
            assert!(e.abs() < 1e-11, "{e}");
            assert_eq!(y[2], 1.3);
        }
        assert!(tr.max_drift < 1e-11);
    }

    #[test]
    fn extended_energy_drift_stays_small() {
        let (spec, _) = pendulum(Perturbation::reference());
        let tr = integrate(&spec, 0.05, &[0.3, 1.0, 1.1, 0.4], (0.0, 40.0), 1e-12).unwrap();
        assert!(tr.max_drift < 1e-9, "{}", tr.max_drift);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn self_convergence_matches_scheme_order() {
        // Fixed steps give the effective order p of the 8th-order scheme on this problem; the
        // controller sets h⁸ ∝ tol, so endpoint error against tol should scale like tol^{p/8}.
        let (spec, _) = pendulum(Perturbation::reference());
        let z0 = [0.3, 1.0, 1.1, 0.4];
        let reference = integrate(&spec, 0.1, &z0, (0.0, 12.0), 1e-13).unwrap();
        let exact = reference.states.last().unwrap().clone();
        let endpoint_err = |tr: Trajectory| tr.states.last().unwrap().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let fixed = |h: f64| {
            let opts = Dop853Options { rtol: 1e3, atol: 1e3, h_init: Some(h), h_max: h, ..Default::default() };
            endpoint_err(integrate_with(&spec, 0.1, &z0, (0.0, 12.0), opts).unwrap())
        };
        let order = fit_slope(&[0.5, 0.4, 0.3, 0.25].map(|h| (h, fixed(h))));
        assert!(order >= 8.0 - 0.8, "fixed-step order {order}");
        let pts: Vec<(f64, f64)> = (0..=13).map(|k| 1e-6 / 2f64.powi(k)).map(|t| (t, endpoint_err(integrate(&spec, 0.1, &z0, (0.0, 12.0), t).unwrap()))).collect();
        let slope = fit_slope(&pts);
        let expected = order / 8.0;
        assert!((slope - expected).abs() <= 0.1 * expected, "tol slope {slope}, expected {expected}");
    }

    #[test]
    fn forward_backward_round_trip() {
        let (spec, _) = pendulum(Perturbation::reference());
        let z0 = [0.3, 1.0, 1.1, 0.4];
        let fw = integrate(&spec, 0.05, &z0, (0.0, 20.0), 1e-13).unwrap();
        let back = integrate(&spec, 0.05, fw.states.last().unwrap(), (20.0, 0.0), 1e-13).unwrap();
        for (a, b) in back.states.last().unwrap().iter().zip(&z0) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epsilon_jump_vanishes() {
        let (spec, sep) = pendulum(Perturbation::reference());
        let rp = reference_rp(&spec, &sep);
        let th = rp.theta_star(1.2).unwrap() + 0.3;
        let m = measure_jump(&spec, &sep, &rp, 0.0, (1.2, th, 0.0), JumpOptions::default()).unwrap();
        assert_eq!(m.measured, 0.0);
        assert_eq!(m.predicted, 0.0);
    }

    #[test]
    fn jump_sign_follows_reduced_slope() {
        let (spec, sep) = pendulum(Perturbation::reference());
        let rp = reference_rp(&spec, &sep);
        let th = rp.theta_star(1.2).unwrap() + 0.5 * rp.half_width;
        let slope = rp.eval(1.2, th).unwrap().d_theta;
        assert!(slope > 0.0);
        let m = measure_jump(&spec, &sep, &rp, 1e-2, (1.2, th, 0.0), JumpOptions::default()).unwrap();
        assert!(m.measured > 0.0, "{m:?}");
        assert!(m.error < 0.2 * m.predicted.abs(), "{m:?}");
        assert!(m.window_distance.0 < 1e-4 && m.window_distance.1 < 1e-4);
    }

    #[test]
    fn doubling_the_window_keeps_the_jump() {
        let (spec, sep) = pendulum(Perturbation::reference());
        let rp = reference_rp(&spec, &sep);
        let th = rp.theta_star(1.2).unwrap() + 0.5 * rp.half_width;
        let base = JumpOptions::default();
        let wide = JumpOptions { window_periods: 2.0 * base.window_periods, ..base };
        let a = measure_jump(&spec, &sep, &rp, 1e-2, (1.2, th, 0.0), base).unwrap();
        let b = measure_jump(&spec, &sep, &rp, 1e-2, (1.2, th, 0.0), wide).unwrap();
        assert!((a.measured - b.measured).abs() < base.nhim_tol, "{} vs {}", a.measured, b.measured);
    }

    #[test]
    fn closest_approach_shrinks_with_epsilon() {
        let (spec, sep) = pendulum(Perturbation::reference());
        let rp = reference_rp(&spec, &sep);
        let th = rp.theta_star(1.2).unwrap() + 0.3;
        let d: Vec<f64> = [3e-2, 1e-2, 3e-3].iter().map(|e| closest_approach(&spec, &sep, &rp, *e, (1.2, th, 0.0), 60.0).unwrap()).collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn slope_fit_recovers_power() {
        let pts: Vec<(f64, f64)> = [1e-3, 3e-3, 1e-2].iter().map(|x: &f64| (*x, 5.0 * x.powi(2))).collect();
        assert!((fit_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
