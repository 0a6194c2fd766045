//! Scattering map, inner map and twist landing on the section {s = 0}
//!
//! On the section θ = φ, so both maps act on the same (I, angle) pairs. The scattering map is the
//! time-ε flow of the vector field (∂θL*, −∂IL*), i.e. the time-(−ε) Hamiltonian flow of L*;
//! the inner map is the time-2π map of K = G(I) + ε h(0, 0, I, φ, t).
//! Angles are carried as real lifts; nothing here wraps them.

use crate::certify;
use crate::model::{wrap_pi, SystemSpec};
use crate::ode::{implicit_midpoint_step, rk4_step, OdeError};
use crate::reduction::{ReducedFunction, ReductionError};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Write;

/// Largest RK4 substep of the scattering flow.
pub const SCATTERING_SUBSTEP: f64 = 2e-3;
/// Implicit midpoint steps per inner-map period.
pub const INNER_STEPS: usize = 256;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum MapError {
    #[error("left scattering domain at (I, θ) = ({0:.6}, {1:.6}): {2}")]
    LeftDomain(f64, f64, String),
    #[error(transparent)]
    Reduction(ReductionError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("no crossing within N_max = {0}")]
    NoCrossing(usize),
    #[error("certification failed (largest certified radius {best:.3e})")]
    Certification { best: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// (I, φ)
    Inner,
    /// (I, θ)
    Scattering,
}

/// A point of the section Λ ∩ {s = 0} in one of the two charts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub chart: Chart,
    pub action: f64,
    pub angle: f64,
}

impl MapPoint {
    pub fn inner(action: f64, phi: f64) -> Self {
        MapPoint { chart: Chart::Inner, action, angle: phi }
    }
    pub fn scattering(action: f64, theta: f64) -> Self {
        MapPoint { chart: Chart::Scattering, action, angle: theta }
    }
    /// θ = φ − s ω(I) with s = 0.
    pub fn to_chart(self, chart: Chart) -> Self {
        MapPoint { chart, ..self }
    }
    pub fn pair(self) -> (f64, f64) {
        (self.action, self.angle)
    }
}

fn domain_err(x: (f64, f64), e: ReductionError) -> MapError {
    match e {
        ReductionError::OutsideCurve(..) | ReductionError::OutsideNeighborhood(..) => MapError::LeftDomain(x.0, x.1, e.to_string()),
        other => MapError::Reduction(other),
    }
}

/// (İ, θ̇) = (∂θL*, −∂IL*).
pub fn scattering_field<R: ReducedFunction + ?Sized>(rf: &R, x: (f64, f64)) -> Result<[f64; 2], MapError> {
    let e = rf.eval(x.0, x.1).map_err(|e| domain_err(x, e))?;
    Ok([e.d_theta, -e.d_action])
}

/// Flow of the scattering field for time `t` (either sign) with RK4 substeps of at most 2e-3.
pub fn scattering_flow<R: ReducedFunction + ?Sized>(rf: &R, t: f64, x: (f64, f64)) -> Result<(f64, f64), MapError> {
    if t == 0.0 {
        return Ok(x);
    }
    let n = (t.abs() / SCATTERING_SUBSTEP).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let mut y = vec![x.0, x.1];
    for _ in 0..n {
        let mut err = None;
        let mut f = |_t: f64, y: &[f64], out: &mut [f64]| match scattering_field(rf, (y[0], y[1])) {
            Ok(v) => out.copy_from_slice(&v),
            Err(e) => {
                err.get_or_insert(e);
                out.fill(0.0);
            }
        };
        let next = rk4_step(&mut f, 0.0, &y, h);
        if let Some(e) = err {
            return Err(e);
        }
        y = next;
    }
    Ok((y[0], y[1]))
}

/// S_ε(I, θ): the time-(−ε) flow of L*, to first order (I + ε∂θL*, θ − ε∂IL*).
pub fn scattering_step<R: ReducedFunction + ?Sized>(rf: &R, eps: f64, x: (f64, f64)) -> Result<(f64, f64), MapError> {
    if eps < 0.0 {
        return Err(MapError::Invalid(format!("epsilon {eps} < 0")));
    }
    scattering_flow(rf, eps, x)
}

/// S_ε^m by m literal steps.
pub fn scattering_iterate<R: ReducedFunction + ?Sized>(rf: &R, eps: f64, x: (f64, f64), m: usize) -> Result<(f64, f64), MapError> {
    let mut y = x;
    for _ in 0..m {
        y = scattering_step(rf, eps, y)?;
    }
    Ok(y)
}

/// Stroboscopic time-2π map of K = G(I) + ε h(0, 0, I, φ, t).
#[derive(Debug, Clone)]
pub struct InnerMap {
    pub spec: SystemSpec,
    pub eps: f64,
    /// True when K reduces to G, so the map is the exact twist (I, φ + 2πω(I)).
    pub exact: bool,
    pub steps: usize,
}

/// Whether h(0, 0, I, φ, t) vanishes identically (after merging equal harmonics).
pub fn nhim_restriction_vanishes(spec: &SystemSpec) -> bool {
    let mut acc: BTreeMap<(u32, i32, i32), Complex64> = BTreeMap::new();
    for tm in &spec.perturbation.terms {
        if tm.indices.p.iter().any(|a| *a > 0) {
            continue;
        }
        let (mut l, mut m, mut ph) = (tm.indices.phi, tm.indices.t, tm.phase);
        if (l, m) < (0, 0) {
            l = -l;
            m = -m;
            ph = -ph;
        }
        let c = if (l, m) == (0, 0) { Complex64::new(tm.coeff * ph.cos(), 0.0) } else { Complex64::from_polar(tm.coeff, ph) };
        *acc.entry((tm.indices.i, l, m)).or_default() += c;
    }
    acc.values().all(|c| c.norm() <= 1e-14)
}

impl InnerMap {
    pub fn new(spec: &SystemSpec, eps: f64) -> Self {
        InnerMap { spec: spec.clone(), eps, exact: eps == 0.0 || nhim_restriction_vanishes(spec), steps: INNER_STEPS }
    }

    pub fn apply(&self, x: (f64, f64)) -> Result<(f64, f64), MapError> {
        if self.exact {
            return Ok((x.0, x.1 + TAU * self.spec.omega(x.0)));
        }
        let d = self.spec.d;
        let zero = vec![0.0; d];
        let eps = self.eps;
        let spec = &self.spec;
        let mut f = |t: f64, y: &[f64], out: &mut [f64]| {
            let dv = spec.perturbation.derivs(&zero, &zero, y[0], y[1], t);
            out[0] = -eps * dv.dphi;
            out[1] = spec.omega(y[0]) + eps * dv.di;
        };
        let h = TAU / self.steps as f64;
        let mut y = vec![x.0, x.1];
        for k in 0..self.steps {
            y = implicit_midpoint_step(&mut f, k as f64 * h, &y, h)?;
        }
        Ok((y[0], y[1]))
    }

    pub fn iterate(&self, x: (f64, f64), n: usize) -> Result<(f64, f64), MapError> {
        let mut y = x;
        for _ in 0..n {
            y = self.apply(y)?;
        }
        Ok(y)
    }
}

/// T_ε(I, φ) for one period.
pub fn inner_map(spec: &SystemSpec, eps: f64, x: (f64, f64)) -> Result<(f64, f64), MapError> {
    InnerMap::new(spec, eps).apply(x)
}

/// A graph θ = g(I) over a closed I-interval.
pub trait Graph: Sync {
    fn domain(&self) -> (f64, f64);
    fn theta(&self, action: f64) -> f64;
}

/// Graph given by a closure.
pub struct FnGraph<F: Fn(f64) -> f64 + Sync> {
    pub lo: f64,
    pub hi: f64,
    pub f: F,
}

impl<F: Fn(f64) -> f64 + Sync> Graph for FnGraph<F> {
    fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
    fn theta(&self, action: f64) -> f64 {
        (self.f)(action)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LandingOptions {
    pub n_max: usize,
    /// The source arc is the part of the source graph within this fraction of δ from the centre.
    pub arc_fraction: f64,
    pub boundary_samples: usize,
}

impl Default for LandingOptions {
    fn default() -> Self {
        LandingOptions { n_max: 20000, arc_fraction: 0.9, boundary_samples: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landing {
    pub n: usize,
    /// Landing centre on the destination graph, θ lifted so that it lies on T^N of the source arc.
    pub center: (f64, f64),
    /// δ′ = half the largest certified radius.
    pub radius: f64,
    pub certified: f64,
    pub boundary_samples: usize,
}

/// I-interval of the source arc: points of the graph within `r` of `c`.
fn source_arc<G: Graph + ?Sized>(src: &G, c: (f64, f64), r: f64) -> (f64, f64) {
    let (lo, hi) = src.domain();
    let dist = |i: f64| (i - c.0).hypot(wrap_pi(src.theta(i) - c.1));
    let reach = |dir: f64| {
        let bound = if dir > 0.0 { (c.0 + r).min(hi) } else { (c.0 - r).max(lo) };
        if dist(bound) <= r {
            return bound;
        }
        let (mut a, mut b) = (c.0, bound);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if dist(m) <= r {
                a = m;
            } else {
                b = m;
            }
        }
        a
    };
    (reach(-1.0), reach(1.0))
}

/// Crossings of T₀^N(src arc) with the destination graph, as (I, lifted θ on the image).
pub fn twist_crossings<G1: Graph + ?Sized, G2: Graph + ?Sized>(
    omega: &(dyn Fn(f64) -> f64 + Sync),
    src: &G1,
    arc: (f64, f64),
    dst: &G2,
    n: usize,
) -> Vec<(f64, f64)> {
    let (dlo, dhi) = dst.domain();
    let (a, b) = (arc.0.max(dlo), arc.1.min(dhi));
    if !(b > a) {
        return vec![];
    }
    let image = |i: f64| src.theta(i) + TAU * n as f64 * omega(i);
    let d = |i: f64| image(i) - dst.theta(i);
    let span = (d(b) - d(a)).abs();
    let k = 64 + (8.0 * span / TAU).ceil() as usize;
    let mut out = Vec::new();
    let mut prev = (a, d(a));
    for s in 1..=k {
        let x = a + (b - a) * s as f64 / k as f64;
        let cur = (x, d(x));
        let (fa, fb) = ((prev.1 / TAU).floor(), (cur.1 / TAU).floor());
        if fa != fb {
            // One or more multiples of 2π between the samples; refine the nearest one.
            let target = TAU * fa.max(fb);
            let (mut lo, mut hi) = (prev.0, cur.0);
            let sign_lo = d(lo) - target;
            for _ in 0..80 {
                let m = 0.5 * (lo + hi);
                if (d(m) - target) * sign_lo > 0.0 {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            let i = 0.5 * (lo + hi);
            out.push((i, dst.theta(i) + target));
        }
        prev = cur;
    }
    out
}

/// Smallest N for which T₀^N of the source arc crosses the destination graph, with a certified landing
/// ball: `map` (T_ε in lifted coordinates) applied N times to boundary samples of B_δ(center) must enclose it.
pub fn twist_landing<G1: Graph + ?Sized, G2: Graph + ?Sized>(
    map: &(dyn Fn((f64, f64)) -> Result<(f64, f64), MapError> + Sync),
    omega: &(dyn Fn(f64) -> f64 + Sync),
    src: &G1,
    center: (f64, f64),
    delta: f64,
    dst: &G2,
    opts: LandingOptions,
) -> Result<Landing, MapError> {
    if !(delta > 0.0) {
        return Err(MapError::Invalid(format!("delta {delta} <= 0")));
    }
    let arc = source_arc(src, center, opts.arc_fraction * delta);
    let mut found = None;
    for n in 1..=opts.n_max {
        let xs = twist_crossings(omega, src, arc, dst, n);
        if let Some(best) = xs.into_iter().min_by(|a, b| (a.0 - center.0).abs().total_cmp(&(b.0 - center.0).abs())) {
            found = Some((n, best));
            break;
        }
    }
    let Some((n, x2)) = found else {
        return Err(MapError::NoCrossing(opts.n_max));
    };
    let certified = certify_image(map, center, delta, n, x2, opts.boundary_samples)?;
    if !(certified > 0.0) {
        return Err(MapError::Certification { best: certified });
    }
    Ok(Landing { n, center: x2, radius: 0.5 * certified, certified, boundary_samples: opts.boundary_samples })
}

/// Largest radius r with B_r(target) enclosed by map^n of the boundary of B_δ(center).
pub fn certify_image(
    map: &(dyn Fn((f64, f64)) -> Result<(f64, f64), MapError> + Sync),
    center: (f64, f64),
    delta: f64,
    n: usize,
    target: (f64, f64),
    samples: usize,
) -> Result<f64, MapError> {
    let boundary = certify::circle(center, delta, samples.max(8));
    let image: Vec<(f64, f64)> = boundary
        .par_iter()
        .map(|p| {
            let mut y = *p;
            for _ in 0..n {
                y = map(y)?;
            }
            Ok(y)
        })
        .collect::<Result<_, MapError>>()?;
    Ok(certify::enclosed_radius(&image, target))
}

/// Writes an orbit as CSV rows (index, I, angle).
pub fn write_orbit_csv<W: Write>(w: W, chart: Chart, orbit: &[(f64, f64)]) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let angle = match chart {
        Chart::Inner => "phi",
        Chart::Scattering => "theta",
    };
    out.write_record(["index", "I", angle])?;
    for (k, (i, a)) in orbit.iter().enumerate() {
        out.write_record([k.to_string(), format!("{i:.15e}"), format!("{:.15e}", a.rem_euclid(TAU))])?;
    }
    out.flush()?;
    Ok(())
}
