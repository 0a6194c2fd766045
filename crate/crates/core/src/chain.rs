//! Transition chains: scattering climbs along rungs alternating with inner-map transfers
//!
//! Every leg carries a source ball and a certified destination ball: the images of boundary samples
//! of the source ball must wind around the destination centre and stay at least its radius away.
//! A climb from z₁ runs M = ⌊t/ε⌋ scattering steps, t being the L*-flow time from z₁ to the rung's
//! upper end; its destination ball is centred at S^M(z₁) with radius r/(2C), C = σ_max(DS^M(z₁)).

use crate::certify;
use crate::ladder::{Ladder, LadderRung};
use crate::maps::{certify_image, scattering_flow, scattering_iterate, twist_landing, InnerMap, LandingOptions, MapError};
use crate::model::{wrap_pi, SystemSpec};
use crate::reduction::ReducedFunction;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ChainError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("containment not certified: need radius {need:.3e}, certified {best:.3e}")]
    Certification { need: f64, best: f64 },
    #[error("leg end {distance:.3e} away from its rung anchor (delta {delta:.3e})")]
    Anchor { distance: f64, delta: f64 },
    #[error("flow does not reach I = {0} along the rung")]
    FlowTime(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegKind {
    Scattering,
    Inner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub kind: LegKind,
    /// Curve index j of the reduced function driving a climb (of the source rung for transfers).
    pub curve: usize,
    /// Ladder indices of the source and destination rungs.
    pub rung: usize,
    pub target_rung: usize,
    pub start: (f64, f64),
    pub end: (f64, f64),
    /// M for climbs, N for transfers.
    pub count: usize,
    pub radius_in: f64,
    pub radius_out: f64,
    pub certified: f64,
    /// Rung end point x the leg end approximates, and |x − end|.
    pub anchor: (f64, f64),
    pub anchor_distance: f64,
    pub flow_time: Option<f64>,
    pub distortion: Option<f64>,
    pub boundary_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegFailure {
    pub leg: usize,
    pub kind: LegKind,
    pub rung: usize,
    pub message: String,
    /// Bracket (passing ε, failing ε) from the bisection, when one was run.
    pub eps0: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionChain {
    pub legs: Vec<Leg>,
    pub eps: f64,
    pub delta: f64,
    pub i_minus: f64,
    pub i_plus: f64,
    pub complete: bool,
    pub failure: Option<LegFailure>,
}

#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    pub boundary_samples: usize,
    /// Bisection steps for ε₀ of a failing leg (0 disables).
    pub eps0_bisections: usize,
    pub landing: LandingOptions,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions { boundary_samples: 64, eps0_bisections: 16, landing: LandingOptions::default() }
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(wrap_pi(a.1 - b.1))
}

/// L*-flow time from `x` until the action reaches `target` (x must lie below it on an ascending level).
pub fn flow_time_to<R: ReducedFunction + ?Sized>(rf: &R, x: (f64, f64), target: f64) -> Result<f64, ChainError> {
    if x.0 >= target {
        return Ok(0.0);
    }
    let h = crate::maps::SCATTERING_SUBSTEP;
    let mut t = 0.0;
    let mut y = x;
    for _ in 0..10_000_000usize {
        let next = scattering_flow(rf, h, y)?;
        if next.0 >= target {
            let (mut a, mut b) = (0.0, h);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if scattering_flow(rf, m, y)?.0 >= target {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Ok(t + 0.5 * (a + b));
        }
        if !(next.0 > y.0) {
            return Err(ChainError::FlowTime(target));
        }
        y = next;
        t += h;
    }
    Err(ChainError::FlowTime(target))
}

fn sigma_max(j: [[f64; 2]; 2]) -> f64 {
    let a = j[0][0] * j[0][0] + j[1][0] * j[1][0];
    let b = j[0][0] * j[0][1] + j[1][0] * j[1][1];
    let c = j[0][1] * j[0][1] + j[1][1] * j[1][1];
    (0.5 * (a + c) + (0.25 * (a - c).powi(2) + b * b).sqrt()).sqrt()
}

/// Images of `k` boundary points of the ball under S_ε^M.
fn climb_polygon<R: ReducedFunction + ?Sized>(rf: &R, eps: f64, m: usize, ball: Ball, k: usize) -> Result<Vec<(f64, f64)>, MapError> {
    certify::circle(ball.center, ball.radius, k).par_iter().map(|p| scattering_iterate(rf, eps, *p, m)).collect()
}

/// Climbs from `src` along `rung` with M = ⌊t/ε⌋ scattering steps.
pub fn climb_rung<R: ReducedFunction + ?Sized>(rf: &R, rung: &LadderRung, eps: f64, src: Ball, delta: f64, samples: usize) -> Result<Leg, ChainError> {
    if !(eps > 0.0) {
        return Err(ChainError::Invalid(format!("epsilon {eps} must be positive")));
    }
    let anchor = rung.upper();
    let t = flow_time_to(rf, src.center, anchor.0)?;
    let m = (t / eps).floor() as usize;
    let end = scattering_iterate(rf, eps, src.center, m)?;
    let fd = 1e-6 * src.radius.max(1e-3);
    let col = |d: (f64, f64)| -> Result<[f64; 2], MapError> {
        let a = scattering_iterate(rf, eps, (src.center.0 + d.0, src.center.1 + d.1), m)?;
        let b = scattering_iterate(rf, eps, (src.center.0 - d.0, src.center.1 - d.1), m)?;
        Ok([(a.0 - b.0) / (2.0 * fd), (a.1 - b.1) / (2.0 * fd)])
    };
    let (ci, ct) = (col((fd, 0.0))?, col((0.0, fd))?);
    let c = sigma_max([[ci[0], ct[0]], [ci[1], ct[1]]]).max(1.0);
    let radius_out = src.radius / (2.0 * c);
    let poly = climb_polygon(rf, eps, m, src, samples)?;
    let certified = certify::enclosed_radius(&poly, end);
    if certified < radius_out {
        return Err(ChainError::Certification { need: radius_out, best: certified });
    }
    let anchor_distance = dist(anchor, end);
    if anchor_distance >= delta {
        return Err(ChainError::Anchor { distance: anchor_distance, delta });
    }
    Ok(Leg {
        kind: LegKind::Scattering,
        curve: rung.curve,
        rung: 0,
        target_rung: 0,
        start: src.center,
        end,
        count: m,
        radius_in: src.radius,
        radius_out,
        certified,
        anchor,
        anchor_distance,
        flow_time: Some(t),
        distortion: Some(c),
        boundary_samples: samples,
    })
}

/// Inner-map transfer from a ball near the end of `src_rung` onto `dst_rung` by twist landing.
pub fn transfer_rung(
    spec: &SystemSpec,
    eps: f64,
    src_rung: &LadderRung,
    src: Ball,
    dst_rung: &LadderRung,
    delta: f64,
    opts: LandingOptions,
) -> Result<Leg, ChainError> {
    let inner = InnerMap::new(spec, eps);
    let map = |x: (f64, f64)| inner.apply(x);
    let omega = |i: f64| spec.omega(i);
    let land = twist_landing(&map, &omega, src_rung, src.center, src.radius, dst_rung, opts)?;
    let anchor = dst_rung.lower();
    let anchor_distance = dist(anchor, land.center);
    if anchor_distance >= delta {
        return Err(ChainError::Anchor { distance: anchor_distance, delta });
    }
    Ok(Leg {
        kind: LegKind::Inner,
        curve: src_rung.curve,
        rung: 0,
        target_rung: 0,
        start: src.center,
        end: land.center,
        count: land.n,
        radius_in: src.radius,
        radius_out: land.radius,
        certified: land.certified,
        anchor,
        anchor_distance,
        flow_time: None,
        distortion: None,
        boundary_samples: opts.boundary_samples,
    })
}

/// Bisection (geometric, on [ε/16, ε]) for the largest passing ε of a leg predicate.
fn bisect_eps0(eps: f64, steps: usize, pass: impl Fn(f64) -> bool) -> (f64, f64) {
    let (mut lo, mut hi) = (eps / 16.0, eps);
    if !pass(lo) {
        return (0.0, lo);
    }
    for _ in 0..steps {
        let m = (lo * hi).sqrt();
        if pass(m) {
            lo = m;
        } else {
            hi = m;
        }
    }
    (lo, hi)
}

/// Threads certified balls through the ladder: climb every rung, transfer between consecutive rungs.
/// `rfs[j]` is the reduced function of curve j.
pub fn build_chain(ladder: &Ladder, rfs: &[&dyn ReducedFunction], spec: &SystemSpec, eps: f64, delta: f64, opts: ChainOptions) -> TransitionChain {
    let mut chain = TransitionChain { legs: vec![], eps, delta, i_minus: ladder.i_minus, i_plus: ladder.i_plus, complete: false, failure: None };
    let Some(first) = ladder.rungs.first() else {
        chain.failure = Some(LegFailure { leg: 0, kind: LegKind::Scattering, rung: 0, message: "empty ladder".into(), eps0: None });
        return chain;
    };
    let mut ball = Ball { center: first.lower(), radius: delta };
    for (k, rung) in ladder.rungs.iter().enumerate() {
        let Some(rf) = rfs.get(rung.curve) else {
            chain.failure = Some(LegFailure { leg: chain.legs.len(), kind: LegKind::Scattering, rung: k, message: format!("no reduced function for curve {}", rung.curve), eps0: None });
            return chain;
        };
        let climb = |e: f64| climb_rung(*rf, rung, e, ball, delta, opts.boundary_samples);
        match climb(eps) {
            Ok(mut leg) => {
                leg.rung = k;
                leg.target_rung = k;
                ball = Ball { center: leg.end, radius: leg.radius_out };
                chain.legs.push(leg);
            }
            Err(e) => {
                let eps0 = (opts.eps0_bisections > 0).then(|| bisect_eps0(eps, opts.eps0_bisections, |x| climb(x).is_ok()));
                chain.failure = Some(LegFailure { leg: chain.legs.len(), kind: LegKind::Scattering, rung: k, message: e.to_string(), eps0 });
                return chain;
            }
        }
        let Some(next) = ladder.rungs.get(k + 1) else { break };
        let transfer = |e: f64| transfer_rung(spec, e, rung, ball, next, delta, opts.landing);
        match transfer(eps) {
            Ok(mut leg) => {
                leg.rung = k;
                leg.target_rung = k + 1;
                ball = Ball { center: leg.end, radius: leg.radius_out };
                chain.legs.push(leg);
            }
            Err(e) => {
                let eps0 = (opts.eps0_bisections > 0).then(|| bisect_eps0(eps, opts.eps0_bisections, |x| transfer(x).is_ok()));
                chain.failure = Some(LegFailure { leg: chain.legs.len(), kind: LegKind::Inner, rung: k, message: e.to_string(), eps0 });
                return chain;
            }
        }
    }
    chain.complete = true;
    chain
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegCheck {
    pub leg: usize,
    pub kind: LegKind,
    pub pass: bool,
    /// |recomputed end − recorded end|.
    pub position_error: f64,
    pub certified: f64,
    pub required: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub legs: Vec<LegCheck>,
    pub start_ok: bool,
    pub end_ok: bool,
    pub pass: bool,
    pub message: String,
}

/// Re-simulates every leg with doubled boundary sampling and re-verifies every containment.
pub fn check_chain(chain: &TransitionChain, rfs: &[&dyn ReducedFunction], spec: &SystemSpec) -> ChainReport {
    if chain.legs.is_empty() {
        return ChainReport { legs: vec![], start_ok: false, end_ok: false, pass: false, message: "no legs".into() };
    }
    let eps = chain.eps;
    let checks: Vec<LegCheck> = chain
        .legs
        .iter()
        .enumerate()
        .map(|(k, leg)| {
            let samples = 2 * leg.boundary_samples;
            let ball = Ball { center: leg.start, radius: leg.radius_in };
            let res: Result<((f64, f64), f64), String> = match leg.kind {
                LegKind::Scattering => match rfs.get(leg.curve) {
                    None => Err(format!("no reduced function for curve {}", leg.curve)),
                    Some(rf) => scattering_iterate(*rf, eps, leg.start, leg.count)
                        .and_then(|end| climb_polygon(*rf, eps, leg.count, ball, samples).map(|p| (end, certify::enclosed_radius(&p, leg.end))))
                        .map_err(|e| e.to_string()),
                },
                LegKind::Inner => {
                    let inner = InnerMap::new(spec, eps);
                    let map = |x: (f64, f64)| inner.apply(x);
                    inner
                        .iterate(leg.start, leg.count)
                        .and_then(|end| certify_image(&map, leg.start, leg.radius_in, leg.count, leg.end, samples).map(|c| (end, c)))
                        .map_err(|e| e.to_string())
                }
            };
            match res {
                Ok((end, certified)) => {
                    let position_error = match leg.kind {
                        LegKind::Scattering => (end.0 - leg.end.0).hypot(end.1 - leg.end.1),
                        // A transfer lands near, not at, T^N of the source centre.
                        LegKind::Inner => 0.0,
                    };
                    let contained = certified >= leg.radius_out;
                    let pass = contained && position_error <= 1e-9;
                    let detail = if pass {
                        "ok".into()
                    } else if !contained {
                        format!("containment fails: certified {certified:.3e} < {:.3e}", leg.radius_out)
                    } else {
                        format!("end moved by {position_error:.3e}")
                    };
                    LegCheck { leg: k, kind: leg.kind, pass, position_error, certified, required: leg.radius_out, detail }
                }
                Err(e) => LegCheck { leg: k, kind: leg.kind, pass: false, position_error: f64::NAN, certified: 0.0, required: leg.radius_out, detail: e },
            }
        })
        .collect();
    let start = chain.legs[0].start.0;
    let end = chain.legs[chain.legs.len() - 1].end.0;
    let start_ok = start <= chain.i_minus + chain.delta;
    let end_ok = end >= chain.i_plus - chain.delta;
    let failed = checks.iter().filter(|c| !c.pass).count();
    let pass = failed == 0 && start_ok && end_ok && chain.complete;
    let message = format!(
        "{} legs, {failed} failed; I from {start:.6} to {end:.6} against [{}, {}] with delta {}",
        checks.len(),
        chain.i_minus,
        chain.i_plus,
        chain.delta
    );
    ChainReport { legs: checks, start_ok, end_ok, pass, message }
}

impl TransitionChain {
    pub fn net_gain(&self) -> f64 {
        match (self.legs.first(), self.legs.last()) {
            (Some(a), Some(b)) => b.end.0 - a.start.0,
            _ => 0.0,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Pseudo-orbit CSV: leg, kind, I, theta (start of every leg, then the final end).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["leg", "kind", "I", "theta"])?;
        let kind = |k: LegKind| match k {
            LegKind::Scattering => "scattering",
            LegKind::Inner => "inner",
        };
        for (k, leg) in self.legs.iter().enumerate() {
            out.write_record([k.to_string(), kind(leg.kind).into(), format!("{:.15e}", leg.start.0), format!("{:.15e}", leg.start.1.rem_euclid(TAU))])?;
        }
        if let Some(leg) = self.legs.last() {
            out.write_record([self.legs.len().to_string(), "end".into(), format!("{:.15e}", leg.end.0), format!("{:.15e}", leg.end.1.rem_euclid(TAU))])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::{build_ladder, trace_rung, LadderOptions, RungOptions};
    use crate::model::Perturbation;
    use crate::quadrature::{integrate_scalar, QuadOptions};
    use crate::reduction::{CosineReduced, CoverInterval};
    use std::f64::consts::PI;

    fn cosine() -> CosineReduced {
        CosineReduced { a0: 1.0, a1: 0.5, range: (0.0, 3.0), half_width: 0.4 * PI }
    }

    fn twist_spec() -> SystemSpec {
        SystemSpec::pendulum(Perturbation::reference(), (0.0, 3.0)).unwrap()
    }

    fn rung() -> LadderRung {
        let rf = cosine();
        let mut r = trace_rung(&rf, (1.0, 1.2 * PI), RungOptions::default()).unwrap();
        r.lo = 0.8;
        r.hi = 1.5;
        r
    }

    #[test]
    fn flow_time_matches_quadrature_along_level() {
        let rf = cosine();
        let r = rung();
        let x1 = r.lower();
        let level = rf.eval(x1.0, x1.1).unwrap().value;
        // dt = dI / İ with İ = −A sin θ and θ(I) = 2π − arccos(c / A(I)).
        let (t_quad, _) = integrate_scalar(
            |i| {
                let a = rf.a0 + rf.a1 * i;
                let th = 2.0 * PI - (level / a).acos();
                1.0 / (-a * th.sin())
            },
            0.8,
            1.5,
            QuadOptions { abs_tol: 1e-13, ..Default::default() },
        )
        .unwrap();
        let t = flow_time_to(&rf, x1, 1.5).unwrap();
        assert!((t - t_quad).abs() < 1e-9, "{t} vs {t_quad}");
        let leg = climb_rung(&rf, &r, 1e-3, Ball { center: x1, radius: 0.01 }, 0.01, 64).unwrap();
        assert_eq!(leg.count, (t_quad / 1e-3).floor() as usize);
    }

    #[test]
    fn halving_epsilon_doubles_m() {
        let rf = cosine();
        let r = rung();
        let b = Ball { center: r.lower(), radius: 0.01 };
        let m1 = climb_rung(&rf, &r, 2e-3, b, 0.02, 64).unwrap().count;
        let m2 = climb_rung(&rf, &r, 1e-3, b, 0.02, 64).unwrap().count;
        assert!((m2 as i64 - 2 * m1 as i64).abs() <= 1, "{m1} {m2}");
    }

    #[test]
    fn climb_ends_within_one_step_of_the_rung_end() {
        let rf = cosine();
        let r = rung();
        let eps = 1e-3;
        let leg = climb_rung(&rf, &r, eps, Ball { center: r.lower(), radius: 0.01 }, 0.01, 64).unwrap();
        let vmax = r.samples.iter().map(|s| s.d_theta).fold(0.0, f64::max);
        assert!(leg.end.0 <= r.hi && r.hi - leg.end.0 <= eps * vmax * 1.01);
        let l0 = rf.eval(leg.start.0, leg.start.1).unwrap().value;
        assert!((rf.eval(leg.end.0, leg.end.1).unwrap().value - l0).abs() < 1e-10);
        assert!(leg.certified >= leg.radius_out);
    }

    fn steep() -> (CosineReduced, Ladder) {
        let rf = CosineReduced { a0: 0.1, a1: 2.0, range: (0.0, 3.0), half_width: 0.4 * PI };
        let cover = [CoverInterval { curve: 0, lo: 0.0, hi: 3.0 }];
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let ladder = build_ladder(&rfs, &cover, 0.3, 2.0, 0.02, LadderOptions::default()).unwrap();
        (rf, ladder)
    }

    #[test]
    fn multi_rung_chain_with_transfers_is_certified() {
        let (rf, ladder) = steep();
        assert!(ladder.rungs.len() >= 2);
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let spec = twist_spec();
        let chain = build_chain(&ladder, &rfs, &spec, 1e-3, 0.02, ChainOptions::default());
        assert!(chain.complete, "{:?}", chain.failure);
        let kinds: Vec<LegKind> = chain.legs.iter().map(|l| l.kind).collect();
        for (k, kind) in kinds.iter().enumerate() {
            assert_eq!(*kind, if k % 2 == 0 { LegKind::Scattering } else { LegKind::Inner });
        }
        for l in &chain.legs {
            match l.kind {
                LegKind::Scattering => assert!(l.end.0 >= l.start.0),
                LegKind::Inner => assert!((l.end.0 - l.start.0).abs() <= l.radius_in),
            }
            assert!(l.anchor_distance < 0.02);
        }
        let report = check_chain(&chain, &rfs, &spec);
        assert!(report.pass, "{report:?}");
        let mut perturbed = chain.clone();
        perturbed.eps *= 1.1;
        let bad = check_chain(&perturbed, &rfs, &spec);
        assert!(bad.legs.iter().any(|c| c.detail.contains("containment fails")), "{bad:?}");
    }

    #[test]
    fn large_epsilon_fails_with_reported_eps0() {
        let (rf, ladder) = steep();
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let chain = build_chain(&ladder, &rfs, &twist_spec(), 0.2, 0.02, ChainOptions::default());
        assert!(!chain.complete);
        let f = chain.failure.unwrap();
        let (lo, hi) = f.eps0.unwrap();
        assert!(lo < hi && hi <= 0.2);
    }

    #[test]
    fn empty_chain_report() {
        let chain = TransitionChain { legs: vec![], eps: 1e-3, delta: 0.01, i_minus: 0.6, i_plus: 1.9, complete: false, failure: None };
        let rfs: [&dyn ReducedFunction; 0] = [];
        let r = check_chain(&chain, &rfs, &twist_spec());
        assert_eq!(r.message, "no legs");
        assert!(!r.pass);
    }
}
