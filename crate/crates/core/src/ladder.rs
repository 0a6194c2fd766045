//! Ascending ladders: level-curve segments of L*ⱼ that are graphs over I with İ = ∂θL*ⱼ > 0.

use crate::maps::Graph;
use crate::model::wrap_pi;
use crate::reduction::{CoverInterval, ReducedFunction, ReductionError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LadderError {
    #[error("start point is not ascending: dθL* = {0:.3e} <= pos_floor {1:.3e}")]
    NotAscending(f64, f64),
    #[error("level corrector diverged at I = {0}")]
    Corrector(f64),
    #[error("rung too short (a single sample)")]
    TooShort,
    #[error("no admissible rung at I = {0}")]
    NoRung(f64),
    #[error("delta {delta} not below the admissible delta0 = {delta0}")]
    DeltaTooLarge { delta: f64, delta0: f64 },
    #[error("cover and reduced functions differ in length ({0} vs {1})")]
    Mismatch(usize, usize),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RungStop {
    Positivity,
    Slope,
    Domain,
    Corrector,
}

#[derive(Debug, Clone, Copy)]
pub struct RungOptions {
    /// Largest I-step.
    pub step: f64,
    pub pos_floor: f64,
    pub slope_max: f64,
    /// Stop rules are located to this I-resolution.
    pub h_min: f64,
}

impl Default for RungOptions {
    fn default() -> Self {
        RungOptions { step: 5e-3, pos_floor: 1e-6, slope_max: 100.0, h_min: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RungSample {
    pub action: f64,
    pub theta: f64,
    /// df/dI = −∂IL* / ∂θL*.
    pub slope: f64,
    pub d_theta: f64,
    pub drift: f64,
}

/// Segment of the level set {L*ⱼ = level} traced as a graph θ = f(I).
///
/// `samples` hold the full trace; [`lo`, `hi`] is the truncated rung, and the rest serves as the
/// extension used by transfers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub curve: usize,
    pub index: usize,
    pub level: f64,
    pub samples: Vec<RungSample>,
    pub lo: f64,
    pub hi: f64,
    pub stop_lo: RungStop,
    pub stop_hi: RungStop,
}

fn hermite(a: &RungSample, b: &RungSample, x: f64) -> f64 {
    let h = b.action - a.action;
    let t = (x - a.action) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * a.theta + (t3 - 2.0 * t2 + t) * h * a.slope + (-2.0 * t3 + 3.0 * t2) * b.theta + (t3 - t2) * h * b.slope
}

impl LadderRung {
    pub fn trace_lo(&self) -> f64 {
        self.samples[0].action
    }
    pub fn trace_hi(&self) -> f64 {
        self.samples[self.samples.len() - 1].action
    }

    /// f(I) on the full trace (cubic Hermite between samples).
    pub fn theta_at(&self, action: f64) -> f64 {
        let x = action.clamp(self.trace_lo(), self.trace_hi());
        let k = self.samples.partition_point(|s| s.action <= x).clamp(1, self.samples.len() - 1);
        hermite(&self.samples[k - 1], &self.samples[k], x)
    }

    /// x¹ = (I¹, f(I¹)).
    pub fn lower(&self) -> (f64, f64) {
        (self.lo, self.theta_at(self.lo))
    }
    /// x² = (I², f(I²)).
    pub fn upper(&self) -> (f64, f64) {
        (self.hi, self.theta_at(self.hi))
    }

    /// Samples inside the truncated interval.
    pub fn truncated(&self) -> impl Iterator<Item = &RungSample> {
        self.samples.iter().filter(move |s| s.action >= self.lo - 1e-15 && s.action <= self.hi + 1e-15)
    }

    pub fn min_d_theta(&self) -> f64 {
        self.truncated().map(|s| s.d_theta).fold(f64::INFINITY, f64::min)
    }

    pub fn max_drift(&self) -> f64 {
        self.truncated().map(|s| s.drift).fold(0.0, f64::max)
    }
}

impl Graph for LadderRung {
    fn domain(&self) -> (f64, f64) {
        (self.trace_lo(), self.trace_hi())
    }
    fn theta(&self, action: f64) -> f64 {
        self.theta_at(action)
    }
}

enum Step {
    Ok(RungSample),
    Stop(RungStop),
}

fn level_point<R: ReducedFunction + ?Sized>(rf: &R, level: f64, action: f64, mut theta: f64, opts: &RungOptions) -> Step {
    let tol = 1e-13 * level.abs().max(1.0);
    for _ in 0..30 {
        let e = match rf.eval(action, theta) {
            Ok(e) => e,
            Err(_) => return Step::Stop(RungStop::Domain),
        };
        let r = e.value - level;
        if r.abs() <= tol {
            if e.d_theta <= opts.pos_floor {
                return Step::Stop(RungStop::Positivity);
            }
            let slope = -e.d_action / e.d_theta;
            if slope.abs() > opts.slope_max {
                return Step::Stop(RungStop::Slope);
            }
            return Step::Ok(RungSample { action, theta, slope, d_theta: e.d_theta, drift: r.abs() });
        }
        if e.d_theta <= opts.pos_floor {
            return Step::Stop(RungStop::Positivity);
        }
        let d = r / e.d_theta;
        if d.abs() > 0.5 {
            return Step::Stop(RungStop::Corrector);
        }
        theta -= d;
    }
    Step::Stop(RungStop::Corrector)
}

/// Traces the level set of L* through `start` in both I-directions.
pub fn trace_rung<R: ReducedFunction + ?Sized>(rf: &R, start: (f64, f64), opts: RungOptions) -> Result<LadderRung, LadderError> {
    let e = rf.eval(start.0, start.1)?;
    if e.d_theta <= opts.pos_floor {
        return Err(LadderError::NotAscending(e.d_theta, opts.pos_floor));
    }
    let level = e.value;
    let first = match level_point(rf, level, start.0, start.1, &opts) {
        Step::Ok(s) => s,
        Step::Stop(_) => return Err(LadderError::Corrector(start.0)),
    };
    let (alo, ahi) = rf.action_range();
    let mut halves = Vec::new();
    for dir in [1.0, -1.0] {
        let mut pts = vec![first];
        let mut h = opts.step;
        let stop = loop {
            let cur = *pts.last().unwrap();
            // Keep the θ-increment per step below 0.02.
            let step = h.min(0.02 / cur.slope.abs().max(1e-12));
            let next_i = cur.action + dir * step;
            let outside = next_i < alo || next_i > ahi;
            let res = if outside { Step::Stop(RungStop::Domain) } else { level_point(rf, level, next_i, cur.theta + dir * step * cur.slope, &opts) };
            match res {
                Step::Ok(s) => {
                    pts.push(s);
                    h = (h * 1.5).min(opts.step);
                }
                Step::Stop(reason) => {
                    if step <= opts.h_min {
                        break reason;
                    }
                    h = step * 0.5;
                }
            }
        };
        halves.push((pts, stop));
    }
    let (fwd, stop_hi) = halves.remove(0);
    let (mut bwd, stop_lo) = halves.remove(0);
    bwd.reverse();
    bwd.pop();
    bwd.extend(fwd);
    if bwd.len() < 2 {
        return Err(LadderError::TooShort);
    }
    let (lo, hi) = (bwd[0].action, bwd[bwd.len() - 1].action);
    Ok(LadderRung { curve: 0, index: 0, level, samples: bwd, lo, hi, stop_lo, stop_hi })
}

#[derive(Debug, Clone, Copy)]
pub struct LadderOptions {
    pub seeds: usize,
    pub rung: RungOptions,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions { seeds: 24, rung: RungOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    /// Rungs in climbing order; `curve` and `index` give (j, i).
    pub rungs: Vec<LadderRung>,
    pub delta: f64,
    pub delta0: f64,
    pub i_minus: f64,
    pub i_plus: f64,
    /// Effective interval per curve after trimming overlaps to a junction.
    pub intervals: Vec<(f64, f64)>,
}

impl Ladder {
    pub fn covered(&self) -> (f64, f64) {
        (self.rungs.first().map(|r| r.lo).unwrap_or(f64::NAN), self.rungs.last().map(|r| r.hi).unwrap_or(f64::NAN))
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// max |∂θL*| over a 9 × 9 sample of the neighborhood.
pub fn max_d_theta<R: ReducedFunction + ?Sized>(rf: &R, range: (f64, f64)) -> f64 {
    let w = rf.half_width();
    let mut m: f64 = 0.0;
    for a in 0..9 {
        let action = range.0 + (range.1 - range.0) * a as f64 / 8.0;
        let Ok(ts) = rf.theta_star(action) else { continue };
        for b in 0..9 {
            let off = w * (b as f64 / 4.0 - 1.0);
            if let Ok(e) = rf.eval(action, ts + off) {
                m = m.max(e.d_theta.abs());
            }
        }
    }
    m
}

/// δ₀ = min(¼ of the smallest neighborhood half-width, ¼ of the shortest effective interval).
pub fn admissible_delta(rfs: &[&dyn ReducedFunction], intervals: &[(f64, f64)]) -> f64 {
    let w = rfs.iter().map(|r| r.half_width()).fold(f64::INFINITY, f64::min);
    let len = intervals.iter().map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
    0.25 * w.min(len)
}

/// Effective per-curve intervals: ends clipped to [I⁻, I⁺], overlaps cut at their midpoints.
pub fn effective_intervals(cover: &[CoverInterval], i_minus: f64, i_plus: f64) -> Vec<(f64, f64)> {
    let k = cover.len();
    (0..k)
        .map(|j| {
            let lo = if j == 0 { cover[0].lo.max(i_minus) } else { 0.5 * (cover[j].lo + cover[j - 1].hi) };
            let hi = if j + 1 == k { cover[j].hi.min(i_plus) } else { 0.5 * (cover[j + 1].lo + cover[j].hi) };
            (lo, hi)
        })
        .collect()
}

/// Builds the ladder over a cover; `rfs[j]` is the reduced function of `cover[j]`.
pub fn build_ladder(
    rfs: &[&dyn ReducedFunction],
    cover: &[CoverInterval],
    i_minus: f64,
    i_plus: f64,
    delta: f64,
    opts: LadderOptions,
) -> Result<Ladder, LadderError> {
    if rfs.len() != cover.len() {
        return Err(LadderError::Mismatch(cover.len(), rfs.len()));
    }
    let intervals = effective_intervals(cover, i_minus, i_plus);
    let delta0 = admissible_delta(rfs, &intervals);
    if !(delta > 0.0 && delta < delta0) {
        return Err(LadderError::DeltaTooLarge { delta, delta0 });
    }
    let k = cover.len();
    let mut rungs: Vec<LadderRung> = Vec::new();
    for (j, (rf, &(e_lo, e_hi))) in rfs.iter().zip(&intervals).enumerate() {
        let pos_floor = 1e-4 * max_d_theta(*rf, (e_lo, e_hi));
        let ropts = RungOptions { pos_floor, ..opts.rung };
        let w = rf.half_width();
        let n = opts.seeds.max(2);
        let seeds: Vec<f64> = (0..n).map(|s| e_lo + (e_hi - e_lo) * s as f64 / (n - 1) as f64).collect();
        let mut traced: Vec<LadderRung> = seeds
            .par_iter()
            .filter_map(|&i| {
                let ts = rf.theta_star(i).ok()?;
                trace_rung(*rf, (i, ts + 0.5 * w), ropts).ok()
            })
            .collect();
        if traced.is_empty() {
            return Err(LadderError::NoRung(e_lo));
        }
        // Longest first; ties broken by seed order for determinism.
        traced.sort_by(|a, b| (b.trace_hi() - b.trace_lo()).total_cmp(&(a.trace_hi() - a.trace_lo())));
        // Outer ends allow δ slack (condition (2)); internal junctions are hit exactly (condition (3)).
        let slack_lo = if j == 0 { delta } else { 0.0 };
        let slack_hi = if j + 1 == k { delta } else { 0.0 };
        let first = traced
            .iter()
            .filter(|r| r.trace_lo() <= e_lo + slack_lo && r.trace_hi() > e_lo)
            .max_by(|a, b| a.trace_hi().total_cmp(&b.trace_hi()))
            .ok_or(LadderError::NoRung(e_lo))?;
        let mut chosen = vec![(first.clone(), first.trace_lo().max(e_lo))];
        let mut junction = chosen[0].1;
        loop {
            let cur_hi = chosen.last().unwrap().0.trace_hi();
            if cur_hi >= e_hi - slack_hi {
                break;
            }
            let next = traced
                .iter()
                .filter(|r| r.trace_lo() < cur_hi - 2.0 * delta && r.trace_lo() < cur_hi && r.trace_hi() > cur_hi)
                .max_by(|a, b| a.trace_hi().total_cmp(&b.trace_hi()))
                .ok_or(LadderError::NoRung(cur_hi))?;
            let j_next = 0.5 * (next.trace_lo().max(junction) + cur_hi);
            chosen.last_mut().unwrap().0.hi = j_next;
            junction = j_next;
            chosen.push((next.clone(), j_next));
        }
        let count = chosen.len();
        for (i, (mut r, start)) in chosen.into_iter().enumerate() {
            r.curve = j;
            r.index = i;
            r.lo = start;
            if i + 1 == count {
                r.hi = r.trace_hi().min(e_hi);
            }
            rungs.push(r);
        }
    }
    Ok(Ladder { rungs, delta, delta0, i_minus, i_plus, intervals })
}

/// Checks conditions (1)–(3) and the rung invariants; returns a list of violations.
pub fn check_ladder(ladder: &Ladder) -> Vec<String> {
    let mut out = Vec::new();
    let d = ladder.delta;
    for r in &ladder.rungs {
        if r.max_drift() > 1e-9 {
            out.push(format!("rung ({}, {}): level drift {:.3e}", r.index, r.curve, r.max_drift()));
        }
        if !(r.min_d_theta() > 0.0) {
            out.push(format!("rung ({}, {}): dθL* not positive", r.index, r.curve));
        }
        if r.samples.windows(2).any(|w| !(w[1].action > w[0].action)) {
            out.push(format!("rung ({}, {}): not a graph over I", r.index, r.curve));
        }
    }
    for (j, &(lo, hi)) in ladder.intervals.iter().enumerate() {
        let rs: Vec<&LadderRung> = ladder.rungs.iter().filter(|r| r.curve == j).collect();
        let (Some(f), Some(l)) = (rs.first(), rs.last()) else {
            out.push(format!("curve {j}: no rungs"));
            continue;
        };
        if !(f.lo >= lo - 1e-12 && f.lo <= lo + d) {
            out.push(format!("curve {j}: first rung starts at {} outside [{lo}, {}]", f.lo, lo + d));
        }
        if !(l.hi <= hi + 1e-12 && l.hi >= hi - d) {
            out.push(format!("curve {j}: last rung ends at {} outside [{}, {hi}]", l.hi, hi - d));
        }
        for w in rs.windows(2) {
            if w[0].hi != w[1].lo {
                out.push(format!("curve {j}: rungs {} and {} do not abut", w[0].index, w[1].index));
            }
        }
    }
    for w in ladder.rungs.windows(2) {
        if w[0].curve != w[1].curve && w[0].hi != w[1].lo {
            out.push(format!("junction {} -> {}: {} != {}", w[0].curve, w[1].curve, w[0].hi, w[1].lo));
        }
    }
    let (a, b) = ladder.covered();
    if !(a <= ladder.i_minus + d && b >= ladder.i_plus - d) {
        out.push(format!("coverage [{a}, {b}] misses [{}, {}]", ladder.i_minus + d, ladder.i_plus - d));
    }
    out
}

/// θ-distance of a point from a rung's graph (wrapped).
pub fn distance_to_rung(rung: &LadderRung, x: (f64, f64)) -> f64 {
    wrap_pi(x.1 - rung.theta_at(x.0)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::{CosineReduced, ReducedEval};
    use std::f64::consts::PI;

    fn cosine() -> CosineReduced {
        CosineReduced { a0: 1.0, a1: 0.5, range: (0.0, 3.0), half_width: 0.4 * PI }
    }

    #[test]
    fn cosine_rung_ascends_and_keeps_level() {
        let rf = cosine();
        let start = (1.0, 1.5 * PI - 0.5);
        let r = trace_rung(&rf, start, RungOptions::default()).unwrap();
        let level = rf.eval(start.0, start.1).unwrap().value;
        for s in &r.samples {
            let a = rf.a0 + rf.a1 * s.action;
            // Analytic level set: θ = 2π − arccos(level / A(I)) on the ascending side.
            let exact = 2.0 * PI - (level / a).acos();
            assert!((s.theta - exact).abs() < 1e-10, "I={} {} vs {}", s.action, s.theta, exact);
            assert!(-a * s.theta.sin() > 0.0);
            assert!(s.drift <= 1e-9);
        }
        assert!(r.trace_lo() < 1.0 && r.trace_hi() > 1.0);
    }

    #[test]
    fn mirrored_start_is_rejected() {
        let rf = cosine();
        let err = trace_rung(&rf, (1.0, PI - 0.6), RungOptions::default()).unwrap_err();
        assert!(matches!(err, LadderError::NotAscending(..)));
    }

    #[test]
    fn single_curve_cosine_ladder_covers_range() {
        let rf = cosine();
        let cover = [CoverInterval { curve: 0, lo: 0.0, hi: 3.0 }];
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let ladder = build_ladder(&rfs, &cover, 0.6, 1.9, 0.02, LadderOptions::default()).unwrap();
        assert!(!ladder.rungs.is_empty());
        let (a, b) = ladder.covered();
        assert!(a <= 0.62 && b >= 1.88, "covered [{a}, {b}]");
        assert!(check_ladder(&ladder).is_empty(), "{:?}", check_ladder(&ladder));
    }

    /// A(I) cos θ with A varying by a factor 20 forces several rungs.
    #[test]
    fn steep_amplitude_needs_several_abutting_rungs() {
        let rf = CosineReduced { a0: 0.1, a1: 2.0, range: (0.0, 3.0), half_width: 0.4 * PI };
        let cover = [CoverInterval { curve: 0, lo: 0.0, hi: 3.0 }];
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let ladder = build_ladder(&rfs, &cover, 0.1, 2.9, 0.01, LadderOptions::default()).unwrap();
        assert!(ladder.rungs.len() >= 2);
        for w in ladder.rungs.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
            assert!(w[1].trace_lo() < w[0].hi && w[0].trace_hi() > w[0].hi);
        }
        assert!(check_ladder(&ladder).is_empty(), "{:?}", check_ladder(&ladder));
    }

    #[test]
    fn two_curve_junction_is_shared() {
        let a = cosine();
        let b = CosineReduced { a0: 0.8, a1: 0.6, ..cosine() };
        let cover = [CoverInterval { curve: 0, lo: 0.3, hi: 1.4 }, CoverInterval { curve: 1, lo: 1.1, hi: 2.5 }];
        let rfs: [&dyn ReducedFunction; 2] = [&a, &b];
        let ladder = build_ladder(&rfs, &cover, 0.6, 1.9, 0.02, LadderOptions::default()).unwrap();
        let last0 = ladder.rungs.iter().filter(|r| r.curve == 0).last().unwrap();
        let first1 = ladder.rungs.iter().find(|r| r.curve == 1).unwrap();
        assert_eq!(last0.hi, first1.lo);
        assert_eq!(last0.hi, 0.5 * (1.1 + 1.4));
        assert!(check_ladder(&ladder).is_empty(), "{:?}", check_ladder(&ladder));
    }

    #[test]
    fn oversized_delta_reports_delta0() {
        let rf = cosine();
        let cover = [CoverInterval { curve: 0, lo: 0.0, hi: 3.0 }];
        let rfs: [&dyn ReducedFunction; 1] = [&rf];
        let err = build_ladder(&rfs, &cover, 0.6, 1.9, 0.5, LadderOptions::default()).unwrap_err();
        let LadderError::DeltaTooLarge { delta0, .. } = err else { panic!("{err}") };
        assert!((delta0 - 0.1 * PI).abs() < 1e-12);
    }

    struct Flat;
    impl ReducedFunction for Flat {
        fn eval(&self, action: f64, theta: f64) -> Result<ReducedEval, ReductionError> {
            Ok(ReducedEval { action, theta, theta_star: PI, tau_bar: 0.0, value: 0.0, d_theta: 0.0, d_action: 0.0, d_theta_theta: 0.0, q: 1.0, residual: 0.0 })
        }
        fn theta_star(&self, _: f64) -> Result<f64, ReductionError> {
            Ok(PI)
        }
        fn half_width(&self) -> f64 {
            1.0
        }
        fn action_range(&self) -> (f64, f64) {
            (0.0, 3.0)
        }
    }

    #[test]
    fn no_ascending_seed_names_the_action() {
        let cover = [CoverInterval { curve: 0, lo: 0.5, hi: 2.0 }];
        let rfs: [&dyn ReducedFunction; 1] = [&Flat];
        let err = build_ladder(&rfs, &cover, 0.6, 1.9, 0.02, LadderOptions::default()).unwrap_err();
        assert_eq!(err, LadderError::NoRung(0.6));
    }
}
