//! Deterministic SVG plots.
//!
//! Output depends only on the input data: fixed canvas size, fixed palette, fixed number formatting.

use crate::chain::{LegKind, TransitionChain};
use crate::ladder::Ladder;
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub label: String,
    /// Values are log10 of the data; ticks are labelled as powers of ten.
    pub log: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, label: &str) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Axis { lo, hi, label: label.to_string(), log: false }
    }

    /// Axis over log10 of a positive range.
    pub fn log10(lo: f64, hi: f64, label: &str) -> Self {
        let (a, b) = (lo.log10().floor(), hi.log10().ceil());
        Axis { log: true, ..Axis::new(a, b.max(a + 1.0), label) }
    }

    /// Pads the range by a fraction on both sides.
    pub fn padded(mut self, frac: f64) -> Self {
        let pad = frac * (self.hi - self.lo);
        self.lo -= pad;
        self.hi += pad;
        self
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i64, self.hi.floor() as i64);
            return (a..=b).map(|k| k as f64).collect();
        }
        let span = self.hi - self.lo;
        let raw = span / 6.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }

    fn tick_label(&self, v: f64) -> String {
        if self.log {
            format!("1e{}", v as i64)
        } else {
            let s = format!("{v:.3}");
            let s = s.trim_end_matches('0').trim_end_matches('.');
            if s == "-0" { "0".into() } else { s.to_string() }
        }
    }
}

/// An SVG canvas with one pair of axes.
#[derive(Debug, Clone)]
pub struct Canvas {
    x: Axis,
    y: Axis,
    title: String,
    body: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Canvas {
    pub fn new(x: Axis, y: Axis, title: &str) -> Self {
        Canvas { x, y, title: title.to_string(), body: String::new() }
    }

    /// Data coordinates to pixels.
    pub fn map(&self, p: (f64, f64)) -> (f64, f64) {
        let w = WIDTH - MARGIN_L - MARGIN_R;
        let h = HEIGHT - MARGIN_T - MARGIN_B;
        (MARGIN_L + w * (p.0 - self.x.lo) / (self.x.hi - self.x.lo), MARGIN_T + h * (1.0 - (p.1 - self.y.lo) / (self.y.hi - self.y.lo)))
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|p| self.map(*p)).map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(self.body, r#"<polyline fill="none" stroke="{stroke}" stroke-width="{width:.2}" points="{}"/>"#, coords.join(" "));
    }

    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64) {
        let (pa, pb) = (self.map(a), self.map(b));
        let _ = writeln!(self.body, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width:.2}"/>"#, pa.0, pa.1, pb.0, pb.1);
    }

    pub fn circle(&mut self, c: (f64, f64), r_px: f64, fill: &str, class: &str) {
        let p = self.map(c);
        let _ = writeln!(self.body, r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="{r_px:.2}" fill="{fill}"/>"#, p.0, p.1);
    }

    pub fn square(&mut self, c: (f64, f64), half_px: f64, fill: &str, class: &str) {
        let p = self.map(c);
        let _ = writeln!(
            self.body,
            r#"<rect class="{class}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            p.0 - half_px,
            p.1 - half_px,
            2.0 * half_px,
            2.0 * half_px
        );
    }

    /// Ellipse for a data-space disk of radius `r` (axes are scaled independently).
    pub fn disk(&mut self, c: (f64, f64), r: f64, stroke: &str) {
        let p = self.map(c);
        let q = self.map((c.0 + r, c.1 + r));
        let _ = writeln!(
            self.body,
            r#"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="{stroke}" stroke-width="0.80"/>"#,
            p.0,
            p.1,
            (q.0 - p.0).abs().max(0.5),
            (q.1 - p.1).abs().max(0.5)
        );
    }

    pub fn text(&mut self, at: (f64, f64), s: &str) {
        let p = self.map(at);
        let _ = writeln!(self.body, r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#, p.0, p.1, esc(s));
    }

    pub fn finish(self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#);
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let (x0, y0) = (MARGIN_L, HEIGHT - MARGIN_B);
        let (x1, y1) = (WIDTH - MARGIN_R, MARGIN_T);
        let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
        for t in self.x.ticks() {
            let (px, _) = self.map((t, self.y.lo));
            let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
            let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, y0 + 18.0, self.x.tick_label(t));
        }
        for t in self.y.ticks() {
            let (_, py) = self.map((self.x.lo, t));
            let _ = writeln!(out, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, x0 - 8.0, py + 4.0, self.y.tick_label(t));
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#, 0.5 * (x0 + x1), HEIGHT - 12.0, esc(&self.x.label));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            0.5 * (y0 + y1),
            0.5 * (y0 + y1),
            esc(&self.y.label)
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="22" font-size="14" text-anchor="middle">{}</text>"#, 0.5 * (x0 + x1), esc(&self.title));
        let _ = writeln!(out, r#"<clipPath id="plot"><rect x="{x0}" y="{y1}" width="{:.2}" height="{:.2}"/></clipPath>"#, x1 - x0, y0 - y1);
        let _ = writeln!(out, r#"<g clip-path="url(#plot)">"#);
        out.push_str(&self.body);
        out.push_str("</g>\n</svg>\n");
        out
    }
}

/// Blue-to-red ramp, t ∈ [0, 1].
pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 200.0 * t).round() as u8;
    let g = (80.0 + 60.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    let b = (230.0 - 190.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Values on a rectangular grid; `values[iy * xs.len() + ix]`, NaN marks missing samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.xs.len() + ix]
    }

    /// Builds a grid from scattered (x, y, v) samples lying on a tensor grid.
    pub fn from_samples(samples: &[(f64, f64, f64)]) -> Option<Self> {
        let mut xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let mut ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
        for v in [&mut xs, &mut ys] {
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let mut values = vec![f64::NAN; xs.len() * ys.len()];
        for (x, y, v) in samples {
            let ix = xs.iter().position(|a| (a - x).abs() <= 1e-12 * (1.0 + x.abs()))?;
            let iy = ys.iter().position(|a| (a - y).abs() <= 1e-12 * (1.0 + y.abs()))?;
            values[iy * xs.len() + ix] = *v;
        }
        (xs.len() >= 2 && ys.len() >= 2).then_some(ScalarGrid { xs, ys, values })
    }

    pub fn range(&self) -> (f64, f64) {
        self.values.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)))
    }
}

/// Marching-squares segments of one level; cells with a missing corner are skipped.
pub fn contour_segments(grid: &ScalarGrid, level: f64) -> Vec<((f64, f64), (f64, f64))> {
    let mut segs = Vec::new();
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(1) {
            // Corners counter-clockwise from the lower left.
            let c = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
            let v: Vec<f64> = c.iter().map(|(a, b)| grid.at(*a, *b) - level).collect();
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let mut cuts = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] < 0.0) != (v[b] < 0.0) {
                    let t = v[a] / (v[a] - v[b]);
                    let pa = (grid.xs[c[a].0], grid.ys[c[a].1]);
                    let pb = (grid.xs[c[b].0], grid.ys[c[b].1]);
                    cuts.push((pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1)));
                }
            }
            match cuts.len() {
                2 => segs.push((cuts[0], cuts[1])),
                4 => {
                    // Saddle cell: pair edges according to the centre value.
                    let centre: f64 = v.iter().sum::<f64>() / 4.0;
                    if (centre < 0.0) == (v[0] < 0.0) {
                        segs.push((cuts[0], cuts[3]));
                        segs.push((cuts[1], cuts[2]));
                    } else {
                        segs.push((cuts[0], cuts[1]));
                        segs.push((cuts[2], cuts[3]));
                    }
                }
                _ => {}
            }
        }
    }
    segs
}

/// `n` levels evenly spaced strictly inside the value range.
pub fn levels(grid: &ScalarGrid, n: usize) -> Vec<f64> {
    let (lo, hi) = grid.range();
    if !(hi > lo) {
        return vec![];
    }
    (1..=n).map(|k| lo + (hi - lo) * k as f64 / (n + 1) as f64).collect()
}

fn draw_contours(canvas: &mut Canvas, grid: &ScalarGrid, n: usize) {
    let lv = levels(grid, n);
    for (k, level) in lv.iter().enumerate() {
        let colour = ramp(k as f64 / (lv.len().max(2) - 1) as f64);
        for (a, b) in contour_segments(grid, *level) {
            canvas.segment(a, b, &colour, 1.0);
        }
    }
}

/// Level sets of a scalar grid.
pub fn contour_svg(grid: &ScalarGrid, x_label: &str, y_label: &str, title: &str, n_levels: usize) -> String {
    let x = Axis::new(grid.xs[0], *grid.xs.last().unwrap(), x_label);
    let y = Axis::new(grid.ys[0], *grid.ys.last().unwrap(), y_label);
    let mut canvas = Canvas::new(x, y, title);
    draw_contours(&mut canvas, grid, n_levels);
    canvas.finish()
}

fn ladder_axes(ladder: &Ladder, background: Option<&ScalarGrid>) -> (Axis, Axis) {
    if let Some(g) = background {
        return (Axis::new(g.xs[0], *g.xs.last().unwrap(), "θ"), Axis::new(g.ys[0], *g.ys.last().unwrap(), "I"));
    }
    let pts = ladder.rungs.iter().flat_map(|r| r.samples.iter().map(|s| (s.theta, s.action)));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, ladder.i_minus, ladder.i_plus);
    }
    let w = (x1 - x0).max(0.2);
    let xc = 0.5 * (x0 + x1);
    (Axis::new(xc - w, xc + w, "θ"), Axis::new(y0, y1, "I").padded(0.05))
}

fn draw_rungs(canvas: &mut Canvas, ladder: &Ladder) {
    for r in &ladder.rungs {
        let pts: Vec<(f64, f64)> = r.samples.iter().map(|s| (s.theta, s.action)).collect();
        canvas.polyline(&pts, "#555555", 1.0);
        let kept: Vec<(f64, f64)> = r.truncated().map(|s| (s.theta, s.action)).collect();
        canvas.polyline(&kept, "black", 2.2);
        let (lo, hi) = (r.lower(), r.upper());
        canvas.circle((lo.1, lo.0), 3.5, "#1f6fd0", "rung-lower");
        canvas.square((hi.1, hi.0), 3.5, "#d0301f", "rung-upper");
    }
}

/// Rungs in the (θ, I) plane; lower endpoints as circles, upper endpoints as squares.
pub fn ladder_svg(ladder: &Ladder, background: Option<&ScalarGrid>) -> String {
    let (x, y) = ladder_axes(ladder, background);
    let mut canvas = Canvas::new(x, y, &format!("ascending ladder, {} rung(s), δ = {}", ladder.rungs.len(), ladder.delta));
    if let Some(g) = background {
        draw_contours(&mut canvas, g, 14);
    }
    draw_rungs(&mut canvas, ladder);
    canvas.finish()
}

/// Chain legs in the (θ, I) plane with their certified balls.
pub fn chain_svg(chain: &TransitionChain, ladder: Option<&Ladder>) -> String {
    let pts: Vec<(f64, f64)> = chain.legs.iter().flat_map(|l| [l.start, l.end]).map(|(i, t)| (t, i)).collect();
    let (x, y) = match ladder {
        Some(l) => ladder_axes(l, None),
        None => {
            let xs = pts.iter().map(|p| p.0);
            let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let (x0, x1) = if x0.is_finite() { (x0, x1) } else { (0.0, 1.0) };
            let w = (x1 - x0).max(0.2);
            (Axis::new(0.5 * (x0 + x1) - w, 0.5 * (x0 + x1) + w, "θ"), Axis::new(chain.i_minus, chain.i_plus, "I").padded(0.05))
        }
    };
    let status = if chain.complete { "complete" } else { "incomplete" };
    let mut canvas = Canvas::new(x, y, &format!("transition chain ({status}), ε = {}, ΔI = {:.4}", chain.eps, chain.net_gain()));
    if let Some(l) = ladder {
        draw_rungs(&mut canvas, l);
    }
    for leg in &chain.legs {
        let colour = match leg.kind {
            LegKind::Scattering => "#1f9d55",
            LegKind::Inner => "#8e44ad",
        };
        canvas.segment((leg.start.1, leg.start.0), (leg.end.1, leg.end.0), colour, 1.6);
        canvas.disk((leg.start.1, leg.start.0), leg.radius_in, colour);
        canvas.disk((leg.end.1, leg.end.0), leg.radius_out, colour);
    }
    canvas.finish()
}

/// Log-log plot of |error| against ε with the fitted power law.
pub fn jump_svg(eps: &[f64], error: &[f64], slope: Option<(f64, f64)>) -> String {
    let pairs: Vec<(f64, f64)> = eps.iter().zip(error).filter(|(e, r)| **e > 0.0 && r.abs() > 0.0).map(|(e, r)| (*e, r.abs())).collect();
    let fold = |v: &mut dyn Iterator<Item = f64>| v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = fold(&mut pairs.iter().map(|p| p.0));
    let (y0, y1) = fold(&mut pairs.iter().map(|p| p.1));
    let (x0, x1, y0, y1) = if pairs.is_empty() { (1e-3, 1e-1, 1e-8, 1e-4) } else { (x0, x1, y0, y1) };
    let title = match slope {
        Some((s, _)) => format!("ΔI error vs ε, fitted slope {s:.3}"),
        None => "ΔI error vs ε".to_string(),
    };
    let mut canvas = Canvas::new(Axis::log10(x0, x1, "ε"), Axis::log10(y0, y1, "|ΔI measured − ε ∂I L*|"), &title);
    for (e, r) in &pairs {
        canvas.circle((e.log10(), r.log10()), 4.0, "#d0301f", "jump-point");
    }
    if let Some((s, c)) = slope {
        let (a, b) = (x0.log10(), x1.log10());
        canvas.segment((a, c + s * a), (b, c + s * b), "#1f6fd0", 1.4);
    }
    canvas.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::{build_ladder, LadderOptions};
    use crate::reduction::{CosineReduced, CoverInterval, ReducedFunction};
    use std::f64::consts::PI;

    fn cosine_grid(n: usize) -> (ScalarGrid, CosineReduced) {
        let c = CosineReduced { a0: 1.0, a1: 0.5, range: (0.5, 2.0), half_width: 0.4 * PI };
        let xs: Vec<f64> = (0..n).map(|k| PI - 1.0 + 2.0 * k as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|k| 0.5 + 1.5 * k as f64 / (n - 1) as f64).collect();
        let mut values = Vec::new();
        for y in &ys {
            for x in &xs {
                values.push(c.eval(*y, *x).unwrap().value);
            }
        }
        (ScalarGrid { xs, ys, values }, c)
    }

    #[test]
    fn linear_field_contour_is_exact() {
        let xs: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
        let ys = xs.clone();
        let values: Vec<f64> = ys.iter().flat_map(|y| xs.iter().map(move |x| x + 2.0 * y)).collect();
        let g = ScalarGrid { xs, ys, values };
        let segs = contour_segments(&g, 1.23);
        assert!(!segs.is_empty());
        for (a, b) in segs {
            assert!((a.0 + 2.0 * a.1 - 1.23).abs() < 1e-12);
            assert!((b.0 + 2.0 * b.1 - 1.23).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_band_level_sets_follow_closed_form() {
        let (g, c) = cosine_grid(81);
        let h = g.xs[1] - g.xs[0];
        for level in levels(&g, 9) {
            for (a, b) in contour_segments(&g, level) {
                for p in [a, b] {
                    let v = c.eval(p.1, p.0).unwrap().value;
                    assert!((v - level).abs() < 2.0 * h * h, "{v} vs {level}");
                }
            }
        }
    }

    #[test]
    fn missing_corners_are_skipped() {
        let (mut g, _) = cosine_grid(9);
        g.values.iter_mut().for_each(|v| *v = f64::NAN);
        assert!(contour_segments(&g, 0.0).is_empty());
        assert!(levels(&g, 5).is_empty());
    }

    #[test]
    fn from_samples_rebuilds_the_grid() {
        let (g, _) = cosine_grid(7);
        let mut samples = Vec::new();
        for (iy, y) in g.ys.iter().enumerate() {
            for (ix, x) in g.xs.iter().enumerate() {
                samples.push((*x, *y, g.at(ix, iy)));
            }
        }
        samples.reverse();
        assert_eq!(ScalarGrid::from_samples(&samples).unwrap(), g);
    }

    #[test]
    fn ladder_plot_marks_every_endpoint_and_is_reproducible() {
        let c = CosineReduced { a0: 1.0, a1: 0.5, range: (0.5, 2.0), half_width: 0.4 * PI };
        let rfs: Vec<&dyn ReducedFunction> = vec![&c];
        let cover = [CoverInterval { curve: 0, lo: 0.5, hi: 2.0 }];
        let ladder = build_ladder(&rfs, &cover, 0.6, 1.9, 0.02, LadderOptions::default()).unwrap();
        let (g, _) = cosine_grid(41);
        let a = ladder_svg(&ladder, Some(&g));
        let b = ladder_svg(&ladder, Some(&g));
        assert_eq!(a, b);
        assert_eq!(a.matches("class=\"rung-lower\"").count(), ladder.rungs.len());
        assert_eq!(a.matches("class=\"rung-upper\"").count(), ladder.rungs.len());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn jump_plot_draws_points_and_fit() {
        let eps = [1e-3, 3e-3, 1e-2];
        let err: Vec<f64> = eps.iter().map(|e| 0.5 * e * e).collect();
        let svg = jump_svg(&eps, &err, Some((2.0, 0.5f64.log10())));
        assert_eq!(svg.matches("jump-point").count(), 3);
        assert!(svg.contains("fitted slope 2.000"));
    }

    #[test]
    fn log_axis_ticks_are_decades() {
        let a = Axis::log10(2e-3, 5e-2, "ε");
        assert_eq!(a.ticks(), vec![-3.0, -2.0, -1.0]);
        assert_eq!(a.tick_label(-2.0), "1e-2");
        let b = Axis::new(0.5, 2.0, "I");
        assert_eq!(b.ticks().len(), 4);
        assert_eq!(b.tick_label(1.0), "1");
    }
}
