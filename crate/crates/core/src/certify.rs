//! Ball-containment certificates from mapped boundary polygons.
//!
//! A closed polygon (images of boundary samples of a source disk, in lifted (I, θ) coordinates)
//! certifies a target disk when it winds around the target centre and stays at least the target
//! radius away from it. For a convex image the chords lie inside the true image, so the polygon
//! radius is a lower bound.

use std::f64::consts::TAU;

/// `k` equally spaced points on the circle of radius `r` around `c`.
pub fn circle(c: (f64, f64), r: f64, k: usize) -> Vec<(f64, f64)> {
    (0..k)
        .map(|i| {
            let a = TAU * i as f64 / k as f64;
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect()
}

/// Winding number of the closed polygon around `p`.
pub fn winding_number(poly: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let mut w = 0;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && cross > 0.0 {
                w += 1;
            }
        } else if b.1 <= p.1 && cross < 0.0 {
            w -= 1;
        }
    }
    w
}

fn segment_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Distance from `p` to the polygon boundary.
pub fn boundary_distance(poly: &[(f64, f64)], p: (f64, f64)) -> f64 {
    let n = poly.len();
    (0..n).map(|i| segment_distance(poly[i], poly[(i + 1) % n], p)).fold(f64::INFINITY, f64::min)
}

/// Radius of the largest disk around `p` enclosed by the polygon; zero if `p` is outside.
pub fn enclosed_radius(poly: &[(f64, f64)], p: (f64, f64)) -> f64 {
    if poly.len() < 3 || winding_number(poly, p) == 0 {
        return 0.0;
    }
    boundary_distance(poly, p)
}

/// Whether the polygon encloses the disk B_r(p).
pub fn encloses(poly: &[(f64, f64)], p: (f64, f64), r: f64) -> bool {
    enclosed_radius(poly, p) >= r
}

/// Signed shoelace area.
pub fn area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    0.5 * (0..n).map(|i| poly[i].0 * poly[(i + 1) % n].1 - poly[(i + 1) % n].0 * poly[i].1).sum::<f64>()
}
