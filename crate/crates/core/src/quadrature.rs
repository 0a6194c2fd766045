//! Adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5 and the centre.
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Debug, Clone, PartialEq)]
pub struct QuadResult {
    pub value: Vec<f64>,
    /// Estimated absolute error (max over components).
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("quadrature did not reach tolerance after {panels} panels (estimated error {error:.3e})")]
pub struct QuadError {
    pub best: QuadResult,
    pub error: f64,
    pub panels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub initial_panels: usize,
    pub max_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-12, rel_tol: 0.0, initial_panels: 8, max_panels: 4000 }
    }
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One 15-point Kronrod panel; returns (kronrod value, |kronrod - gauss| max-norm).
fn gk15<F>(f: &mut F, a: f64, b: f64, dim: usize, buf: &mut [f64]) -> (Vec<f64>, f64)
where
    F: FnMut(f64, &mut [f64]),
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    f(c, buf);
    for d in 0..dim {
        k[d] = WGK[7] * buf[d];
        g[d] = WG[3] * buf[d];
    }
    for i in 0..7 {
        let x = h * XGK[i];
        f(c - x, buf);
        let lo: Vec<f64> = buf[..dim].to_vec();
        f(c + x, buf);
        for d in 0..dim {
            let s = lo[d] + buf[d];
            k[d] += WGK[i] * s;
            if i % 2 == 1 {
                g[d] += WG[i / 2] * s;
            }
        }
    }
    let mut err: f64 = 0.0;
    for d in 0..dim {
        k[d] *= h;
        g[d] *= h;
        err = err.max((k[d] - g[d]).abs());
    }
    (k, err)
}

/// Integrates `f` over `[a, b]`; `f(t, out)` writes `dim` components into `out`.
pub fn integrate<F>(mut f: F, a: f64, b: f64, dim: usize, opts: QuadOptions) -> Result<QuadResult, QuadError>
where
    F: FnMut(f64, &mut [f64]),
{
    let mut buf = vec![0.0; dim];
    let n0 = opts.initial_panels.max(1);
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for i in 0..n0 {
        let pa = a + (b - a) * i as f64 / n0 as f64;
        let pb = if i + 1 == n0 { b } else { a + (b - a) * (i + 1) as f64 / n0 as f64 };
        let (value, error) = gk15(&mut f, pa, pb, dim, &mut buf);
        evaluations += 15;
        heap.push(Panel { a: pa, b: pb, value, error });
    }
    loop {
        let mut total = vec![0.0; dim];
        let mut err = 0.0;
        for p in heap.iter() {
            for d in 0..dim {
                total[d] += p.value[d];
            }
            err += p.error;
        }
        let scale = total.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let target = opts.abs_tol.max(opts.rel_tol * scale);
        if err <= target {
            return Ok(QuadResult { value: total, error: err, evaluations });
        }
        if heap.len() >= opts.max_panels {
            let panels = heap.len();
            return Err(QuadError { best: QuadResult { value: total, error: err, evaluations }, error: err, panels });
        }
        let worst = heap.pop().expect("non-empty panel heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel cannot be split further in floating point.
            let panels = heap.len() + 1;
            heap.push(worst);
            let mut total = vec![0.0; dim];
            let mut err = 0.0;
            for p in heap.iter() {
                for d in 0..dim {
                    total[d] += p.value[d];
                }
                err += p.error;
            }
            return Err(QuadError { best: QuadResult { value: total, error: err, evaluations }, error: err, panels });
        }
        for (pa, pb) in [(worst.a, mid), (mid, worst.b)] {
            let (value, error) = gk15(&mut f, pa, pb, dim, &mut buf);
            evaluations += 15;
            heap.push(Panel { a: pa, b: pb, value, error });
        }
    }
}

/// Scalar convenience wrapper.
pub fn integrate_scalar<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<(f64, f64), QuadError>
where
    F: FnMut(f64) -> f64,
{
    let r = integrate(|t, out| out[0] = f(t), a, b, 1, opts)?;
    Ok((r.value[0], r.error))
}
