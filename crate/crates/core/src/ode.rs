//! One-step integrators: adaptive Dormand–Prince 8(5,3), classical RK4 and implicit midpoint.

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum OdeError {
    #[error("step size collapsed to {h:.3e} at t = {t}")]
    StepCollapse { t: f64, h: f64, y: Vec<f64> },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize, f64, Vec<f64>),
    #[error("implicit midpoint iteration did not converge at t = {0}")]
    ImplicitNonConvergence(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct Dop853Options {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Dop853Options {
    fn default() -> Self {
        Dop853Options { rtol: 1e-12, atol: 1e-12, h_init: None, h_max: f64::INFINITY, h_min: 1e-14, max_steps: 1_000_000 }
    }
}

impl Dop853Options {
    pub fn tol(tol: f64) -> Self {
        Dop853Options { rtol: tol, atol: tol, ..Default::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct OdeOutcome {
    pub t: f64,
    pub y: Vec<f64>,
    /// True when the observer asked to stop before the end of the span.
    pub stopped: bool,
    pub stats: OdeStats,
    /// Accepted step sizes, in order.
    pub steps: Vec<f64>,
}

const A: [&[f64]; 11] = [
    &[5.26001519587677318785587544488e-2],
    &[1.97250569845378994544595329183e-2, 5.91751709536136983633785987549e-2],
    &[2.95875854768068491816892993775e-2, 0.0, 8.87627564304205475450678981324e-2],
    &[2.41365134159266685502369798665e-1, 0.0, -8.84549479328286085344864962717e-1, 9.24834003261792003115737966543e-1],
    &[3.7037037037037037037037037037e-2, 0.0, 0.0, 1.70828608729473871279604482173e-1, 1.25467687566822425016691814123e-1],
    &[3.7109375e-2, 0.0, 0.0, 1.70252211019544039314978060272e-1, 6.02165389804559606850219397283e-2, -1.7578125e-2],
    &[
        3.70920001185047927108779319836e-2,
        0.0,
        0.0,
        1.70383925712239993810214054705e-1,
        1.07262030446373284651809199168e-1,
        -1.53194377486244017527936158236e-2,
        8.27378916381402288758473766002e-3,
    ],
    &[
        6.24110958716075717114429577812e-1,
        0.0,
        0.0,
        -3.36089262944694129406857109825e0,
        -8.68219346841726006818189891453e-1,
        2.75920996994467083049415600797e1,
        2.01540675504778934086186788979e1,
        -4.34898841810699588477366255144e1,
    ],
    &[
        4.77662536438264365890433908527e-1,
        0.0,
        0.0,
        -2.48811461997166764192642586468e0,
        -5.90290826836842996371446475743e-1,
        2.12300514481811942347288949897e1,
        1.52792336328824235832596922938e1,
        -3.32882109689848629194453265587e1,
        -2.03312017085086261358222928593e-2,
    ],
    &[
        -9.3714243008598732571704021658e-1,
        0.0,
        0.0,
        5.18637242884406370830023853209e0,
        1.09143734899672957818500254654e0,
        -8.14978701074692612513997267357e0,
        -1.85200656599969598641566180701e1,
        2.27394870993505042818970056734e1,
        2.49360555267965238987089396762e0,
        -3.0467644718982195003823669022e0,
    ],
    &[
        2.27331014751653820792359768449e0,
        0.0,
        0.0,
        -1.05344954667372501984066689879e1,
        -2.00087205822486249909675718444e0,
        -1.79589318631187989172765950534e1,
        2.79488845294199600508499808837e1,
        -2.85899827713502369474065508674e0,
        -8.87285693353062954433549289258e0,
        1.23605671757943030647266201528e1,
        6.43392746015763530355970484046e-1,
    ],
];

const B: [f64; 12] = [
    5.42937341165687622380535766363e-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.45031289275240888144113950566e0,
    1.89151789931450038304281599044e0,
    -5.8012039600105847814672114227e0,
    3.1116436695781989440891606237e-1,
    -1.52160949662516078556178806805e-1,
    2.01365400804030348374776537501e-1,
    4.47106157277725905176885569043e-2,
];

const BHH: [f64; 3] = [
    0.244094488188976377952755905512,
    0.733846688281611857341361741547,
    0.220588235294117647058823529412e-1,
];

const E: [f64; 12] = [
    0.1312004499419488073250102996e-1,
    0.0,
    0.0,
    0.0,
    0.0,
    -0.1225156446376204440720569753e1,
    -0.4957589496572501915214079952,
    0.1664377182454986536961530415e1,
    -0.3503288487499736816886487290,
    0.3341791187130174790297318841,
    0.8192320648511571246570742613e-1,
    -0.2235530786388629525884427845e-1,
];

fn nodes() -> [f64; 12] {
    let mut c = [0.0; 12];
    for (i, row) in A.iter().enumerate() {
        c[i + 1] = row.iter().sum();
    }
    c
}

/// Adaptive DOP853 from `t0` to `t1` (either direction).
///
/// `observer(t, y)` is called after every accepted step and may return `false` to stop early.
pub fn dop853<F, O>(mut f: F, t0: f64, y0: &[f64], t1: f64, opts: Dop853Options, mut observer: O) -> Result<OdeOutcome, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let c = nodes();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 12];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut stats = OdeStats::default();
    let mut steps = Vec::new();
    if t == t1 {
        return Ok(OdeOutcome { t, y, stopped: false, stats, steps });
    }
    f(t, &y, &mut k[0]);
    stats.evaluations += 1;
    let mut h = match opts.h_init {
        Some(h) => h.abs(),
        None => initial_step(&mut f, t, &y, &k[0], dir, &opts, &mut stats),
    }
    .min(opts.h_max)
    .min((t1 - t0).abs());
    let mut last_rejected = false;
    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps, t, y));
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        let hs = dir * h;
        for s in 1..12 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s - 1].iter().enumerate() {
                    if *a != 0.0 {
                        acc += a * k[j][i];
                    }
                }
                ytmp[i] = y[i] + hs * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + c[s] * hs, &ytmp, &mut tail[0]);
        }
        stats.evaluations += 11;
        let mut err = 0.0;
        let mut err2 = 0.0;
        for i in 0..n {
            let mut inc = 0.0;
            let mut est = 0.0;
            for s in 0..12 {
                inc += B[s] * k[s][i];
                est += E[s] * k[s][i];
            }
            ynew[i] = y[i] + hs * inc;
            let bhh = inc - BHH[0] * k[0][i] - BHH[1] * k[8][i] - BHH[2] * k[11][i];
            let sk = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (est / sk).powi(2);
            err2 += (bhh / sk).powi(2);
        }
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let err = h * err * (1.0 / (deno * n as f64)).sqrt();
        if !err.is_finite() {
            if h <= opts.h_min {
                return Err(OdeError::NonFinite(t));
            }
            h *= 0.25;
            stats.rejected += 1;
            last_rejected = true;
            continue;
        }
        let fac = (err.powf(0.125) / 0.9).clamp(1.0 / 6.0, 3.0);
        if err <= 1.0 {
            stats.accepted += 1;
            steps.push(hs);
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            f(t, &y, &mut k[0]);
            stats.evaluations += 1;
            if !observer(t, &y) {
                return Ok(OdeOutcome { t, y, stopped: true, stats, steps });
            }
            if last {
                return Ok(OdeOutcome { t, y, stopped: false, stats, steps });
            }
            let mut hnew = h / fac;
            if last_rejected {
                hnew = hnew.min(h);
            }
            h = hnew.min(opts.h_max);
            last_rejected = false;
        } else {
            h /= (err.powf(0.125) / 0.9).min(3.0);
            stats.rejected += 1;
            last_rejected = true;
            if h < opts.h_min {
                return Err(OdeError::StepCollapse { t, h, y });
            }
        }
    }
}

fn initial_step<F>(f: &mut F, t: f64, y: &[f64], f0: &[f64], dir: f64, opts: &Dop853Options, stats: &mut OdeStats) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let (mut dnf, mut dny) = (0.0, 0.0);
    for i in 0..n {
        let sk = opts.atol + opts.rtol * y[i].abs();
        dnf += (f0[i] / sk).powi(2);
        dny += (y[i] / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * (dny / dnf).sqrt() };
    h = h.min(opts.h_max);
    let y1: Vec<f64> = (0..n).map(|i| y[i] + dir * h * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    f(t + dir * h, &y1, &mut f1);
    stats.evaluations += 1;
    let mut der2 = 0.0;
    for i in 0..n {
        let sk = opts.atol + opts.rtol * y[i].abs();
        der2 += ((f1[i] - f0[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(1.0 / 8.0) };
    (100.0 * h).min(h1).min(opts.h_max)
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    (0..n).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// One implicit midpoint step, solved by fixed-point iteration.
pub fn implicit_midpoint_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k = vec![0.0; n];
    f(t, y, &mut k);
    let mut mid = vec![0.0; n];
    for _ in 0..100 {
        for i in 0..n {
            mid[i] = y[i] + 0.5 * h * k[i];
        }
        let mut knew = vec![0.0; n];
        f(t + 0.5 * h, &mid, &mut knew);
        let mut delta: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            delta = delta.max((knew[i] - k[i]).abs());
            scale = scale.max(knew[i].abs());
        }
        k = knew;
        if delta <= 1e-15 * scale.max(1.0) {
            return Ok((0..n).map(|i| y[i] + h * k[i]).collect());
        }
    }
    Err(OdeError::ImplicitNonConvergence(t))
}
