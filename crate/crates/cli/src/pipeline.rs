//! Stage execution with artifact caching.

use crate::manifest::{sha256_hex, DirLock, RunManifest, StageRecord, Status};
use crate::plot;
use arnold_core::chain::{build_chain, check_chain, ChainOptions};
use arnold_core::config::{PipelineConfig, Stage};
use arnold_core::export::{contour_svg, ScalarGrid};
use arnold_core::genericity::{basis_matrix, design_adaptive, scan_degeneracy_model, DerivativeTarget, ScanOptions, VERIFY_TOL};
use arnold_core::ladder::{build_ladder, check_ladder, Ladder, LadderOptions, RungOptions};
use arnold_core::melnikov::{grid_from_model, Melnikov, MelnikovTable};
use arnold_core::model::{build_system, separatrix, Separatrix, SystemSpec};
use arnold_core::reduction::{discover_curves, select_cover, CoverInterval, CriticalCurve, ReducedFunction, ReducedPoincare, SharedModel};
use arnold_core::verify::jump_convergence;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Persisted output of the reduction stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionArtifact {
    pub curves: Vec<CriticalCurve>,
    /// `cover[j].curve` indexes `curves`; rung and chain curve indices refer to positions in `cover`.
    pub cover: Vec<CoverInterval>,
    pub half_widths: Vec<f64>,
}

#[derive(Debug)]
pub enum RunError {
    /// The output directory cannot be prepared or locked.
    Io(String),
    /// One or more stages failed; the manifest was still written.
    Stages(Vec<(Stage, String)>),
}

fn err<E: Display>(e: E) -> String {
    e.to_string()
}

/// Lazily loaded upstream artifacts of one run.
struct Artifacts<'a> {
    dir: &'a Path,
    cfg: &'a PipelineConfig,
    spec: Option<SystemSpec>,
    sep: Option<Separatrix>,
    table: Option<Arc<MelnikovTable>>,
    reduction: Option<ReductionArtifact>,
}

impl<'a> Artifacts<'a> {
    fn read<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T, String> {
        let text = fs::read_to_string(self.dir.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        serde_json::from_str(&text).map_err(|e| format!("{rel}: {e}"))
    }

    fn spec(&mut self) -> Result<SystemSpec, String> {
        if self.spec.is_none() {
            self.spec = Some(self.read("model/system.json")?);
        }
        Ok(self.spec.clone().unwrap())
    }

    fn sep(&mut self) -> Result<Separatrix, String> {
        if self.sep.is_none() {
            self.sep = Some(separatrix(&self.spec()?).map_err(err)?);
        }
        Ok(self.sep.clone().unwrap())
    }

    fn table(&mut self) -> Result<Arc<MelnikovTable>, String> {
        if self.table.is_none() {
            self.table = Some(Arc::new(self.read("melnikov/table.json")?));
        }
        Ok(self.table.clone().unwrap())
    }

    fn reduction(&mut self) -> Result<ReductionArtifact, String> {
        if self.reduction.is_none() {
            self.reduction = Some(self.read("reduction/reduction.json")?);
        }
        Ok(self.reduction.clone().unwrap())
    }

    fn reduced(&mut self) -> Result<Vec<ReducedPoincare>, String> {
        let model: SharedModel = self.table()?;
        let r = self.reduction()?;
        Ok(r.cover.iter().zip(&r.half_widths).map(|(c, w)| ReducedPoincare::with_half_width(model.clone(), r.curves[c.curve].clone(), *w)).collect())
    }

    fn ladder(&self) -> Result<Ladder, String> {
        self.read("ladder/ladder.json")
    }

    fn target(&self) -> (f64, f64) {
        self.cfg.target_range()
    }
}

/// Writes `bytes` under the output directory and records the relative path.
struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), String> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        fs::write(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), String> {
        self.write(rel, serde_json::to_string_pretty(value).map_err(err)? + "\n")
    }

    fn csv(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), String> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(err)?;
        self.write(rel, buf)
    }
}

fn run_model(cfg: &PipelineConfig, out: &mut Outputs) -> Result<(), String> {
    let spec = build_system(&cfg.system).map_err(err)?;
    let sep = separatrix(&spec).map_err(err)?;
    out.json("model/system.json", &spec)?;
    let t_cut = sep.t_cut(1e-12);
    out.csv("model/separatrix.csv", |buf| {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf);
        let d = spec.d;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|k| format!("p{k}")));
        header.extend((1..=d).map(|k| format!("q{k}")));
        header.push("energy".into());
        w.write_record(&header)?;
        for k in 0..=400 {
            let t = -t_cut + 2.0 * t_cut * k as f64 / 400.0;
            let (p, q) = sep.state(t);
            let e = 0.5 * p.iter().map(|x| x * x).sum::<f64>() + spec.potential.value(&q) - spec.potential.value(&vec![0.0; d]);
            let mut rec = vec![t];
            rec.extend(&p);
            rec.extend(&q);
            rec.push(e);
            w.write_record(rec.iter().map(|x| format!("{x:.15e}")))?;
        }
        w.flush()?;
        Ok(())
    })
}

fn run_melnikov(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let (spec, sep) = (a.spec()?, a.sep()?);
    let direct = Melnikov::new(&spec, &sep, cfg.melnikov.tol).map_err(err)?;
    let table = MelnikovTable::build(&direct, cfg.melnikov.nodes).map_err(err)?;
    out.json("melnikov/table.json", &table)?;
    let [n_phi, n_s] = cfg.melnikov.grid;
    let grid = grid_from_model(&direct, cfg.melnikov_action(), (n_phi, n_s), cfg.melnikov.tol).map_err(err)?;
    out.csv("melnikov/grid.csv", |buf| grid.write_csv(buf))?;
    out.json("melnikov/grid.json", &grid.sidecar())?;
    let xs: Vec<f64> = (0..n_phi).map(|i| grid.jets[i * n_s].point.1).collect();
    let ys: Vec<f64> = (0..n_s).map(|j| grid.jets[j].point.2).collect();
    let values: Vec<f64> = (0..n_s).flat_map(|j| (0..n_phi).map(move |i| (i, j))).map(|(i, j)| grid.jets[i * n_s + j].value).collect();
    let sg = ScalarGrid { xs, ys, values };
    out.write("melnikov/contour.svg", contour_svg(&sg, "φ", "s", &format!("Melnikov potential L(I = {}, φ, s)", grid.action), 12))
}

/// L* on a rectangular (I, θ) grid over the target interval; NaN outside every neighborhood.
fn reduced_surface(rfs: &[&dyn ReducedFunction], cover: &[CoverInterval], target: (f64, f64), n: [usize; 2]) -> Vec<(f64, f64, f64, f64)> {
    let [n_i, n_t] = n;
    let actions: Vec<f64> = (0..n_i).map(|k| target.0 + (target.1 - target.0) * k as f64 / (n_i - 1) as f64).collect();
    let owner = |i: f64| cover.iter().position(|c| c.lo <= i && i <= c.hi).unwrap_or(0);
    let stars: Vec<Option<f64>> = actions.iter().map(|i| rfs[owner(*i)].theta_star(*i).ok()).collect();
    let w = rfs.iter().map(|r| r.half_width()).fold(f64::INFINITY, f64::min);
    let lo = stars.iter().flatten().fold(f64::INFINITY, |m, x| m.min(*x)) - w;
    let hi = stars.iter().flatten().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) + w;
    let thetas: Vec<f64> = (0..n_t).map(|k| lo + (hi - lo) * k as f64 / (n_t - 1) as f64).collect();
    let cells: Vec<(f64, f64)> = actions.iter().flat_map(|i| thetas.iter().map(move |t| (*i, *t))).collect();
    cells
        .par_iter()
        .map(|&(i, t)| match rfs[owner(i)].eval(i, t) {
            Ok(e) => (i, t, e.value, e.d_theta),
            Err(_) => (i, t, f64::NAN, f64::NAN),
        })
        .collect()
}

fn run_reduction(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let spec = a.spec()?;
    let model: SharedModel = a.table()?;
    let r = &cfg.reduction;
    let curves = discover_curves(model.as_ref(), spec.i_range, r.seeds, r.grid, r.continuation()).map_err(err)?;
    let (i_minus, i_plus) = a.target();
    let cover = select_cover(&curves, i_minus, i_plus).map_err(err)?;
    let rps: Vec<ReducedPoincare> = cover.iter().map(|c| ReducedPoincare::new(model.clone(), curves[c.curve].clone())).collect::<Result<_, _>>().map_err(err)?;
    let half_widths: Vec<f64> = rps.iter().map(|r| r.half_width).collect();
    for c in &curves {
        out.csv(&format!("reduction/curve_{}.csv", c.index), |buf| c.write_csv(buf))?;
    }
    let rfs: Vec<&dyn ReducedFunction> = rps.iter().map(|r| r as &dyn ReducedFunction).collect();
    let surface = reduced_surface(&rfs, &cover, (i_minus, i_plus), r.surface);
    out.json("reduction/reduction.json", &ReductionArtifact { curves, cover, half_widths })?;
    out.csv("reduction/surface.csv", |buf| {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf);
        w.write_record(["I", "theta", "Lstar", "dLstar_dtheta"])?;
        for (i, t, v, d) in &surface {
            w.write_record([i, t, v, d].map(|x| format!("{x:.15e}")))?;
        }
        w.flush()?;
        Ok(())
    })?;
    let grid = ScalarGrid::from_samples(&surface.iter().map(|s| (s.1, s.0, s.2)).collect::<Vec<_>>()).ok_or("degenerate L* surface grid")?;
    out.write("reduction/contour.svg", contour_svg(&grid, "θ", "I", "reduced Poincaré function L*(I, θ)", 14))
}

fn run_ladder(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let rps = a.reduced()?;
    let red = a.reduction()?;
    let rfs: Vec<&dyn ReducedFunction> = rps.iter().map(|r| r as &dyn ReducedFunction).collect();
    let (i_minus, i_plus) = a.target();
    let l = &cfg.ladder;
    let opts = LadderOptions { seeds: l.seeds, rung: RungOptions { step: l.step, slope_max: l.slope_max, ..RungOptions::default() } };
    let ladder = build_ladder(&rfs, &red.cover, i_minus, i_plus, l.delta, opts).map_err(err)?;
    out.json("ladder/ladder.json", &ladder)?;
    let background = plot::read_surface(&a.dir.join("reduction/surface.csv")).ok();
    out.write("ladder/ladder.svg", arnold_core::export::ladder_svg(&ladder, background.as_ref()))?;
    let problems = check_ladder(&ladder);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(format!("ladder invariants violated: {}", problems.join("; ")))
    }
}

fn run_chain(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let eps = cfg.epsilon();
    if !(eps > 0.0) {
        return Err("chain needs epsilon > 0".into());
    }
    let spec = a.spec()?;
    let rps = a.reduced()?;
    let ladder = a.ladder()?;
    let rfs: Vec<&dyn ReducedFunction> = rps.iter().map(|r| r as &dyn ReducedFunction).collect();
    let opts = ChainOptions { boundary_samples: cfg.chain.boundary_samples, eps0_bisections: cfg.chain.eps0_bisections, ..ChainOptions::default() };
    let chain = build_chain(&ladder, &rfs, &spec, eps, ladder.delta, opts);
    let report = check_chain(&chain, &rfs, &spec);
    out.json("chain/chain.json", &chain)?;
    out.csv("chain/chain.csv", |buf| chain.write_csv(buf))?;
    out.json("chain/check.json", &report)?;
    out.write("chain/chain.svg", arnold_core::export::chain_svg(&chain, Some(&ladder)))?;
    if let Some(f) = &chain.failure {
        let eps0 = f.eps0.map(|(lo, hi)| format!(", eps0 in [{lo:.3e}, {hi:.3e})")).unwrap_or_default();
        return Err(format!("chain incomplete at leg {} ({:?}, rung {}): {}{eps0}", f.leg, f.kind, f.rung, f.message));
    }
    if !report.pass {
        return Err(format!("chain check failed: {}", report.message));
    }
    Ok(())
}

fn run_verify(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let (spec, sep) = (a.spec()?, a.sep()?);
    let rps = a.reduced()?;
    let v = &cfg.verify;
    let rp = rps
        .iter()
        .find(|r| {
            let (lo, hi) = r.action_range();
            lo <= v.action && v.action <= hi
        })
        .ok_or_else(|| format!("no reduced function covers the anchor action {}", v.action))?;
    let theta = rp.theta_star(v.action).map_err(err)? + v.offset_frac * rp.half_width;
    let study = jump_convergence(&spec, &sep, rp, (v.action, theta, 0.0), &v.eps, v.jump_options()).map_err(err)?;
    out.json("verify/jump.json", &study)?;
    out.csv("verify/jump.csv", |buf| study.write_csv(buf))?;
    out.write("verify/jump.svg", plot::jump_from_study(&study))?;
    if study.measurements.len() < 2 {
        return Err(format!("too few successful jump measurements ({})", study.measurements.len()));
    }
    Ok(())
}

fn run_genericity(cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    let (spec, sep) = (a.spec()?, a.sep()?);
    let g = &cfg.genericity;
    let base = (g.base[0], g.base[1], g.base[2]);
    let mut values = [1.0; 10];
    if let Some(t) = &g.targets {
        values.copy_from_slice(t);
    }
    let target = DerivativeTarget::full(base, values, g.delta).map_err(err)?;
    let design = design_adaptive(&spec, &sep, &target, g.start_order, g.max_order).map_err(err)?;
    out.json("genericity/design.json", &design)?;
    let basis = basis_matrix(&spec, &sep, base, g.delta, g.start_order, g.max_order).map_err(err)?;
    out.json("genericity/basis.json", &basis)?;
    let direct = Melnikov::new(&spec, &sep, VERIFY_TOL).map_err(err)?;
    let opts = ScanOptions { threshold: g.threshold, ..ScanOptions::default() };
    let scan = scan_degeneracy_model(&direct, &cfg.scan_actions(), g.scan_angles, g.scan_directions, opts).map_err(err)?;
    out.json("genericity/degeneracy.json", &scan)?;
    out.csv("genericity/degeneracy.csv", |buf| scan.write_csv(buf))
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, a: &mut Artifacts, out: &mut Outputs) -> Result<(), String> {
    match stage {
        Stage::Model => run_model(cfg, out),
        Stage::Melnikov => run_melnikov(cfg, a, out),
        Stage::Reduction => run_reduction(cfg, a, out),
        Stage::Ladder => run_ladder(cfg, a, out),
        Stage::Chain => run_chain(cfg, a, out),
        Stage::Verify => run_verify(cfg, a, out),
        Stage::Genericity => run_genericity(cfg, a, out),
    }
}

pub fn stage_key(cfg: &PipelineConfig, stage: Stage) -> String {
    sha256_hex(cfg.stage_inputs(stage).to_string().as_bytes())
}

fn closure(stage: Stage) -> BTreeSet<Stage> {
    let mut out = BTreeSet::new();
    let mut todo: Vec<Stage> = stage.upstream().to_vec();
    while let Some(s) = todo.pop() {
        if out.insert(s) {
            todo.extend(s.upstream());
        }
    }
    out
}

/// Runs `stages` (dependency order) into `dir`, reusing cached artifacts whose inputs are unchanged.
pub fn run(cfg: &PipelineConfig, config_path: &Path, config_bytes: &[u8], stages: &[Stage], dir: &Path) -> Result<RunManifest, RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    let _lock = DirLock::acquire(dir).map_err(|e| RunError::Io(e.to_string()))?;
    let mut manifest = RunManifest::load(dir).unwrap_or(RunManifest {
        tool_version: String::new(),
        config_hash: String::new(),
        config_path: String::new(),
        stages: vec![],
        files: vec![],
    });
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config_hash = sha256_hex(config_bytes);
    manifest.config_path = config_path.display().to_string();
    let mut requested: Vec<Stage> = stages.to_vec();
    requested.sort();
    requested.dedup();

    let mut failures: Vec<(Stage, String)> = Vec::new();
    let mut artifacts = Artifacts { dir, cfg, spec: None, sep: None, table: None, reduction: None };
    for &stage in &requested {
        let key = stage_key(cfg, stage);
        let fresh = |m: &RunManifest, s: Stage| {
            m.record(s).is_some_and(|r| r.status != Status::Error && r.key == stage_key(cfg, s) && m.outputs_intact(dir, r))
        };
        let missing: Vec<&str> = closure(stage).into_iter().rev().filter(|s| !fresh(&manifest, *s)).map(|s| s.name()).collect();
        if !missing.is_empty() {
            let msg = format!("missing upstream artifact: stage '{}' has no current output (missing: {}); run it first or add it to --stages", missing[0], missing.join(", "));
            failures.push((stage, msg.clone()));
            manifest.upsert(StageRecord { stage, status: Status::Error, key, seconds: 0.0, outputs: vec![], message: Some(msg) });
            continue;
        }
        if fresh(&manifest, stage) {
            let rec = manifest.record(stage).unwrap().clone();
            manifest.upsert(StageRecord { status: Status::Cached, seconds: 0.0, message: None, ..rec });
            continue;
        }
        // Invalidate downstream memos before rerunning a stage.
        match stage {
            Stage::Model => (artifacts.spec, artifacts.sep) = (None, None),
            Stage::Melnikov => artifacts.table = None,
            Stage::Reduction => artifacts.reduction = None,
            _ => {}
        }
        let t0 = Instant::now();
        let mut out = Outputs { dir, files: vec![] };
        let res = run_stage(stage, cfg, &mut artifacts, &mut out);
        let seconds = t0.elapsed().as_secs_f64();
        let (status, message) = match res {
            Ok(()) => (Status::Ran, None),
            Err(m) => {
                failures.push((stage, m.clone()));
                (Status::Error, Some(m))
            }
        };
        manifest.upsert(StageRecord { stage, status, key, seconds, outputs: out.files, message });
        manifest.refresh_files(dir).map_err(|e| RunError::Io(e.to_string()))?;
    }
    manifest.refresh_files(dir).map_err(|e| RunError::Io(e.to_string()))?;
    let bad = manifest.validate(dir);
    if !bad.is_empty() {
        failures.push((requested.last().copied().unwrap_or(Stage::Model), format!("manifest checksum mismatch: {}", bad.join(", "))));
    }
    manifest.save(dir).map_err(|e| RunError::Io(e.to_string()))?;
    if failures.is_empty() {
        Ok(manifest)
    } else {
        Err(RunError::Stages(failures))
    }
}
