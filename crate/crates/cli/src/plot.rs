//! Artifact files to SVG.

use arnold_core::chain::TransitionChain;
use arnold_core::export::{chain_svg, contour_svg, jump_svg, ladder_svg, ScalarGrid};
use arnold_core::ladder::Ladder;
use arnold_core::verify::{fit_slope, JumpStudy};
use clap::ValueEnum;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Contour,
    Ladder,
    Chain,
    Jump,
}

/// What an artifact file holds, judged from its contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Detected {
    MelnikovGrid,
    Surface,
    Ladder,
    Chain,
    JumpJson,
    JumpCsv,
    Unknown,
}

fn detect(text: &str) -> Detected {
    let first = text.lines().next().unwrap_or("").trim();
    if first.starts_with("I,phi,s,L,") {
        return Detected::MelnikovGrid;
    }
    if first.starts_with("I,theta,Lstar") {
        return Detected::Surface;
    }
    if first.starts_with("eps,measured,") {
        return Detected::JumpCsv;
    }
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(v) if v.get("rungs").is_some() => Detected::Ladder,
        Ok(v) if v.get("legs").is_some() => Detected::Chain,
        Ok(v) if v.get("measurements").is_some() => Detected::JumpJson,
        _ => Detected::Unknown,
    }
}

fn columns(text: &str, want: &[&str]) -> Result<Vec<Vec<f64>>, String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let idx: Vec<usize> = want.iter().map(|w| header.iter().position(|h| h == *w).ok_or(format!("missing column {w}"))).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        out.push(idx.iter().map(|i| rec[*i].parse::<f64>().map_err(|e| format!("{e}: {}", &rec[*i]))).collect::<Result<Vec<f64>, _>>()?);
    }
    Ok(out)
}

fn grid_from(text: &str, x: &str, y: &str, v: &str) -> Result<ScalarGrid, String> {
    let rows = columns(text, &[x, y, v])?;
    let samples: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    ScalarGrid::from_samples(&samples).ok_or_else(|| "samples do not form a grid of at least 2 x 2".to_string())
}

pub fn read_surface(path: &Path) -> Result<ScalarGrid, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    grid_from(&text, "theta", "I", "Lstar")
}

/// Log-log error plot with the least-squares line through the surviving points.
pub fn jump_plot(eps: &[f64], error: &[f64]) -> String {
    let pts: Vec<(f64, f64)> = eps.iter().zip(error).map(|(e, r)| (*e, r.abs())).filter(|(e, r)| *e > 0.0 && *r > 0.0).collect();
    let slope = fit_slope(&pts);
    let fit = slope.is_finite().then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0.log10()).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1.log10()).sum::<f64>() / n;
        (slope, my - slope * mx)
    });
    jump_svg(eps, error, fit)
}

pub fn jump_from_study(study: &JumpStudy) -> String {
    let eps: Vec<f64> = study.measurements.iter().map(|m| m.eps).collect();
    let err: Vec<f64> = study.measurements.iter().map(|m| m.error).collect();
    jump_plot(&eps, &err)
}

/// Renders `input` as `kind`; `overlay` is an L* surface CSV (ladder) or a ladder JSON (chain).
pub fn render(input: &Path, kind: Kind, overlay: Option<&Path>) -> Result<String, String> {
    let text = fs::read_to_string(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let found = detect(&text);
    let mismatch = || format!("{} is not a {kind:?} artifact (contents look like {found:?})", input.display()).to_lowercase();
    match (kind, found) {
        (Kind::Contour, Detected::MelnikovGrid) => {
            let g = grid_from(&text, "phi", "s", "L")?;
            let action = columns(&text, &["I"])?.first().map(|r| r[0]).unwrap_or(f64::NAN);
            Ok(contour_svg(&g, "φ", "s", &format!("Melnikov potential L(I = {action}, φ, s)"), 12))
        }
        (Kind::Contour, Detected::Surface) => Ok(contour_svg(&grid_from(&text, "theta", "I", "Lstar")?, "θ", "I", "reduced Poincaré function L*(I, θ)", 14)),
        (Kind::Ladder, Detected::Ladder) => {
            let ladder: Ladder = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let bg = overlay.map(read_surface).transpose()?;
            Ok(ladder_svg(&ladder, bg.as_ref()))
        }
        (Kind::Chain, Detected::Chain) => {
            let chain: TransitionChain = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let ladder: Option<Ladder> = match overlay {
                Some(p) => Some(serde_json::from_str(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?).map_err(|e| e.to_string())?),
                None => None,
            };
            Ok(chain_svg(&chain, ladder.as_ref()))
        }
        (Kind::Jump, Detected::JumpJson) => {
            let study: JumpStudy = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            Ok(jump_from_study(&study))
        }
        (Kind::Jump, Detected::JumpCsv) => {
            let rows = columns(&text, &["eps", "error"])?;
            let (eps, err): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r[0], r[1])).unzip();
            Ok(jump_plot(&eps, &err))
        }
        _ => Err(mismatch()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_by_content() {
        assert_eq!(detect("I,phi,s,L,dLdphi\n1,2,3,4,5\n"), Detected::MelnikovGrid);
        assert_eq!(detect("I,theta,Lstar,dLstar_dtheta\n"), Detected::Surface);
        assert_eq!(detect("eps,measured,predicted\n"), Detected::JumpCsv);
        assert_eq!(detect(r#"{"rungs": []}"#), Detected::Ladder);
        assert_eq!(detect(r#"{"legs": []}"#), Detected::Chain);
        assert_eq!(detect("hello"), Detected::Unknown);
    }

    #[test]
    fn nan_cells_parse() {
        let text = "I,theta,Lstar\n0,0,1\n0,1,NaN\n1,0,2\n1,1,3\n";
        let g = grid_from(text, "theta", "I", "Lstar").unwrap();
        assert!(g.at(1, 0).is_nan());
        assert_eq!(g.at(1, 1), 3.0);
    }
}
