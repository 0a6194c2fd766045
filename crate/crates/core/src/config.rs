//! Pipeline configuration: the system record plus one section per stage.

use crate::genericity::ScanOptions;
use crate::ladder::{LadderOptions, RungOptions};
use crate::model::SystemConfig;
use crate::reduction::ContinuationOptions;
use crate::verify::JumpOptions;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown stage '{0}'")]
    UnknownStage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelnikovSection {
    pub tol: f64,
    /// Chebyshev nodes of the action table.
    pub nodes: usize,
    /// (nφ, ns) of the exported grid.
    pub grid: [usize; 2],
    /// Action of the exported grid; the middle of the range when absent.
    pub action: Option<f64>,
}

impl Default for MelnikovSection {
    fn default() -> Self {
        MelnikovSection { tol: 1e-10, nodes: 48, grid: [32, 32], action: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionSection {
    /// Actions at which minima are searched for.
    pub seeds: usize,
    pub grid: usize,
    pub eig_floor: f64,
    pub h_init: f64,
    pub h_max: f64,
    /// (n_I, n_θ) of the exported L* surface.
    pub surface: [usize; 2],
}

impl Default for ReductionSection {
    fn default() -> Self {
        let c = ContinuationOptions::default();
        ReductionSection { seeds: 4, grid: 32, eig_floor: c.eig_floor, h_init: c.h_init, h_max: c.h_max, surface: [41, 61] }
    }
}

impl ReductionSection {
    pub fn continuation(&self) -> ContinuationOptions {
        ContinuationOptions { h_init: self.h_init, h_max: self.h_max, eig_floor: self.eig_floor, ..ContinuationOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderSection {
    /// Target interval [I⁻, I⁺]; the system range when absent.
    pub i_minus: Option<f64>,
    pub i_plus: Option<f64>,
    pub delta: f64,
    pub seeds: usize,
    pub step: f64,
    pub slope_max: f64,
}

impl Default for LadderSection {
    fn default() -> Self {
        let r = RungOptions::default();
        LadderSection { i_minus: None, i_plus: None, delta: 1e-2, seeds: LadderOptions::default().seeds, step: r.step, slope_max: r.slope_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSection {
    pub boundary_samples: usize,
    pub eps0_bisections: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection { boundary_samples: 64, eps0_bisections: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub eps: Vec<f64>,
    /// Anchor action; the excursion starts at θ* + offset_frac · half-width, s = 0.
    pub action: f64,
    pub offset_frac: f64,
    pub nhim_tol: f64,
    pub window_periods: f64,
    pub ode_tol: f64,
    pub t_max: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let j = JumpOptions::default();
        VerifySection {
            eps: vec![1e-3, 3e-3, 1e-2, 3e-2],
            action: 1.2,
            offset_frac: 0.5,
            nhim_tol: j.nhim_tol,
            window_periods: j.window_periods,
            ode_tol: j.ode_tol,
            t_max: j.t_max,
        }
    }
}

impl VerifySection {
    pub fn jump_options(&self) -> JumpOptions {
        JumpOptions { nhim_tol: self.nhim_tol, window_periods: self.window_periods, ode_tol: self.ode_tol, t_max: self.t_max, ..JumpOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenericitySection {
    /// Base point (I, φ, s) of the derivative targets.
    pub base: [f64; 3],
    /// Ten target values for ∂^{j,k}L, (j, k) in graded order; all ones when absent.
    pub targets: Option<Vec<f64>>,
    pub delta: f64,
    pub start_order: usize,
    pub max_order: usize,
    /// Actions of the degeneracy scan; eleven points across the range when absent.
    pub scan_actions: Option<Vec<f64>>,
    pub scan_angles: usize,
    pub scan_directions: usize,
    pub threshold: f64,
}

impl Default for GenericitySection {
    fn default() -> Self {
        GenericitySection {
            base: [1.0, 0.3, 0.7],
            targets: None,
            delta: 1e-3,
            start_order: 256,
            max_order: 4096,
            scan_actions: None,
            scan_angles: 32,
            scan_directions: 16,
            threshold: ScanOptions::default().threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub system: SystemConfig,
    #[serde(default)]
    pub melnikov: MelnikovSection,
    #[serde(default)]
    pub reduction: ReductionSection,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub genericity: GenericitySection,
}

impl FromStr for PipelineConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    /// The reference system: pendulum, G = I²/2, two-harmonic h, I ∈ [0.5, 2], ladder over [0.6, 1.9].
    pub fn reference() -> Self {
        REFERENCE_TOML.parse().expect("reference config is valid")
    }

    pub fn epsilon(&self) -> f64 {
        self.system.perturbation.epsilon
    }

    /// Target interval of the ladder and chain.
    pub fn target_range(&self) -> (f64, f64) {
        let [a, b] = self.system.range.i_range;
        (self.ladder.i_minus.unwrap_or(a), self.ladder.i_plus.unwrap_or(b))
    }

    pub fn melnikov_action(&self) -> f64 {
        let [a, b] = self.system.range.i_range;
        self.melnikov.action.unwrap_or(0.5 * (a + b))
    }

    pub fn scan_actions(&self) -> Vec<f64> {
        let [a, b] = self.system.range.i_range;
        self.genericity.scan_actions.clone().unwrap_or_else(|| (0..11).map(|k| a + (b - a) * k as f64 / 10.0).collect())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let [a, b] = self.system.range.i_range;
        let (lo, hi) = self.target_range();
        if !(a <= lo && lo < hi && hi <= b) {
            return bad(format!("ladder interval [{lo}, {hi}] must lie inside the action range [{a}, {b}]"));
        }
        if !(self.epsilon() >= 0.0) {
            return bad(format!("epsilon {} must be non-negative", self.epsilon()));
        }
        if !(self.melnikov.tol > 0.0) || self.melnikov.grid.iter().any(|n| *n < 8) || self.melnikov.nodes < 4 {
            return bad("melnikov: tol > 0, grid cells >= 8 and nodes >= 4 required".into());
        }
        if self.reduction.grid < 16 || self.reduction.seeds == 0 || self.reduction.surface.iter().any(|n| *n < 2) {
            return bad("reduction: grid >= 16, seeds >= 1 and surface >= 2 x 2 required".into());
        }
        if !(self.ladder.delta > 0.0) {
            return bad("ladder: delta must be positive".into());
        }
        if self.chain.boundary_samples < 8 {
            return bad("chain: boundary_samples >= 8 required".into());
        }
        if self.verify.eps.iter().any(|e| !(*e > 0.0)) {
            return bad("verify: every eps must be positive".into());
        }
        if let Some(t) = &self.genericity.targets {
            if t.len() != 10 {
                return bad(format!("genericity: targets needs 10 values, got {}", t.len()));
            }
        }
        Ok(())
    }

    /// Canonical inputs of one stage, upstream inputs included. Equal values mean a cached
    /// artifact of that stage can be reused.
    pub fn stage_inputs(&self, stage: Stage) -> Value {
        let mut system = serde_json::to_value(&self.system).expect("serializable");
        let eps = self.epsilon();
        // ε only enters chain and verify.
        system["perturbation"]["epsilon"] = json!(0.0);
        let own = match stage {
            Stage::Model => system,
            Stage::Melnikov => json!(self.melnikov),
            Stage::Reduction => json!(self.reduction),
            Stage::Ladder => json!({ "ladder": self.ladder, "target": self.target_range() }),
            Stage::Chain => json!({ "chain": self.chain, "epsilon": eps }),
            Stage::Verify => json!({ "verify": self.verify, "epsilon": eps }),
            Stage::Genericity => json!(self.genericity),
        };
        let upstream: Vec<Value> = stage.upstream().iter().map(|s| self.stage_inputs(*s)).collect();
        json!({ "stage": stage.name(), "own": own, "upstream": upstream })
    }
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Model,
    Melnikov,
    Reduction,
    Ladder,
    Chain,
    Verify,
    Genericity,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Model, Stage::Melnikov, Stage::Reduction, Stage::Ladder, Stage::Chain, Stage::Verify, Stage::Genericity];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Model => "model",
            Stage::Melnikov => "melnikov",
            Stage::Reduction => "reduction",
            Stage::Ladder => "ladder",
            Stage::Chain => "chain",
            Stage::Verify => "verify",
            Stage::Genericity => "genericity",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Model => &[],
            Stage::Melnikov => &[Stage::Model],
            Stage::Reduction => &[Stage::Melnikov],
            Stage::Ladder => &[Stage::Reduction],
            Stage::Chain => &[Stage::Ladder],
            Stage::Verify => &[Stage::Reduction],
            Stage::Genericity => &[Stage::Model],
        }
    }

    /// Parses "all" or a comma-separated list; the result is sorted in dependency order.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>, ConfigError> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut out: Vec<Stage> = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| ConfigError::UnknownStage(s.to_string()))
    }
}

pub const REFERENCE_TOML: &str = r#"# Pendulum V = cos q - 1, rotor G = I^2/2,
# h = (cos q - 1) (cos(phi - t) + 1/2 cos(phi - 2t)).

[potential]
terms = [
  { coeff = 1.0, indices = [1] },
  { coeff = -1.0, indices = [0] },
]

[rotor]
coeffs = [0.0, 0.0, 0.5]

[perturbation]
epsilon = 1e-3
# (cos q - 1) cos(phi - m t) = 1/2 cos(q + phi - m t) + 1/2 cos(-q + phi - m t) - cos(phi - m t)
terms = [
  { coeff = 0.5, indices = { q = [1], phi = 1, t = -1 } },
  { coeff = 0.5, indices = { q = [-1], phi = 1, t = -1 } },
  { coeff = -1.0, indices = { phi = 1, t = -1 } },
  { coeff = 0.25, indices = { q = [1], phi = 1, t = -2 } },
  { coeff = 0.25, indices = { q = [-1], phi = 1, t = -2 } },
  { coeff = -0.5, indices = { phi = 1, t = -2 } },
]

[range]
i_range = [0.5, 2.0]

[ladder]
i_minus = 0.6
i_plus = 1.9
delta = 1e-2
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_system, Perturbation};

    #[test]
    fn reference_config_builds_the_reference_system() {
        let cfg = PipelineConfig::reference();
        let spec = build_system(&cfg.system).unwrap();
        let h = Perturbation::reference();
        for k in 0..50 {
            let x = 0.37 * k as f64;
            let (q, phi, t) = (x.sin() * 3.0, 1.3 * x, 0.7 - x);
            let a = spec.perturbation.value(&[0.2], &[q], 1.1, phi, t);
            assert!((a - h.value(&[0.2], &[q], 1.1, phi, t)).abs() < 1e-14);
        }
        assert_eq!(spec.epsilon, 1e-3);
        assert_eq!(cfg.target_range(), (0.6, 1.9));
        assert_eq!(cfg.melnikov, MelnikovSection::default());
    }

    #[test]
    fn editing_epsilon_changes_only_chain_and_verify_inputs() {
        let a = PipelineConfig::reference();
        let mut b = a.clone();
        b.system.perturbation.epsilon = 2e-3;
        for st in Stage::ALL {
            let changed = a.stage_inputs(st) != b.stage_inputs(st);
            assert_eq!(changed, matches!(st, Stage::Chain | Stage::Verify), "{st}");
        }
    }

    #[test]
    fn upstream_edits_propagate() {
        let a = PipelineConfig::reference();
        let mut b = a.clone();
        b.melnikov.nodes = 64;
        for st in Stage::ALL {
            let changed = a.stage_inputs(st) != b.stage_inputs(st);
            assert_eq!(changed, !matches!(st, Stage::Model | Stage::Genericity), "{st}");
        }
    }

    #[test]
    fn stage_lists() {
        assert_eq!(Stage::parse_list("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(Stage::parse_list("chain, melnikov,chain").unwrap(), vec![Stage::Melnikov, Stage::Chain]);
        assert_eq!(Stage::parse_list("melnikov,bogus"), Err(ConfigError::UnknownStage("bogus".into())));
    }

    #[test]
    fn malformed_and_invalid_configs_are_rejected() {
        assert!(matches!("[potential".parse::<PipelineConfig>(), Err(ConfigError::Parse(_))));
        let bad = REFERENCE_TOML.replace("i_plus = 1.9", "i_plus = 2.5");
        assert!(matches!(bad.parse::<PipelineConfig>(), Err(ConfigError::Invalid(_))));
        let bad = format!("{REFERENCE_TOML}\n[melnikov]\ngrid = [4, 4]\n");
        assert!(matches!(bad.parse::<PipelineConfig>(), Err(ConfigError::Invalid(_))));
    }
}
