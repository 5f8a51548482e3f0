//! Scenario configuration files (JSON, versioned).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FieldError, RunError};
use crate::registry;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub id: String,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub particles: usize,
    pub seed: u64,
    /// Initial law; a standard Gaussian of the model dimension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<LawSpec>,
    /// Second initial law, used by the total-variation runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<LawSpec>,
    pub phi: PhiSpec,
    pub f: FSpec,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub g: GChoice,
    #[serde(default = "default_true")]
    pub centered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_epsilon() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSpec {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Dirac { point: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Constant { value: Vec<f64> },
    /// `phi(x) = matrix x + offset`.
    Linear { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    Named { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FSpec {
    Constant { value: f64 },
    Coordinate { index: usize },
    Polynomial { index: usize, coefficients: Vec<f64> },
    Indicator { index: usize, threshold: f64 },
    Named { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Bismut,
    Degenerate,
    Pathwise,
    FiniteDifference,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bismut => "bismut",
            Self::Degenerate => "degenerate",
            Self::Pathwise => "pathwise",
            Self::FiniteDifference => "finite_difference",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GChoice {
    #[default]
    Linear,
    Smoothstep,
}

impl ScenarioConfig {
    /// Mean-field OU with `f(x) = x`, `phi = 1` and all three non-degenerate estimators.
    pub fn mean_field_ou() -> Self {
        Self {
            version: SCHEMA_VERSION,
            id: "mean_field_ou".into(),
            model: ModelConfig {
                id: "mean_field_ou".into(),
                params: BTreeMap::from([("a".into(), -1.0), ("c".into(), 0.5), ("sigma".into(), 1.0)]),
            },
            grid: GridConfig {
                horizon: 1.0,
                n_steps: 200,
            },
            particles: 100_000,
            seed: 20_240_601,
            initial: None,
            comparison: None,
            phi: PhiSpec::Constant { value: vec![1.0] },
            f: FSpec::Coordinate { index: 0 },
            estimators: vec![
                EstimatorKind::Bismut,
                EstimatorKind::Pathwise,
                EstimatorKind::FiniteDifference,
            ],
            epsilon: default_epsilon(),
            g: GChoice::Linear,
            centered: true,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dt(&self) -> f64 {
        self.grid.horizon / self.grid.n_steps as f64
    }

    /// Checks every field against the preconditions of the operations it
    /// feeds, collecting all problems instead of stopping at the first.
    pub fn validate(&self) -> Result<(), RunError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, msg: String| errs.push(FieldError::new(field, msg));
        if self.version != SCHEMA_VERSION {
            push("version", format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version));
        }
        if self.id.trim().is_empty() {
            push("id", "must not be empty".into());
        }
        if !(self.grid.horizon.is_finite() && self.grid.horizon > 0.0) {
            push("grid.horizon", format!("must be positive and finite, got {}", self.grid.horizon));
        }
        if self.grid.n_steps == 0 {
            push("grid.n_steps", "must be at least 1".into());
        }
        if self.particles < 2 {
            push("particles", format!("need at least 2 particles for a standard error, got {}", self.particles));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            push("epsilon", format!("must be positive and finite, got {}", self.epsilon));
        }
        if self.estimators.is_empty() {
            push("estimators", "list at least one estimator".into());
        }
        for (i, a) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(a) {
                push("estimators", format!("{a} listed twice"));
            }
        }

        let info = match registry::model_info(&self.model) {
            Ok(info) => Some(info),
            Err(mut e) => {
                errs.append(&mut e);
                None
            }
        };
        if let Some(info) = info {
            let d = info.dim;
            for (field, law) in [("initial", &self.initial), ("comparison", &self.comparison)] {
                if let Some(law) = law {
                    law.check(field, d, &mut errs);
                }
            }
            self.phi.check(d, &mut errs);
            self.f.check(d, &mut errs);
            if self.estimators.contains(&EstimatorKind::Degenerate) && !info.hamiltonian {
                errs.push(FieldError::new(
                    "estimators",
                    format!("degenerate estimator needs a model with a position/velocity split; {} has none", self.model.id),
                ));
            }
            if self.estimators.contains(&EstimatorKind::Bismut) && !info.square_diffusion {
                errs.push(FieldError::new(
                    "estimators",
                    format!("bismut estimator needs an invertible diffusion; {} is degenerate", self.model.id),
                ));
            }
        }
        if self.estimators.contains(&EstimatorKind::Pathwise) && !self.f.differentiable() {
            errs.push(FieldError::new("f", "pathwise estimator needs a differentiable test function".into()));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(errs))
        }
    }
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl LawSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Dirac { point } => point.len(),
        }
    }

    /// Per-coordinate `(mean, std)`.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Gaussian { mean, std } => (mean.clone(), std.clone()),
            Self::Dirac { point } => (point.clone(), vec![0.0; point.len()]),
        }
    }

    fn check(&self, field: &str, d: usize, errs: &mut Vec<FieldError>) {
        if self.dim() != d {
            errs.push(FieldError::new(field, format!("dimension {} does not match model dimension {d}", self.dim())));
        }
        match self {
            Self::Gaussian { mean, std } => {
                if mean.len() != std.len() {
                    errs.push(FieldError::new(&format!("{field}.std"), "must have the same length as mean".into()));
                }
                if !all_finite(mean) {
                    errs.push(FieldError::new(&format!("{field}.mean"), "must be finite".into()));
                }
                if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    errs.push(FieldError::new(&format!("{field}.std"), "must be finite and non-negative".into()));
                }
            }
            Self::Dirac { point } => {
                if !all_finite(point) {
                    errs.push(FieldError::new(&format!("{field}.point"), "must be finite".into()));
                }
            }
        }
    }
}

impl PhiSpec {
    fn check(&self, d: usize, errs: &mut Vec<FieldError>) {
        match self {
            Self::Constant { value } => {
                if value.len() != d {
                    errs.push(FieldError::new("phi.value", format!("length {} does not match model dimension {d}", value.len())));
                }
                if !all_finite(value) {
                    errs.push(FieldError::new("phi.value", "must be finite".into()));
                }
            }
            Self::Linear { matrix, offset } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    errs.push(FieldError::new("phi.matrix", format!("must be {d} x {d}")));
                }
                if offset.len() != d {
                    errs.push(FieldError::new("phi.offset", format!("length {} does not match model dimension {d}", offset.len())));
                }
                if matrix.iter().any(|r| !all_finite(r)) || !all_finite(offset) {
                    errs.push(FieldError::new("phi", "linear map must be finite".into()));
                }
            }
            Self::Named { name } => {
                if !registry::PHI_NAMES.contains(&name.as_str()) {
                    errs.push(FieldError::new(
                        "phi.name",
                        format!("unknown direction '{name}' (known: {})", registry::PHI_NAMES.join(", ")),
                    ));
                }
            }
        }
    }
}

impl FSpec {
    pub fn differentiable(&self) -> bool {
        match self {
            Self::Indicator { .. } => false,
            Self::Named { name } => registry::named_f_is_smooth(name),
            _ => true,
        }
    }

    fn check(&self, d: usize, errs: &mut Vec<FieldError>) {
        let index_ok = |index: usize, errs: &mut Vec<FieldError>| {
            if index >= d {
                errs.push(FieldError::new("f.index", format!("{index} is out of range for dimension {d}")));
            }
        };
        match self {
            Self::Constant { value } => {
                if !value.is_finite() {
                    errs.push(FieldError::new("f.value", "must be finite".into()));
                }
            }
            Self::Coordinate { index } => index_ok(*index, errs),
            Self::Polynomial { index, coefficients } => {
                index_ok(*index, errs);
                if coefficients.is_empty() || !all_finite(coefficients) {
                    errs.push(FieldError::new("f.coefficients", "need at least one finite coefficient".into()));
                }
            }
            Self::Indicator { index, threshold } => {
                index_ok(*index, errs);
                if !threshold.is_finite() {
                    errs.push(FieldError::new("f.threshold", "must be finite".into()));
                }
            }
            Self::Named { name } => {
                if !registry::F_NAMES.contains(&name.as_str()) {
                    errs.push(FieldError::new(
                        "f.name",
                        format!("unknown test function '{name}' (known: {})", registry::F_NAMES.join(", ")),
                    ));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_is_valid_and_round_trips() {
        let cfg = ScenarioConfig::mean_field_ou();
        cfg.validate().unwrap();
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn validation_reports_every_bad_field() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.grid.n_steps = 0;
        cfg.particles = 1;
        cfg.epsilon = -1.0;
        cfg.phi = PhiSpec::Constant { value: vec![1.0, 2.0] };
        let Err(RunError::Config(errs)) = cfg.validate() else {
            panic!("expected a config error");
        };
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["grid.n_steps", "particles", "epsilon", "phi.value"]);
    }

    #[test]
    fn unknown_model_is_a_field_error() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.model.id = "heston".into();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("model.id") && msg.contains("heston"), "{msg}");
    }

    #[test]
    fn pathwise_rejects_indicator() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.f = FSpec::Indicator {
            index: 0,
            threshold: 0.0,
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("differentiable"));
    }

    #[test]
    fn missing_defaults_are_filled() {
        let text = r#"{
            "version": 1, "id": "x",
            "model": {"id": "kinetic_langevin"},
            "grid": {"horizon": 1.0, "n_steps": 10},
            "particles": 100, "seed": 3,
            "phi": {"kind": "named", "name": "ones"},
            "f": {"kind": "coordinate", "index": 0},
            "estimators": ["degenerate", "finite_difference"]
        }"#;
        let cfg = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(cfg.epsilon, 1e-3);
        assert!(cfg.centered);
        assert_eq!(cfg.g, GChoice::Linear);
    }

    #[test]
    fn bismut_on_a_degenerate_model_is_rejected() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.model = ModelConfig {
            id: "kinetic_langevin".into(),
            params: BTreeMap::new(),
        };
        cfg.phi = PhiSpec::Constant { value: vec![1.0, 0.0] };
        cfg.estimators = vec![EstimatorKind::Bismut];
        assert!(cfg.validate().unwrap_err().to_string().contains("invertible diffusion"));
    }
}
