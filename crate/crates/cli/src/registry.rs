//! Built-in models, directions and test functions addressable from a config.

use std::collections::BTreeMap;

use mvbismut::functions::{
    AffineField, Constant, ConstantField, Coordinate, FnField, FnTest, Indicator, Polynomial, TestFunction,
    VectorField,
};
use mvbismut::hamiltonian::HamiltonianModel;
use mvbismut::initial::{DiracLaw, GaussianLaw, InitialLaw};
use mvbismut::models::{ControlledChain, KineticLangevin, MeanFieldOu, TanhInteraction};
use mvbismut::CoefficientModel;

use crate::config::{FSpec, LawSpec, ModelConfig, PhiSpec, ScenarioConfig};
use crate::error::{FieldError, RunError};

pub const MODEL_IDS: [&str; 4] = ["mean_field_ou", "nonlinear_mv", "kinetic_langevin", "example21_linear"];
pub const PHI_NAMES: [&str; 4] = ["ones", "identity", "first_axis", "last_axis"];
pub const F_NAMES: [&str; 3] = ["tanh_first", "square_norm", "positive_first"];

/// Static facts about a registered model, available before it is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelInfo {
    pub dim: usize,
    pub hamiltonian: bool,
    pub square_diffusion: bool,
}

fn known_params(id: &str) -> Option<&'static [&'static str]> {
    Some(match id {
        "mean_field_ou" => &["a", "c", "sigma"],
        "nonlinear_mv" => &["kappa", "sigma"],
        "kinetic_langevin" => &["friction"],
        "example21_linear" => &["beta", "kappa"],
        _ => return None,
    })
}

pub fn model_info(cfg: &ModelConfig) -> Result<ModelInfo, Vec<FieldError>> {
    let Some(known) = known_params(&cfg.id) else {
        return Err(vec![FieldError::new(
            "model.id",
            format!("unknown model '{}' (known: {})", cfg.id, MODEL_IDS.join(", ")),
        )]);
    };
    let mut errs = Vec::new();
    for (k, v) in &cfg.params {
        if !known.contains(&k.as_str()) {
            errs.push(FieldError::new(
                &format!("model.params.{k}"),
                format!("not a parameter of {} (known: {})", cfg.id, known.join(", ")),
            ));
        } else if !v.is_finite() {
            errs.push(FieldError::new(&format!("model.params.{k}"), "must be finite".into()));
        }
    }
    if cfg.params.get("sigma").is_some_and(|s| *s == 0.0) {
        errs.push(FieldError::new("model.params.sigma", "must be non-zero".into()));
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(match cfg.id.as_str() {
        "mean_field_ou" => ModelInfo {
            dim: 1,
            hamiltonian: true,
            square_diffusion: true,
        },
        "nonlinear_mv" => ModelInfo {
            dim: 1,
            hamiltonian: false,
            square_diffusion: true,
        },
        "kinetic_langevin" => ModelInfo {
            dim: 2,
            hamiltonian: true,
            square_diffusion: false,
        },
        _ => ModelInfo {
            dim: 3,
            hamiltonian: true,
            square_diffusion: false,
        },
    })
}

/// A registered model, built with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltModel {
    MeanFieldOu(MeanFieldOu),
    Nonlinear(TanhInteraction),
    Kinetic(KineticLangevin),
    Chain(ControlledChain),
}

impl BuiltModel {
    pub fn coefficients(&self) -> &dyn CoefficientModel {
        match self {
            Self::MeanFieldOu(m) => m,
            Self::Nonlinear(m) => m,
            Self::Kinetic(m) => m,
            Self::Chain(m) => m,
        }
    }

    pub fn hamiltonian(&self) -> Option<&dyn HamiltonianModel> {
        match self {
            Self::MeanFieldOu(m) => Some(m),
            Self::Nonlinear(_) => None,
            Self::Kinetic(m) => Some(m),
            Self::Chain(m) => Some(m),
        }
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<BuiltModel, RunError> {
    model_info(cfg).map_err(RunError::Config)?;
    let p = |k: &str, default: f64| cfg.params.get(k).copied().unwrap_or(default);
    Ok(match cfg.id.as_str() {
        "mean_field_ou" => {
            let d = MeanFieldOu::default();
            BuiltModel::MeanFieldOu(MeanFieldOu {
                a: p("a", d.a),
                c: p("c", d.c),
                sigma: p("sigma", d.sigma),
            })
        }
        "nonlinear_mv" => {
            let d = TanhInteraction::default();
            BuiltModel::Nonlinear(TanhInteraction {
                kappa: p("kappa", d.kappa),
                sigma: p("sigma", d.sigma),
            })
        }
        "kinetic_langevin" => BuiltModel::Kinetic(KineticLangevin {
            friction: p("friction", 0.0),
        }),
        _ => {
            let d = ControlledChain::default();
            BuiltModel::Chain(ControlledChain {
                beta: p("beta", d.beta),
                kappa: p("kappa", d.kappa),
            })
        }
    })
}

pub fn build_law(spec: Option<&LawSpec>, dim: usize) -> Result<Box<dyn InitialLaw>, RunError> {
    Ok(match spec {
        None => Box::new(GaussianLaw::standard(dim)),
        Some(LawSpec::Gaussian { mean, std }) => Box::new(GaussianLaw::new(mean.clone(), std.clone())?),
        Some(LawSpec::Dirac { point }) => Box::new(DiracLaw(point.clone())),
    })
}

/// Moments of the initial law, with the standard Gaussian as the default.
pub fn law_moments(spec: Option<&LawSpec>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    spec.map(LawSpec::moments).unwrap_or_else(|| (vec![0.0; dim], vec![1.0; dim]))
}

/// `W_2` between two product Gaussians (Dirac masses have zero spread):
/// `sqrt(sum_i (m_i - m'_i)^2 + (s_i - s'_i)^2)`.
pub fn gaussian_w2(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> f64 {
    let means: f64 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum();
    let stds: f64 = a.1.iter().zip(&b.1).map(|(x, y)| (x - y).powi(2)).sum();
    (means + stds).sqrt()
}

pub fn build_phi(spec: &PhiSpec, dim: usize) -> Result<Box<dyn VectorField>, RunError> {
    Ok(match spec {
        PhiSpec::Constant { value } => Box::new(ConstantField(value.clone())),
        PhiSpec::Linear { matrix, offset } => Box::new(AffineField::new(matrix.clone(), offset.clone())?),
        PhiSpec::Named { name } => match name.as_str() {
            "ones" => Box::new(ConstantField(vec![1.0; dim])),
            "identity" => Box::new(FnField::new(dim, |x: &[f64], out: &mut [f64]| out.copy_from_slice(x))),
            "first_axis" => {
                let mut e = vec![0.0; dim];
                e[0] = 1.0;
                Box::new(ConstantField(e))
            }
            "last_axis" => {
                let mut e = vec![0.0; dim];
                e[dim - 1] = 1.0;
                Box::new(ConstantField(e))
            }
            other => return Err(unknown("phi.name", other)),
        },
    })
}

fn unknown(field: &str, name: &str) -> RunError {
    RunError::Config(vec![FieldError::new(field, format!("unknown name '{name}'"))])
}

pub fn named_f_is_smooth(name: &str) -> bool {
    matches!(name, "tanh_first" | "square_norm")
}

pub fn build_f(spec: &FSpec) -> Result<Box<dyn TestFunction>, RunError> {
    Ok(match spec {
        FSpec::Constant { value } => Box::new(Constant(*value)),
        FSpec::Coordinate { index } => Box::new(Coordinate(*index)),
        FSpec::Polynomial { index, coefficients } => Box::new(Polynomial {
            index: *index,
            coefficients: coefficients.clone(),
        }),
        FSpec::Indicator { index, threshold } => Box::new(Indicator {
            index: *index,
            threshold: *threshold,
        }),
        FSpec::Named { name } => match name.as_str() {
            "tanh_first" => Box::new(FnTest::with_gradient(
                |x: &[f64]| x[0].tanh(),
                |x: &[f64], g: &mut [f64]| {
                    g.fill(0.0);
                    g[0] = 1.0 - x[0].tanh().powi(2);
                },
            )),
            "square_norm" => Box::new(FnTest::with_gradient(
                |x: &[f64]| x.iter().map(|v| v * v).sum(),
                |x: &[f64], g: &mut [f64]| {
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi = 2.0 * xi;
                    }
                },
            )),
            "positive_first" => Box::new(Indicator {
                index: 0,
                threshold: 0.0,
            }),
            other => return Err(unknown("f.name", other)),
        },
    })
}

/// Closed-form Lions derivative where one is known: linear `f` and a constant
/// direction on the two linear built-ins.
pub fn closed_form(cfg: &ScenarioConfig) -> Option<f64> {
    let built = build_model(&cfg.model).ok()?;
    let dim = built.coefficients().dim();
    let phi = match &cfg.phi {
        PhiSpec::Constant { value } => value.clone(),
        PhiSpec::Named { name } if name == "ones" => vec![1.0; dim],
        PhiSpec::Named { name } if name == "first_axis" => {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        }
        PhiSpec::Named { name } if name == "last_axis" => {
            let mut e = vec![0.0; dim];
            e[dim - 1] = 1.0;
            e
        }
        _ => return None,
    };
    let t = cfg.grid.horizon;
    match (&built, &cfg.f) {
        (_, FSpec::Constant { .. }) => Some(0.0),
        // The mean solves m' = (a + c) m.
        (BuiltModel::MeanFieldOu(m), FSpec::Coordinate { index: 0 }) => Some(phi[0] * ((m.a + m.c) * t).exp()),
        // x' = v, v' = -gamma v: the position responds with 1 and (1 - e^{-gamma T}) / gamma.
        (BuiltModel::Kinetic(m), FSpec::Coordinate { index: 0 }) => {
            let g = m.friction;
            let reach = if g.abs() < 1e-12 { t } else { (1.0 - (-g * t).exp()) / g };
            Some(phi[0] + phi[1] * reach)
        }
        _ => None,
    }
}

/// Default parameters as they would appear in a config, for documentation output.
pub fn default_params(id: &str) -> BTreeMap<String, f64> {
    let pairs: &[(&str, f64)] = match id {
        "mean_field_ou" => &[("a", -1.0), ("c", 0.5), ("sigma", 1.0)],
        "nonlinear_mv" => &[("kappa", 0.5), ("sigma", 1.0)],
        "kinetic_langevin" => &[("friction", 0.0)],
        "example21_linear" => &[("beta", 0.5), ("kappa", 0.25)],
        _ => &[],
    };
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_model_builds_with_matching_info() {
        for id in MODEL_IDS {
            let cfg = ModelConfig {
                id: id.into(),
                params: default_params(id),
            };
            let info = model_info(&cfg).unwrap();
            let built = build_model(&cfg).unwrap();
            let m = built.coefficients();
            assert_eq!(m.dim(), info.dim, "{id}");
            assert_eq!(m.name(), id);
            assert_eq!(built.hamiltonian().is_some(), info.hamiltonian, "{id}");
            assert_eq!(m.noise_dim() == m.dim(), info.square_diffusion, "{id}");
        }
    }

    #[test]
    fn defaults_match_the_model_defaults() {
        let built = build_model(&ModelConfig {
            id: "nonlinear_mv".into(),
            params: BTreeMap::new(),
        })
        .unwrap();
        assert_eq!(built, BuiltModel::Nonlinear(TanhInteraction::default()));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let cfg = ModelConfig {
            id: "mean_field_ou".into(),
            params: BTreeMap::from([("gamma".into(), 1.0)]),
        };
        let errs = model_info(&cfg).unwrap_err();
        assert_eq!(errs[0].field, "model.params.gamma");
    }

    #[test]
    fn gaussian_w2_of_a_mean_shift_is_the_shift() {
        let a = (vec![0.0], vec![1.0]);
        let b = (vec![0.3], vec![1.0]);
        assert!((gaussian_w2(&a, &b) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn named_functions_have_consistent_gradients() {
        for name in F_NAMES {
            let f = build_f(&FSpec::Named { name: name.into() }).unwrap();
            let x = [0.3, -0.7];
            let mut g = [0.0; 2];
            let has = f.gradient(&x, &mut g);
            assert_eq!(has, named_f_is_smooth(name));
            if has {
                let h = 1e-6;
                let fd = (f.eval(&[x[0] + h, x[1]]) - f.eval(&[x[0] - h, x[1]])) / (2.0 * h);
                assert!((fd - g[0]).abs() < 1e-8, "{name}");
            }
        }
    }
}
