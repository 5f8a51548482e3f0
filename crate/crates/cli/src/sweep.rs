//! Convergence sweeps over the step size, the particle count or the
//! finite-difference shift, with a fitted log-log slope.

use std::str::FromStr;

use mvbismut::stats::log_log_slope;

use crate::config::{EstimatorKind, ScenarioConfig};
use crate::error::RunError;
use crate::output::ResultRow;
use crate::registry;
use crate::runner::run_estimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Error of the first estimator against the reference value, per step size.
    Dt,
    /// Standard error of the first estimator, per particle count.
    Particles,
    /// Gap between the finite difference and the pathwise estimator, per shift.
    Epsilon,
}

impl FromStr for SweepAxis {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        match s {
            "dt" => Ok(Self::Dt),
            "n" | "N" | "particles" => Ok(Self::Particles),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            other => Err(RunError::Unsupported(format!("unknown sweep axis '{other}' (dt, n, epsilon)"))),
        }
    }
}

/// Where the dt-sweep error is measured from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    ClosedForm(f64),
    /// Same estimator and seed on a grid four times finer than the finest value.
    RefinedGrid(f64),
    /// Per-point references (the pathwise value for epsilon sweeps).
    Pathwise(f64),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub rows: Vec<ResultRow>,
    pub reference: Reference,
    pub slope: f64,
}

fn check_values(axis: SweepAxis, values: &[f64]) -> Result<(), RunError> {
    if values.len() < 3 {
        return Err(RunError::Unsupported("a sweep needs at least 3 values".into()));
    }
    let up = values.windows(2).all(|w| w[1] > w[0]);
    let down = values.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(RunError::Unsupported("sweep values must be strictly monotone".into()));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(RunError::Unsupported("sweep values must be positive".into()));
    }
    if axis == SweepAxis::Particles && values.iter().any(|v| v.fract() != 0.0 || *v < 2.0) {
        return Err(RunError::Unsupported("particle counts must be integers >= 2".into()));
    }
    Ok(())
}

fn with_dt(cfg: &ScenarioConfig, dt: f64) -> Result<ScenarioConfig, RunError> {
    let n = (cfg.grid.horizon / dt).round();
    if n < 1.0 || ((cfg.grid.horizon / n) - dt).abs() > 1e-9 * dt {
        return Err(RunError::Unsupported(format!(
            "dt = {dt} does not divide the horizon {}",
            cfg.grid.horizon
        )));
    }
    let mut c = cfg.clone();
    c.grid.n_steps = n as usize;
    Ok(c)
}

/// Runs the sweep. The first listed estimator is the one measured on the
/// `dt` and `N` axes; the `epsilon` axis always compares the finite
/// difference with the pathwise estimator on the base grid.
pub fn convergence_sweep(cfg: &ScenarioConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepTable, RunError> {
    cfg.validate()?;
    check_values(axis, values)?;
    let built = registry::build_model(&cfg.model)?;
    let primary = cfg.estimators[0];
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let reference = match axis {
        SweepAxis::Dt => {
            let reference = match registry::closed_form(cfg) {
                Some(v) => Reference::ClosedForm(v),
                None => {
                    let finest = values.iter().copied().fold(f64::INFINITY, f64::min);
                    let fine = with_dt(cfg, finest / 4.0)?;
                    let (r, _) = run_estimator(&fine, &built, primary)?;
                    Reference::RefinedGrid(r.value)
                }
            };
            let target = match reference {
                Reference::ClosedForm(v) | Reference::RefinedGrid(v) => v,
                _ => unreachable!(),
            };
            for &dt in values {
                let c = with_dt(cfg, dt)?;
                let (r, wall) = run_estimator(&c, &built, primary)?;
                errors.push((r.value - target).abs());
                rows.push(ResultRow::from_estimate(&cfg.id, &r, wall));
            }
            reference
        }
        SweepAxis::Particles => {
            for &n in values {
                let mut c = cfg.clone();
                c.particles = n as usize;
                let (r, wall) = run_estimator(&c, &built, primary)?;
                errors.push(r.std_error);
                rows.push(ResultRow::from_estimate(&cfg.id, &r, wall));
            }
            Reference::None
        }
        SweepAxis::Epsilon => {
            if !cfg.f.differentiable() {
                return Err(RunError::Unsupported(
                    "epsilon sweep compares against the pathwise estimator and needs a differentiable f".into(),
                ));
            }
            let (p, wall) = run_estimator(cfg, &built, EstimatorKind::Pathwise)?;
            rows.push(ResultRow::from_estimate(&cfg.id, &p, wall));
            for &eps in values {
                let mut c = cfg.clone();
                c.epsilon = eps;
                let (r, wall) = run_estimator(&c, &built, EstimatorKind::FiniteDifference)?;
                errors.push((r.value - p.value).abs());
                rows.push(ResultRow::from_estimate(&cfg.id, &r, wall));
            }
            Reference::Pathwise(p.value)
        }
    };
    if errors.iter().any(|e| e.is_nan() || *e <= 0.0) {
        return Err(RunError::Unsupported(format!(
            "sweep produced a zero error {errors:?}; no slope can be fitted"
        )));
    }
    let slope = log_log_slope(values, &errors);
    Ok(SweepTable {
        axis,
        values: values.to_vec(),
        errors,
        rows,
        reference,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PhiSpec;

    #[test]
    fn rejects_short_or_unordered_values() {
        let cfg = ScenarioConfig::mean_field_ou();
        assert!(convergence_sweep(&cfg, SweepAxis::Dt, &[0.1, 0.05]).is_err());
        assert!(convergence_sweep(&cfg, SweepAxis::Dt, &[0.1, 0.05, 0.1]).is_err());
        assert!(convergence_sweep(&cfg, SweepAxis::Particles, &[10.0, 20.5, 40.0]).is_err());
        assert!(convergence_sweep(&cfg, SweepAxis::Dt, &[0.3, 0.2, 0.1]).is_err());
    }

    #[test]
    fn pathwise_dt_bias_is_first_order() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.particles = 1_000;
        cfg.estimators = vec![EstimatorKind::Pathwise];
        let table = convergence_sweep(&cfg, SweepAxis::Dt, &[0.04, 0.02, 0.01]).unwrap();
        assert!((table.slope - 1.0).abs() < 0.3, "{table:?}");
        assert!(matches!(table.reference, Reference::ClosedForm(_)));
    }

    #[test]
    fn refined_grid_reference_is_used_without_a_closed_form() {
        let mut cfg = ScenarioConfig::mean_field_ou();
        cfg.particles = 200;
        cfg.phi = PhiSpec::Named { name: "identity".into() };
        cfg.estimators = vec![EstimatorKind::Pathwise];
        let table = convergence_sweep(&cfg, SweepAxis::Dt, &[0.1, 0.05, 0.025]).unwrap();
        assert!(matches!(table.reference, Reference::RefinedGrid(_)));
        assert_eq!(table.rows.len(), 3);
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("n".parse::<SweepAxis>().unwrap(), SweepAxis::Particles);
        assert!("time".parse::<SweepAxis>().is_err());
    }
}
