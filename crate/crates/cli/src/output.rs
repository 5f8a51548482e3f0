//! Result rows and their CSV form.

use std::io::{Read, Write};

use mvbismut::estimate::EstimatorResult;
use serde::{Deserialize, Serialize};

use crate::error::RunError;

pub const COLUMNS: [&str; 9] = [
    "scenario_id",
    "method",
    "value",
    "std_error",
    "n_samples",
    "dt",
    "n_particles",
    "seed",
    "wall_time_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub method: String,
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub dt: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub wall_time_seconds: f64,
}

impl ResultRow {
    pub fn from_estimate(scenario_id: &str, r: &EstimatorResult, wall: f64) -> Self {
        Self {
            scenario_id: scenario_id.to_string(),
            method: r.method.tag().to_string(),
            value: r.value,
            std_error: r.std_error,
            n_samples: r.n_samples,
            dt: r.meta.horizon / r.meta.n_steps as f64,
            n_particles: r.meta.n_particles,
            seed: r.meta.seed,
            wall_time_seconds: wall,
        }
    }

    /// Same row with everything but the timing; used for determinism checks.
    pub fn fingerprint(&self) -> (String, String, u64, u64, usize) {
        (
            self.scenario_id.clone(),
            self.method.clone(),
            self.value.to_bits(),
            self.std_error.to_bits(),
            self.n_samples,
        )
    }

    fn record(&self) -> [String; 9] {
        [
            self.scenario_id.clone(),
            self.method.clone(),
            format!("{:.16e}", self.value),
            format!("{:.16e}", self.std_error),
            self.n_samples.to_string(),
            format!("{:.16e}", self.dt),
            self.n_particles.to_string(),
            self.seed.to_string(),
            format!("{:.6}", self.wall_time_seconds),
        ]
    }
}

/// Writes a header and one line per row; floats carry 17 significant digits.
pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), RunError> {
    if let Some(bad) = rows.iter().find(|r| !(r.value.is_finite() && r.std_error.is_finite())) {
        return Err(RunError::Unsupported(format!(
            "non-finite result in {} / {}",
            bad.scenario_id, bad.method
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| RunError::Io("csv output".into(), e))?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>, RunError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != COLUMNS {
        return Err(RunError::Unsupported(format!("unexpected columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(RunError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64) -> ResultRow {
        ResultRow {
            scenario_id: "s".into(),
            method: "bismut".into(),
            value,
            std_error: 1.0 / 3.0,
            n_samples: 10,
            dt: 0.005,
            n_particles: 10,
            seed: 7,
            wall_time_seconds: 0.25,
        }
    }

    #[test]
    fn values_survive_the_csv_round_trip_bit_for_bit() {
        let rows = vec![row(std::f64::consts::PI), row(-1e-300), row(0.1 + 0.2)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario_id,method,value,std_error,n_samples,dt,n_particles,seed,wall_time_seconds\n"));
        assert!(text.contains("3.1415926535897931e0"), "{text}");
    }

    #[test]
    fn non_finite_rows_are_refused() {
        assert!(write_rows(Vec::new(), &[row(f64::NAN)]).is_err());
    }
}
