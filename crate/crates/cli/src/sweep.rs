use std::io::Write;
use std::path::PathBuf;

use anyhow::{ensure, Result};
use corrnoise::ParticipationSchema;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mechanism::{Mechanism, MechanismSource};

pub const HEADER: [&str; 11] = [
    "mechanism",
    "n",
    "b",
    "k",
    "sens",
    "max_error",
    "rms_error",
    "max_loss",
    "rms_loss",
    "sens_method",
    "status",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mechanisms: Vec<MechanismSource>,
    pub rounds: Vec<usize>,
    pub min_seps: Vec<usize>,
    /// Participation counts; empty means the worst case `ceil(n / b)`.
    #[serde(default)]
    pub max_parts: Vec<usize>,
    /// Losses are scaled by this noise multiplier.
    #[serde(default = "one")]
    pub noise_multiplier: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.mechanisms.is_empty(),
            "sweep needs at least one mechanism"
        );
        ensure!(
            !self.rounds.is_empty() && !self.min_seps.is_empty(),
            "sweep grid needs at least one n and one b"
        );
        ensure!(
            self.noise_multiplier.is_finite() && self.noise_multiplier > 0.0,
            "noise multiplier must be positive"
        );
        Ok(())
    }

    fn grid(&self) -> Vec<(usize, usize, Option<usize>)> {
        let ks: Vec<Option<usize>> = if self.max_parts.is_empty() {
            vec![None]
        } else {
            self.max_parts.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &n in &self.rounds {
            for &b in &self.min_seps {
                for &k in &ks {
                    out.push((n, b, k));
                }
            }
        }
        out
    }
}

pub struct Row {
    fields: Vec<String>,
}

impl Row {
    fn status(label: &str, n: usize, b: usize, k: Option<usize>, status: String) -> Self {
        let k = k.map_or(String::new(), |k| k.to_string());
        let mut fields = vec![label.to_string(), n.to_string(), b.to_string(), k];
        fields.extend(std::iter::repeat_n(String::new(), 6));
        fields.push(status);
        Self { fields }
    }
}

fn evaluate_point(
    label: &str,
    mechanism: &Result<Mechanism, String>,
    (n, b, k): (usize, usize, Option<usize>),
    alpha: f64,
) -> Row {
    let mechanism = match mechanism {
        Ok(m) => m,
        Err(e) => return Row::status(label, n, b, k, format!("error: {e}")),
    };
    let schema = match k {
        Some(k) => ParticipationSchema::new(n, b, k),
        None => ParticipationSchema::worst_case(n, b),
    };
    let schema = match schema {
        Ok(s) => s,
        Err(e) => return Row::status(label, n, b, k, format!("skipped: {e}")),
    };
    match mechanism.evaluate(&schema) {
        Ok(m) => {
            let m = m.at_noise_multiplier(alpha);
            Row {
                fields: vec![
                    label.to_string(),
                    n.to_string(),
                    b.to_string(),
                    schema.max_part().to_string(),
                    m.sens.to_string(),
                    m.max_error.to_string(),
                    m.rms_error.to_string(),
                    m.max_loss.to_string(),
                    m.rms_loss.to_string(),
                    m.sens_method.to_string(),
                    "ok".into(),
                ],
            }
        }
        Err(e) => Row::status(
            label,
            n,
            b,
            Some(schema.max_part()),
            format!("skipped: {e}"),
        ),
    }
}

/// Evaluates every mechanism at every grid point, in parallel, returning
/// rows in mechanism-major grid order.
pub fn run(spec: &SweepSpec) -> Result<Vec<Row>> {
    spec.validate()?;
    let grid = spec.grid();
    let loaded: Vec<(String, Result<Mechanism, String>)> = spec
        .mechanisms
        .iter()
        .map(|s| (s.label(), s.load().map_err(|e| format!("{e:#}"))))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..loaded.len())
        .flat_map(|m| (0..grid.len()).map(move |g| (m, g)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(m, g)| {
            let (label, mechanism) = &loaded[m];
            evaluate_point(label, mechanism, grid[g], spec.noise_multiplier)
        })
        .collect())
}

pub fn write_csv(rows: &[Row], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(&row.fields)?;
    }
    w.flush()?;
    Ok(())
}
