//! Parameter documents and strategy-matrix files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blt::BltParams;
use crate::loss::Objective;
use crate::optimizer::OptimizationResult;
use crate::participation::ParticipationSchema;
use crate::{Error, Matrix, Result};

/// Magic bytes opening a binary strategy-matrix file.
pub const MATRIX_MAGIC: &[u8; 8] = b"CNMATRX1";

/// JSON form of a BLT together with the schema it was optimized for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub d: usize,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub opt_n: usize,
    pub opt_min_sep: usize,
    pub opt_max_part: usize,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_loss: Option<f64>,
}

impl ParamsDocument {
    pub fn new(params: &BltParams, schema: &ParticipationSchema, objective: Objective) -> Self {
        Self {
            d: params.buffers(),
            theta: params.theta().to_vec(),
            omega: params.omega().to_vec(),
            opt_n: schema.rounds(),
            opt_min_sep: schema.min_sep(),
            opt_max_part: schema.max_part(),
            objective,
            theta_hat: None,
            loss: None,
            max_loss: None,
            rms_loss: None,
        }
    }

    pub fn from_result(result: &OptimizationResult, objective: Objective) -> Self {
        Self {
            theta_hat: Some(result.theta_hat.clone()),
            loss: Some(result.loss),
            max_loss: Some(result.mechanism.max_loss),
            rms_loss: Some(result.mechanism.rms_loss),
            ..Self::new(&result.params, &result.mechanism.schema, objective)
        }
    }

    pub fn params(&self) -> Result<BltParams> {
        if self.theta.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: self.theta.len(),
            });
        }
        BltParams::new(self.theta.clone(), self.omega.clone())
    }

    pub fn schema(&self) -> Result<ParticipationSchema> {
        ParticipationSchema::new(self.opt_n, self.opt_min_sep, self.opt_max_part)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Writes a square matrix in the binary container: magic, `n` as
/// little-endian `u64`, then `n * n` little-endian `f64` in row-major order.
pub fn save_strategy_matrix(path: impl AsRef<Path>, c: &Matrix) -> Result<()> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::InvalidMatrix(
            "strategy matrix must be square".into(),
        ));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MATRIX_MAGIC)?;
    f.write_all(&(n as u64).to_le_bytes())?;
    for i in 0..n {
        for j in 0..n {
            f.write_all(&c[(i, j)].to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a strategy matrix from the binary container or from CSV (one row
/// per line), then checks it is square, finite, and lower triangular.
pub fn load_strategy_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let c = if bytes.starts_with(MATRIX_MAGIC) {
        parse_binary(&bytes)?
    } else {
        parse_csv(&bytes)?
    };
    validate_strategy(&c)?;
    Ok(c)
}

fn parse_binary(bytes: &[u8]) -> Result<Matrix> {
    let header = MATRIX_MAGIC.len() + 8;
    if bytes.len() < header {
        return Err(Error::InvalidMatrix("truncated header".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = n
        .checked_mul(n)
        .and_then(|m| m.checked_mul(8))
        .and_then(|m| m.checked_add(header))
        .ok_or_else(|| Error::InvalidMatrix("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::InvalidMatrix(format!(
            "expected {expected} bytes for n={n}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Matrix::from_row_slice(n, n, &values))
}

fn parse_csv(bytes: &[u8]) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("'{s}': {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidMatrix("empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidMatrix(
            "strategy matrix must be square".into(),
        ));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn validate_strategy(c: &Matrix) -> Result<()> {
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("strategy matrix".into()));
    }
    let n = c.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if c[(i, j)] != 0.0 {
                return Err(Error::InvalidMatrix(format!(
                    "entry ({i}, {j}) above the diagonal is non-zero"
                )));
            }
        }
    }
    Ok(())
}
