//! Prefix-sum error and mechanism loss.
//!
//! For a strategy `C` with decoder `B = A C^{-1}`:
//!
//! ```text
//! MaxError = max_i ||B_i||_2        MaxLoss = MaxError * sens(C)
//! RmsError = ||B||_F / sqrt(n)      RmsLoss = RmsError * sens(C)
//! ```

use nalgebra::linalg::Cholesky;
use serde::{Deserialize, Serialize};

use crate::blt::{BltParams, InverseMethod, ToeplitzCoefs};
use crate::participation::{self, ParticipationSchema};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Max,
    Rms,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "maxloss" => Ok(Self::Max),
            "rms" | "rmsloss" => Ok(Self::Rms),
            other => Err(Error::Parse(format!("unknown objective '{other}'"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Rms => "rms",
        })
    }
}

/// How a sensitivity value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensMethod {
    /// Shifted column sum, exact for non-negative non-increasing Toeplitz.
    Toeplitz,
    /// `||C u(pi*)||`, a lower bound in general.
    LowerBound,
    /// Maximum over every maximal pattern.
    BruteForce,
}

impl std::fmt::Display for SensMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Toeplitz => "toeplitz",
            Self::LowerBound => "lower_bound",
            Self::BruteForce => "brute_force",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismLoss {
    pub sens: f64,
    pub max_error: f64,
    pub rms_error: f64,
    pub max_loss: f64,
    pub rms_loss: f64,
    pub schema: ParticipationSchema,
    pub sens_method: SensMethod,
}

impl MechanismLoss {
    pub fn new(
        sens: f64,
        (max_error, rms_error): (f64, f64),
        schema: ParticipationSchema,
        sens_method: SensMethod,
    ) -> Self {
        Self {
            sens,
            max_error,
            rms_error,
            max_loss: max_error * sens,
            rms_loss: rms_error * sens,
            schema,
            sens_method,
        }
    }

    pub fn loss(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Max => self.max_loss,
            Objective::Rms => self.rms_loss,
        }
    }

    /// Losses at noise multiplier `alpha` instead of 1.
    pub fn at_noise_multiplier(&self, alpha: f64) -> Self {
        Self {
            max_loss: self.max_loss * alpha,
            rms_loss: self.rms_loss * alpha,
            ..self.clone()
        }
    }
}

/// Accumulates squared prefix sums of `c_inv` into `(max, rms)` error.
pub fn toeplitz_error(c_inv: &[f64]) -> (f64, f64) {
    let n = c_inv.len();
    let mut prefix = 0.0;
    let mut total = 0.0;
    let mut weighted = 0.0;
    for (i, &c) in c_inv.iter().enumerate() {
        prefix += c;
        let sq = prefix * prefix;
        total += sq;
        weighted += (n - i) as f64 * sq;
    }
    (total.sqrt(), (weighted / n as f64).sqrt())
}

/// Maximum row norm and `||B||_F / sqrt(n)` where `n` is the row count.
pub fn dense_error(b: &Matrix) -> (f64, f64) {
    let n = b.nrows();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut row_sq = vec![0.0; n];
    for col in b.column_iter() {
        for (acc, v) in row_sq.iter_mut().zip(col.iter()) {
            *acc += v * v;
        }
    }
    let max = row_sq.iter().copied().fold(0.0, f64::max).sqrt();
    let rms = (row_sq.iter().sum::<f64>() / n as f64).sqrt();
    (max, rms)
}

/// Loss of `LtToep(c)`; inverse coefficients by the O(n^2) recurrence.
pub fn toeplitz_mechanism_loss(
    c: &ToeplitzCoefs,
    schema: &ParticipationSchema,
) -> Result<MechanismLoss> {
    let n = schema.rounds();
    let c = ToeplitzCoefs::new(
        c.as_slice()
            .get(..n)
            .ok_or(Error::DimensionMismatch {
                expected: n,
                got: c.len(),
            })?
            .to_vec(),
    )?;
    let sens = participation::toeplitz_sensitivity(&c, schema)?;
    let c_inv = crate::blt::toeplitz_inverse_coefs(&c)?;
    Ok(MechanismLoss::new(
        sens,
        toeplitz_error(c_inv.as_slice()),
        *schema,
        SensMethod::Toeplitz,
    ))
}

/// Loss of a BLT, using its inverse pair for the decoder coefficients; O(n d + k n).
pub fn blt_mechanism_loss(
    params: &BltParams,
    schema: &ParticipationSchema,
) -> Result<MechanismLoss> {
    let (loss, _) = blt_mechanism_loss_with_method(params, schema)?;
    Ok(loss)
}

pub fn blt_mechanism_loss_with_method(
    params: &BltParams,
    schema: &ParticipationSchema,
) -> Result<(MechanismLoss, InverseMethod)> {
    let n = schema.rounds();
    let c = params.coefs(n)?;
    let sens = participation::toeplitz_sensitivity(&c, schema)?;
    let (c_inv, method) = params.inverse_coefs(n)?;
    Ok((
        MechanismLoss::new(
            sens,
            toeplitz_error(c_inv.as_slice()),
            *schema,
            SensMethod::Toeplitz,
        ),
        method,
    ))
}

/// Loss of a dense square lower-triangular strategy. Sensitivity is the
/// worst-case-pattern lower bound and is flagged as such.
pub fn dense_mechanism_loss(c: &Matrix, schema: &ParticipationSchema) -> Result<MechanismLoss> {
    let n = schema.rounds();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: c.nrows(),
        });
    }
    let b = prefix_decoder(c)?;
    let sens = participation::matrix_sensitivity_lower_bound(c, schema)?;
    Ok(MechanismLoss::new(
        sens,
        dense_error(&b),
        *schema,
        SensMethod::LowerBound,
    ))
}

/// `A C^{-1}` for an invertible lower-triangular `C`.
pub fn prefix_decoder(c: &Matrix) -> Result<Matrix> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::InvalidMatrix("strategy must be square".into()));
    }
    if (0..n).any(|i| c[(i, i)] == 0.0) {
        return Err(Error::RankDeficient("zero on the strategy diagonal".into()));
    }
    // B C = A  <=>  C^T B^T = A^T, with C^T upper triangular
    let at = crate::prefix_sum_matrix(n).transpose();
    let bt = c
        .transpose()
        .solve_upper_triangular(&at)
        .ok_or_else(|| Error::RankDeficient("strategy is singular".into()))?;
    Ok(bt.transpose())
}

/// `A C^+` for a strategy with full column rank, through the normal
/// equations. Small-scale helper; trees use a structured path.
pub fn pseudo_inverse_decoder(c: &Matrix) -> Result<Matrix> {
    let n = c.ncols();
    let gram = c.transpose() * c;
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::RankDeficient("strategy lacks full column rank".into()))?;
    let pinv = chol.solve(&c.transpose());
    Ok(crate::prefix_sum_matrix(n) * pinv)
}
