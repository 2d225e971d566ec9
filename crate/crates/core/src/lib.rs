//! Correlated-noise mechanisms for differentially private FTRL training.
//!
//! The crate is organised around buffered linear Toeplitz (BLT) strategy
//! matrices `C = LtToep(c)` whose coefficients are a sum of `d` geometric
//! decays. Such a matrix and its inverse can both be applied to a stream
//! with `d * m` floats of state, which is what makes them practical noise
//! generators for federated training.
//!
//! * [`blt`]: parameters, coefficients, inverse pairing and streaming
//!   multiplication.
//! * [`participation`]: min-separation participation schemas and
//!   sensitivity.
//! * [`loss`]: MaxError/RmsError and MaxLoss/RmsLoss.
//! * [`tree`]: the binary-tree baseline with full (pseudoinverse) decoding.
//! * [`optimizer`]: BLT parameter optimization with L-BFGS.
//! * [`accountant`]: zCDP and (epsilon, delta) conversion.
//! * [`sim`]: a small DP-FedAvg simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod blt;
pub mod error;
pub mod io;
pub mod lbfgs;
pub mod loss;
pub mod optimizer;
pub mod participation;
pub mod presets;
pub mod sim;
pub mod tree;

pub use error::{Error, Result};

pub use blt::{BltParams, NoiseGenerator, RoundLimit, ToeplitzCoefs};
pub use loss::{MechanismLoss, Objective, SensMethod};
pub use participation::{ParticipationPattern, ParticipationSchema};

/// Dense matrices are column-major `nalgebra` matrices.
pub type Matrix = nalgebra::DMatrix<f64>;

/// The `n x n` lower-triangular all-ones (prefix-sum) workload.
pub fn prefix_sum_matrix(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 })
}
