//! Gaussian-mechanism zCDP and its conversion to `(epsilon, delta)`-DP.
//!
//! The conversion is an upper bound; accounting through privacy loss
//! distributions gives smaller epsilon for the same mechanism.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-10;

/// Label attached to every epsilon produced here.
pub const CONVERSION_METHOD: &str = "upper bound (zCDP conversion)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub clip_norm: f64,
    /// Standard deviation of the added noise, `sigma * clip_norm`.
    pub noise_std: f64,
    /// `noise_std / (clip_norm * sens)`.
    pub noise_multiplier: f64,
    pub sens: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub method: String,
}

impl PrivacyParams {
    /// Guarantee of noise with standard deviation `noise_std` added to a
    /// strategy with unit-clip sensitivity `sens`.
    pub fn from_noise(sens: f64, clip_norm: f64, noise_std: f64, delta: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::InvalidParams("clip norm must be positive".into()));
        }
        let sigma = noise_std / clip_norm;
        let rho = zcdp_of(sens, sigma);
        Ok(Self {
            clip_norm,
            noise_std,
            noise_multiplier: if sens > 0.0 {
                sigma / sens
            } else {
                f64::INFINITY
            },
            sens,
            rho,
            epsilon: eps_of_zcdp(rho, delta)?,
            delta,
            method: CONVERSION_METHOD.into(),
        })
    }
}

/// `rho = sens^2 / (2 sigma^2)`; infinite when `sigma = 0`.
pub fn zcdp_of(sens: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        if sens == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        sens * sens / (2.0 * sigma * sigma)
    }
}

/// `rho` for noise multiplier `alpha` at unit sensitivity.
pub fn zcdp_of_noise_multiplier(alpha: f64) -> f64 {
    zcdp_of(1.0, alpha)
}

/// The closed form `rho + 2 sqrt(rho ln(1/delta))`.
pub fn eps_closed_form(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

/// Smallest epsilon over Renyi orders `a > 1` of
/// `rho a + (ln(1/delta) + (a-1) ln(1 - 1/a) - ln a) / (a - 1)`, never
/// larger than the closed form.
pub fn eps_of_zcdp(rho: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParams(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::InvalidParams(format!(
            "rho = {rho} must be non-negative"
        )));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    if rho.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let log_inv_delta = (1.0 / delta).ln();
    let bound =
        |a: f64| rho * a + (log_inv_delta + (a - 1.0) * (1.0 - 1.0 / a).ln() - a.ln()) / (a - 1.0);
    // minimize over log(a - 1) by golden section on a wide bracket
    let f = |u: f64| bound(1.0 + u.exp());
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let refined = f1.min(f2);
    let closed = eps_closed_form(rho, delta);
    Ok(if refined.is_finite() {
        refined.min(closed)
    } else {
        closed
    })
}
