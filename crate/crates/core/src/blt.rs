//! Buffered linear Toeplitz (BLT) strategy matrices.
//!
//! A BLT with `d` buffers is the lower-triangular Toeplitz matrix whose first
//! column is
//!
//! ```text
//! c_0 = 1,    c_i = sum_j omega_j * theta_j^(i-1)   (i >= 1)
//! ```
//!
//! The inverse of a `d`-buffer BLT is again a `d`-buffer BLT, and both the
//! matrix and its inverse can be applied to a stream of rows while keeping
//! only a `d x m` buffer matrix as state.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Minimum absolute separation between two decay parameters.
pub const MIN_DECAY_GAP: f64 = 1e-12;

/// Roundtrip residual above which pairing-based inverse coefficients are
/// abandoned in favour of the brute-force recurrence.
const PAIRING_RESIDUAL_TOL: f64 = 1e-9;

/// Number of leading coefficients used to check an inverse pair.
const ROUNDTRIP_CHECK_LEN: usize = 64;

/// Buffer decays `theta` and output scales `omega` of a BLT matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BltParams {
    theta: Vec<f64>,
    omega: Vec<f64>,
}

impl BltParams {
    /// Builds validated parameters: `0 < theta < 1` strictly descending,
    /// `omega > 0`, and `sum(omega) <= 1` so the coefficients are
    /// non-negative and non-increasing.
    pub fn new(theta: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        let params = Self::relaxed(theta, omega)?;
        params.validate()?;
        Ok(params)
    }

    /// Sorts the buffers into canonical (descending `theta`) order, then
    /// validates.
    pub fn canonical(theta: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        let mut params = Self::relaxed(theta, omega)?;
        params.sort_descending();
        params.validate()?;
        Ok(params)
    }

    /// Only checks shape and finiteness. Used for inverse parameters (whose
    /// output scales are negative) and for special cases such as the
    /// identity (`omega = 0`) or the prefix-sum matrix (`theta = omega = 1`).
    pub fn relaxed(theta: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidParams(
                "at least one buffer is required".into(),
            ));
        }
        if theta.len() != omega.len() {
            return Err(Error::InvalidParams(format!(
                "theta has {} entries but omega has {}",
                theta.len(),
                omega.len()
            )));
        }
        if theta.iter().chain(&omega).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("BLT parameters".into()));
        }
        Ok(Self { theta, omega })
    }

    /// The identity strategy (independent noise): one buffer with zero scale.
    pub fn identity() -> Self {
        Self {
            theta: vec![0.0],
            omega: vec![0.0],
        }
    }

    pub fn buffers(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &t) in self.theta.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidParams(format!(
                    "theta[{i}] = {t} is outside (0, 1)"
                )));
            }
        }
        for w in self.theta.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::InvalidParams(
                    "theta must be strictly descending".into(),
                ));
            }
            if w[0] - w[1] < MIN_DECAY_GAP {
                return Err(Error::Degenerate(format!(
                    "theta entries {} and {} are closer than {MIN_DECAY_GAP}",
                    w[0], w[1]
                )));
            }
        }
        for (i, &w) in self.omega.iter().enumerate() {
            if !(w > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "omega[{i}] = {w} must be positive"
                )));
            }
        }
        let c1: f64 = self.omega.iter().sum();
        if c1 > 1.0 {
            return Err(Error::InvalidParams(format!(
                "sum(omega) = {c1} exceeds c_0 = 1; coefficients would increase"
            )));
        }
        Ok(())
    }

    fn sort_descending(&mut self) {
        let mut pairs: Vec<(f64, f64)> = self
            .theta
            .iter()
            .copied()
            .zip(self.omega.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        self.theta = pairs.iter().map(|p| p.0).collect();
        self.omega = pairs.iter().map(|p| p.1).collect();
    }

    /// First `n` Toeplitz coefficients.
    pub fn coefs(&self, n: usize) -> Result<ToeplitzCoefs> {
        blt_coefs(self, n)
    }

    /// Parameters of the inverse matrix.
    pub fn inverse(&self) -> Result<InverseBlt> {
        inverse_blt_params(self)
    }

    /// First `n` coefficients of the inverse matrix, via the inverse pair
    /// when it is well conditioned and via the O(n^2) recurrence otherwise.
    pub fn inverse_coefs(&self, n: usize) -> Result<(ToeplitzCoefs, InverseMethod)> {
        if n == 0 {
            return Err(Error::InvalidParams("n must be at least 1".into()));
        }
        match self.inverse() {
            Ok(inv) if inv.residual <= PAIRING_RESIDUAL_TOL => {
                Ok((inv.params.coefs(n)?, InverseMethod::Pairing))
            }
            Ok(inv) => {
                log::warn!(
                    "inverse pair residual {:.3e} too large; using brute-force inverse",
                    inv.residual
                );
                Ok((
                    toeplitz_inverse_coefs(&self.coefs(n)?)?,
                    InverseMethod::BruteForce,
                ))
            }
            Err(e) => {
                log::warn!("inverse pair unavailable ({e}); using brute-force inverse");
                Ok((
                    toeplitz_inverse_coefs(&self.coefs(n)?)?,
                    InverseMethod::BruteForce,
                ))
            }
        }
    }
}

/// How inverse coefficients were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMethod {
    Pairing,
    BruteForce,
}

/// The first column `(c_0, ..., c_{n-1})` of a lower-triangular Toeplitz
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzCoefs(Vec<f64>);

impl ToeplitzCoefs {
    pub fn new(coefs: Vec<f64>) -> Result<Self> {
        if coefs.is_empty() {
            return Err(Error::InvalidParams(
                "Toeplitz coefficients cannot be empty".into(),
            ));
        }
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("Toeplitz coefficients".into()));
        }
        Ok(Self(coefs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Non-negative and non-increasing, up to a few ulps of rounding.
    pub fn is_nonneg_nonincreasing(&self) -> bool {
        let c = &self.0;
        c.iter().all(|&v| v >= 0.0)
            && c.windows(2)
                .all(|w| w[1] <= w[0] + 4.0 * f64::EPSILON * w[0].abs())
    }

    /// Materializes `LtToep(c)`.
    pub fn to_dense(&self) -> Matrix {
        let n = self.len();
        Matrix::from_fn(n, n, |i, j| if j <= i { self.0[i - j] } else { 0.0 })
    }

    /// Product of the two lower-triangular Toeplitz matrices, as
    /// coefficients truncated to the shorter length.
    pub fn convolve(&self, other: &ToeplitzCoefs) -> Vec<f64> {
        let n = self.len().min(other.len());
        (0..n)
            .map(|i| (0..=i).map(|j| self.0[j] * other.0[i - j]).sum())
            .collect()
    }
}

impl AsRef<[f64]> for ToeplitzCoefs {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Toeplitz coefficients of `BLT(theta, omega)`; O(n d).
pub fn blt_coefs(params: &BltParams, n: usize) -> Result<ToeplitzCoefs> {
    if n == 0 {
        return Err(Error::InvalidParams("n must be at least 1".into()));
    }
    let mut coefs = vec![0.0; n];
    coefs[0] = 1.0;
    let mut powers = params.omega.clone();
    for c in coefs.iter_mut().skip(1) {
        *c = powers.iter().sum();
        for (p, &t) in powers.iter_mut().zip(&params.theta) {
            *p *= t;
        }
    }
    Ok(ToeplitzCoefs(coefs))
}

/// Inverse coefficients by forward substitution; O(n^2).
pub fn toeplitz_inverse_coefs(c: &ToeplitzCoefs) -> Result<ToeplitzCoefs> {
    let c = c.as_slice();
    let c0 = c[0];
    if c0 == 0.0 {
        return Err(Error::InvalidParams("c_0 must be non-zero".into()));
    }
    let n = c.len();
    let mut inv = vec![0.0; n];
    inv[0] = 1.0 / c0;
    for i in 1..n {
        let acc: f64 = c[1..=i]
            .iter()
            .zip(inv[..i].iter().rev())
            .map(|(a, b)| a * b)
            .sum();
        inv[i] = -acc / c0;
    }
    Ok(ToeplitzCoefs(inv))
}

/// Ascending coefficients of `prod_i (1 - r_i x)`.
fn reciprocal_root_poly(roots: &[f64]) -> Vec<f64> {
    let mut poly = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; poly.len() + 1];
        for (k, &a) in poly.iter().enumerate() {
            next[k] += a;
            next[k + 1] -= r * a;
        }
        poly = next;
    }
    poly
}

fn horner(poly: &[f64], x: f64) -> f64 {
    poly.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn check_distinct(values: &[f64], name: &str) -> Result<()> {
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            let gap = (values[i] - values[j]).abs();
            if gap == 0.0 {
                return Err(Error::Degenerate(format!(
                    "{name} has repeated entry {}",
                    values[i]
                )));
            }
            if gap < MIN_DECAY_GAP {
                return Err(Error::IllConditioned(format!(
                    "{name} entries {} and {} differ by {gap:.3e}",
                    values[i], values[j]
                )));
            }
        }
    }
    Ok(())
}

/// Output scales `omega` such that `BLT(theta, omega)^{-1}` is a BLT with
/// buffer decays `theta_hat`.
///
/// Evaluates `omega_i = f(1/theta_i) * (-theta_i w_i / z)` with
/// `f = (p - q) / x`, `p = prod(1 - theta_i x)`, `q = prod(1 - theta_hat_i x)`,
/// `z = prod(-theta_i)` and `w_i = 1 / prod_{j != i}(1/theta_i - 1/theta_j)`.
/// That expression is only determined up to sign, so both orientations are
/// checked against the inverse recurrence on the first `2d` coefficients and
/// the one satisfying it is returned.
pub fn calc_output_scale(theta: &[f64], theta_hat: &[f64]) -> Result<Vec<f64>> {
    let d = theta.len();
    if d == 0 || theta_hat.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: theta_hat.len(),
        });
    }
    if theta.iter().chain(theta_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decay parameters".into()));
    }
    if theta.contains(&0.0) {
        return Err(Error::Degenerate("theta entries must be non-zero".into()));
    }
    check_distinct(theta, "theta")?;
    check_distinct(theta_hat, "theta_hat")?;

    let p = reciprocal_root_poly(theta);
    let q = reciprocal_root_poly(theta_hat);
    let f: Vec<f64> = (1..=d).map(|k| p[k] - q[k]).collect();
    let z: f64 = theta.iter().map(|t| -t).product();

    let direct: Vec<f64> = (0..d)
        .map(|i| {
            let inv_i = 1.0 / theta[i];
            let denom: f64 = (0..d)
                .filter(|&j| j != i)
                .map(|j| inv_i - 1.0 / theta[j])
                .product();
            let w = 1.0 / denom;
            horner(&f, inv_i) * (-theta[i] * w / z)
        })
        .collect();
    let negated: Vec<f64> = direct.iter().map(|w| -w).collect();

    let r_direct = pairing_residual(theta, &direct, &q);
    let r_negated = pairing_residual(theta, &negated, &q);
    let (omega, residual) = if r_negated < r_direct {
        (negated, r_negated)
    } else {
        (direct, r_direct)
    };
    if !residual.is_finite() || residual > 1e-6 {
        return Err(Error::IllConditioned(format!(
            "output scale pairing residual {residual:.3e}"
        )));
    }
    Ok(omega)
}

/// How far the inverse of `BLT(theta, omega)` is from satisfying the linear
/// recurrence whose characteristic polynomial is `x^d q(1/x)`, measured on
/// coefficients `d+1 ..= 2d`.
fn pairing_residual(theta: &[f64], omega: &[f64], q: &[f64]) -> f64 {
    let d = theta.len();
    let len = 2 * d + 1;
    let mut c = vec![0.0; len];
    c[0] = 1.0;
    let mut powers = omega.to_vec();
    for ci in c.iter_mut().skip(1) {
        *ci = powers.iter().sum();
        for (p, &t) in powers.iter_mut().zip(theta) {
            *p *= t;
        }
    }
    let inv = match toeplitz_inverse_coefs(&ToeplitzCoefs(c)) {
        Ok(inv) => inv.0,
        Err(_) => return f64::INFINITY,
    };
    let scale = inv[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in (d + 1)..len {
        let r: f64 = (0..=d).map(|k| q[k] * inv[i - k]).sum();
        worst = worst.max(r.abs());
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

/// Closed product form of the same output scales:
/// `omega_i = prod_k (theta_i - theta_hat_k) / prod_{j != i} (theta_i - theta_j)`.
///
/// Used by the analytic gradient; agrees with [`calc_output_scale`].
pub fn output_scale_product_form(theta: &[f64], theta_hat: &[f64]) -> Vec<f64> {
    let d = theta.len();
    (0..d)
        .map(|i| {
            let num: f64 = theta_hat.iter().map(|h| theta[i] - h).product();
            let den: f64 = (0..d)
                .filter(|&j| j != i)
                .map(|j| theta[i] - theta[j])
                .product();
            num / den
        })
        .collect()
}

/// Parameters of an inverse BLT plus the roundtrip residual that certifies
/// them.
#[derive(Debug, Clone)]
pub struct InverseBlt {
    /// `(theta_hat, omega_hat)`; `omega_hat` is typically negative.
    pub params: BltParams,
    /// `max_i |(c * c_hat)_i - [i == 0]|` over the leading coefficients.
    pub residual: f64,
}

/// Recovers `(theta_hat, omega_hat)` with `BLT(theta, omega)^{-1} =
/// BLT(theta_hat, omega_hat)`.
///
/// The inverse decays are the roots of the secular equation
/// `1 + sum_j omega_j / (y - theta_j) = 0`, one strictly between each pair of
/// consecutive `theta` (by rank) and one below the smallest. Each bracket is
/// solved by bisection, then `omega_hat = calc_output_scale(theta_hat, theta)`.
pub fn inverse_blt_params(params: &BltParams) -> Result<InverseBlt> {
    let mut sorted = params.clone();
    sorted.sort_descending();
    let theta = &sorted.theta;
    let omega = &sorted.omega;
    if omega.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidParams(
            "inverse recovery requires non-negative omega".into(),
        ));
    }
    check_distinct(theta, "theta")?;

    if omega.iter().all(|&w| w == 0.0) {
        return Ok(InverseBlt {
            params: BltParams::relaxed(theta.clone(), vec![0.0; theta.len()])?,
            residual: 0.0,
        });
    }

    let active: Vec<usize> = (0..theta.len()).filter(|&i| omega[i] > 0.0).collect();
    let secular = |y: f64| -> f64 {
        1.0 + active
            .iter()
            .map(|&j| omega[j] / (y - theta[j]))
            .sum::<f64>()
    };

    let mut theta_hat = theta.clone();
    let total: f64 = active.iter().map(|&j| omega[j]).sum();
    for (rank, &i) in active.iter().enumerate() {
        let hi = theta[i];
        let lo = match active.get(rank + 1) {
            Some(&next) => theta[next],
            None => theta[i] - total - 1.0,
        };
        theta_hat[i] = bisect_decreasing(&secular, lo, hi);
    }

    let omega_hat = calc_output_scale(&theta_hat, theta)?;
    let inverse = BltParams::relaxed(theta_hat, omega_hat)?;

    let check = ROUNDTRIP_CHECK_LEN.max(4 * theta.len());
    let forward = sorted.coefs(check)?;
    let backward = inverse.coefs(check)?;
    let residual = forward
        .convolve(&backward)
        .iter()
        .enumerate()
        .map(|(i, v)| (v - if i == 0 { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);

    Ok(InverseBlt {
        params: inverse,
        residual,
    })
}

/// Root of a function that decreases from `+inf` at `lo` to `-inf` at `hi`.
fn bisect_decreasing(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// `Z = C Zhat`
    Forward,
    /// `Zhat = C^{-1} Z`
    Inverse,
}

/// Streaming multiplication by a BLT or by its inverse, one row per round.
///
/// State is the `d x m` buffer matrix `S` (row-major, one row per buffer)
/// and a round counter:
///
/// ```text
/// forward:  Z_t    = Zhat_t + omega^T S_{t-1}
/// inverse:  Zhat_t = Z_t    - omega^T S_{t-1}
/// both:     S_t    = diag(theta) S_{t-1} + 1_d Zhat_t
/// ```
#[derive(Debug, Clone)]
pub struct BltStream {
    theta: Vec<f64>,
    omega: Vec<f64>,
    dim: usize,
    buffers: Vec<f64>,
    round: usize,
    direction: Direction,
}

impl BltStream {
    /// Multiplies the input stream by `C = BLT(theta, omega)`.
    pub fn forward(params: &BltParams, dim: usize) -> Self {
        Self::with_direction(params, dim, Direction::Forward)
    }

    /// Multiplies the input stream by `C^{-1}` using the parameters of `C`.
    pub fn inverse(params: &BltParams, dim: usize) -> Self {
        Self::with_direction(params, dim, Direction::Inverse)
    }

    fn with_direction(params: &BltParams, dim: usize, direction: Direction) -> Self {
        Self {
            theta: params.theta.clone(),
            omega: params.omega.clone(),
            dim,
            buffers: vec![0.0; params.buffers() * dim],
            round: 0,
            direction,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rounds processed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// The buffer matrix `S`, `d` rows of length `m`.
    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    /// Number of floats of streaming state (`d * m`).
    pub fn state_len(&self) -> usize {
        self.buffers.len()
    }

    pub fn push(&mut self, row: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.push_into(row, &mut out)?;
        Ok(out)
    }

    pub fn push_into(&mut self, row: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.dim;
        if row.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: row.len(),
            });
        }
        if out.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: out.len(),
            });
        }
        out.copy_from_slice(row);
        for (buf, &w) in self.buffers.chunks_exact(m).zip(&self.omega) {
            match self.direction {
                Direction::Forward => out.iter_mut().zip(buf).for_each(|(o, s)| *o += w * s),
                Direction::Inverse => out.iter_mut().zip(buf).for_each(|(o, s)| *o -= w * s),
            }
        }
        let zhat: &[f64] = match self.direction {
            Direction::Forward => row,
            Direction::Inverse => out,
        };
        for (buf, &t) in self.buffers.chunks_exact_mut(m).zip(&self.theta) {
            buf.iter_mut().zip(zhat).for_each(|(s, z)| *s = t * *s + z);
        }
        self.round += 1;
        Ok(())
    }
}

/// `C * input` where rows of `input` are rounds.
pub fn stream_mult(params: &BltParams, input: &Matrix) -> Result<Matrix> {
    apply_stream(BltStream::forward(params, input.ncols()), input)
}

/// `C^{-1} * input` where rows of `input` are rounds.
pub fn stream_mult_inverse(params: &BltParams, input: &Matrix) -> Result<Matrix> {
    apply_stream(BltStream::inverse(params, input.ncols()), input)
}

fn apply_stream(mut stream: BltStream, input: &Matrix) -> Result<Matrix> {
    let (n, m) = input.shape();
    let mut output = Matrix::zeros(n, m);
    let mut row = vec![0.0; m];
    let mut out = vec![0.0; m];
    for t in 0..n {
        row.iter_mut()
            .zip(input.row(t).iter())
            .for_each(|(r, v)| *r = *v);
        stream.push_into(&row, &mut out)?;
        for (j, v) in out.iter().enumerate() {
            output[(t, j)] = *v;
        }
    }
    Ok(output)
}

/// Whether a noise generator may run past its declared horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundLimit {
    Bounded(usize),
    /// BLTs extend to any number of rounds; callers opt in explicitly.
    Unbounded,
}

/// Streaming correlated-noise generator: draws `Z_t ~ N(0, noise_std^2 I_m)`
/// and emits row `t` of `C^{-1} Z`.
///
/// Gaussian draws come from ChaCha20 seeded with `seed` and the ziggurat
/// sampler of `rand_distr::StandardNormal`, so identical seeds and
/// parameters reproduce the stream bit for bit.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    params: BltParams,
    stream: BltStream,
    noise_std: f64,
    seed: u64,
    rng: ChaCha20Rng,
    limit: RoundLimit,
    draw: Vec<f64>,
}

impl NoiseGenerator {
    pub fn new(
        params: &BltParams,
        dim: usize,
        noise_std: f64,
        seed: u64,
        limit: RoundLimit,
    ) -> Result<Self> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidParams(format!(
                "noise standard deviation {noise_std} must be finite and non-negative"
            )));
        }
        Ok(Self {
            params: params.clone(),
            stream: BltStream::inverse(params, dim),
            noise_std,
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
            limit,
            draw: vec![0.0; dim],
        })
    }

    pub fn params(&self) -> &BltParams {
        &self.params
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.stream.dim()
    }

    pub fn round(&self) -> usize {
        self.stream.round()
    }

    pub fn limit(&self) -> RoundLimit {
        self.limit
    }

    pub fn buffers(&self) -> &[f64] {
        self.stream.buffers()
    }

    /// Floats of streaming state; always `d * m`, independent of rounds.
    pub fn state_len(&self) -> usize {
        self.stream.state_len()
    }

    fn check_round(&self) -> Result<()> {
        match self.limit {
            RoundLimit::Bounded(limit) if self.round() >= limit => Err(Error::RoundOverflow {
                round: self.round(),
                limit,
            }),
            _ => Ok(()),
        }
    }

    /// Correlated noise for the next round.
    pub fn next_row(&mut self) -> Result<Vec<f64>> {
        self.check_round()?;
        if self.noise_std == 0.0 {
            self.draw.iter_mut().for_each(|z| *z = 0.0);
        } else {
            for z in self.draw.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                *z = self.noise_std * g;
            }
        }
        let draw = std::mem::take(&mut self.draw);
        let out = self.stream.push(&draw);
        self.draw = draw;
        out
    }

    /// Applies the inverse to a caller-supplied independent row instead of
    /// drawing one.
    pub fn next_row_from(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_round()?;
        self.stream.push(z)
    }
}
