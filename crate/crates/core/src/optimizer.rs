//! Optimization of BLT parameters for a participation schema.
//!
//! The free variables are the buffer decays `theta` of `C` and `theta_hat`
//! of `C^{-1}`; both output scales follow from them:
//!
//! ```text
//! omega_i     = prod_k (theta_i - theta_hat_k) / prod_{j != i} (theta_i - theta_j)
//! omega_hat_k = prod_i (theta_hat_k - theta_i) / prod_{j != k} (theta_hat_k - theta_hat_j)
//! ```
//!
//! The loss is `error(c_hat) * sens(c)` plus a log barrier on `theta` and
//! `omega`. L-BFGS runs in logit coordinates so both decay vectors stay in
//! `(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blt::{calc_output_scale, output_scale_product_form, BltParams};
use crate::lbfgs::{self, LbfgsConfig};
use crate::loss::{blt_mechanism_loss, MechanismLoss, Objective};
use crate::participation::{shifted_column_sum, ParticipationSchema};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub schema: ParticipationSchema,
    pub buffers: usize,
    pub objective: Objective,
    pub barrier_lambda: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(schema: ParticipationSchema, buffers: usize, objective: Objective) -> Self {
        Self {
            schema,
            buffers,
            objective,
            barrier_lambda: 1e-7,
            restarts: 8,
            max_iters: 500,
            grad_tol: 1e-9,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.buffers == 0 {
            return Err(Error::InvalidParams(
                "at least one buffer is required".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParams(
                "at least one restart is required".into(),
            ));
        }
        if !(self.barrier_lambda >= 0.0) || !self.barrier_lambda.is_finite() {
            return Err(Error::InvalidParams(
                "barrier strength must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub index: usize,
    /// Barrier-free loss, `inf` when the restart failed.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Why the restart was discarded, if it was.
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub params: BltParams,
    /// Inverse decays, descending, paired with `params.theta()` by rank.
    pub theta_hat: Vec<f64>,
    /// Barrier-free objective value.
    pub loss: f64,
    pub mechanism: MechanismLoss,
    pub converged: bool,
    pub iterations: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

impl OptimizationResult {
    pub fn restart_losses(&self) -> Vec<f64> {
        self.restarts.iter().map(|r| r.loss).collect()
    }
}

/// Value and, optionally, gradient of the loss in the original coordinates.
struct Evaluation {
    value: f64,
    grad: Option<(Vec<f64>, Vec<f64>)>,
}

/// The differentiable loss; `+inf` outside the domain.
pub fn blt_loss(
    theta: &[f64],
    theta_hat: &[f64],
    schema: &ParticipationSchema,
    objective: Objective,
    lambda: f64,
) -> f64 {
    evaluate(theta, theta_hat, schema, objective, lambda, false).value
}

/// Gradient of [`blt_loss`] with respect to `theta` and `theta_hat`, or
/// `None` outside the domain.
pub fn blt_loss_gradient(
    theta: &[f64],
    theta_hat: &[f64],
    schema: &ParticipationSchema,
    objective: Objective,
    lambda: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    evaluate(theta, theta_hat, schema, objective, lambda, true).grad
}

/// `sum_{t>=1} weights_t x^(t-1)` and `sum_{t>=2} weights_t (t-1) x^(t-2)`.
fn power_sums(weights: &[f64], x: f64) -> (f64, f64) {
    let mut pow = 1.0;
    let mut dpow = 0.0;
    let mut value = 0.0;
    let mut deriv = 0.0;
    for (t, &w) in weights.iter().enumerate().skip(1) {
        value += w * pow;
        deriv += w * dpow;
        dpow = pow * t as f64;
        pow *= x;
    }
    (value, deriv)
}

fn coefs_from(theta: &[f64], omega: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    c[0] = 1.0;
    let mut powers = omega.to_vec();
    for ci in c.iter_mut().skip(1) {
        *ci = powers.iter().sum();
        for (p, &t) in powers.iter_mut().zip(theta) {
            *p *= t;
        }
    }
    c
}

/// Jacobian-transpose product for the product-form output scales:
/// given `g = dL/d(out)` where `out_i = prod_k (a_i - b_k) / prod_{j != i} (a_i - a_j)`,
/// returns `(dL/da, dL/db)`.
fn output_scale_vjp(a: &[f64], b: &[f64], out: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = a.len();
    let mut ga = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for i in 0..d {
        let gi = g[i] * out[i];
        let mut own = 0.0;
        for k in 0..d {
            let inv = 1.0 / (a[i] - b[k]);
            own += inv;
            gb[k] -= gi * inv;
        }
        for j in 0..d {
            if j != i {
                let inv = 1.0 / (a[i] - a[j]);
                own -= inv;
                ga[j] += gi * inv;
            }
        }
        ga[i] += gi * own;
    }
    (ga, gb)
}

fn in_unit_interval(v: &[f64]) -> bool {
    v.iter().all(|&x| x > 0.0 && x < 1.0)
}

fn evaluate(
    theta: &[f64],
    theta_hat: &[f64],
    schema: &ParticipationSchema,
    objective: Objective,
    lambda: f64,
    want_grad: bool,
) -> Evaluation {
    const OUT: Evaluation = Evaluation {
        value: f64::INFINITY,
        grad: None,
    };
    let d = theta.len();
    if d == 0 || theta_hat.len() != d || !in_unit_interval(theta) || !in_unit_interval(theta_hat) {
        return OUT;
    }
    let omega = output_scale_product_form(theta, theta_hat);
    let omega_hat = output_scale_product_form(theta_hat, theta);
    if omega.iter().chain(&omega_hat).any(|w| !w.is_finite()) {
        return OUT;
    }
    let positive_required = lambda > 0.0;
    if omega
        .iter()
        .any(|&w| w < 0.0 || (positive_required && w == 0.0))
    {
        return OUT;
    }
    if omega.iter().sum::<f64>() > 1.0 {
        return OUT;
    }

    let n = schema.rounds();
    let c = coefs_from(theta, &omega, n);
    let cbar = shifted_column_sum(&c, schema);
    let sens_sq: f64 = cbar.iter().map(|v| v * v).sum();

    let c_hat = coefs_from(theta_hat, &omega_hat, n);
    let weight = |i: usize| match objective {
        Objective::Max => 1.0,
        Objective::Rms => (n - i) as f64 / n as f64,
    };
    let mut prefix = Vec::with_capacity(n);
    let mut running = 0.0;
    for &v in &c_hat {
        running += v;
        prefix.push(running);
    }
    let err_sq: f64 = prefix
        .iter()
        .enumerate()
        .map(|(i, b)| weight(i) * b * b)
        .sum();

    let sens = sens_sq.sqrt();
    let err = err_sq.sqrt();
    let barrier = if lambda > 0.0 {
        lambda
            * (-theta.iter().map(|t| t.ln() + (1.0 - t).ln()).sum::<f64>()
                - omega.iter().map(|w| w.ln()).sum::<f64>())
    } else {
        0.0
    };
    let value = err * sens + barrier;
    if !value.is_finite() {
        return OUT;
    }
    if !want_grad {
        return Evaluation { value, grad: None };
    }

    // d(sens^2)/dc_t = 2 sum_p cbar_{t + p b}
    let mut g_c = vec![0.0; n];
    for p in 0..schema.max_part() {
        let offset = p * schema.min_sep();
        if offset >= n {
            break;
        }
        for (g, v) in g_c.iter_mut().zip(&cbar[offset..]) {
            *g += v;
        }
    }
    // d(err^2)/dc_hat_t = 2 sum_{i >= t} w_i b_i
    let mut g_chat = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        suffix += weight(i) * prefix[i];
        g_chat[i] = suffix;
    }

    // dL/d(sens^2) = err / (2 sens); the factor 2 above cancels
    let ds = if sens > 0.0 { err / sens } else { 0.0 };
    let de = if err > 0.0 { sens / err } else { 0.0 };

    let mut g_theta = vec![0.0; d];
    let mut g_omega = vec![0.0; d];
    for j in 0..d {
        let (v, dv) = power_sums(&g_c, theta[j]);
        g_omega[j] = ds * v;
        g_theta[j] = ds * omega[j] * dv;
    }
    let mut g_theta_hat = vec![0.0; d];
    let mut g_omega_hat = vec![0.0; d];
    for k in 0..d {
        let (v, dv) = power_sums(&g_chat, theta_hat[k]);
        g_omega_hat[k] = de * v;
        g_theta_hat[k] = de * omega_hat[k] * dv;
    }

    if lambda > 0.0 {
        for j in 0..d {
            g_theta[j] += lambda * (-1.0 / theta[j] + 1.0 / (1.0 - theta[j]));
            g_omega[j] -= lambda / omega[j];
        }
    }

    let (a1, b1) = output_scale_vjp(theta, theta_hat, &omega, &g_omega);
    let (a2, b2) = output_scale_vjp(theta_hat, theta, &omega_hat, &g_omega_hat);
    for j in 0..d {
        g_theta[j] += a1[j] + b2[j];
        g_theta_hat[j] += b1[j] + a2[j];
    }
    let grad_ok = g_theta.iter().chain(&g_theta_hat).all(|v| v.is_finite());
    Evaluation {
        value,
        grad: grad_ok.then_some((g_theta, g_theta_hat)),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Multi-scale start: decays spread toward 1 and inverse decays strictly
/// interlaced below them, so every output scale starts positive.
fn initial_point(d: usize, rng: &mut ChaCha20Rng) -> (Vec<f64>, Vec<f64>) {
    let mut theta: Vec<f64> = (1..=d)
        .map(|i| 1.0 - 10f64.powi(-(i as i32)) * rng.random_range(0.5..1.5))
        .collect();
    theta.sort_by(|a, b| b.total_cmp(a));
    let theta_hat = (0..d)
        .map(|i| {
            let next = theta.get(i + 1).copied().unwrap_or(0.0);
            theta[i] - rng.random_range(0.05..0.95) * (theta[i] - next)
        })
        .collect();
    (theta, theta_hat)
}

struct RestartRun {
    index: usize,
    theta: Vec<f64>,
    theta_hat: Vec<f64>,
    loss: f64,
    iterations: usize,
    converged: bool,
}

fn run_restart(config: &OptimizerConfig, index: usize) -> RestartRun {
    let d = config.buffers;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (theta0, theta_hat0) = initial_point(d, &mut rng);
    let x0: Vec<f64> = theta0
        .iter()
        .chain(&theta_hat0)
        .map(|&p| logit(p))
        .collect();

    let schema = config.schema;
    let objective = config.objective;
    let lambda = config.barrier_lambda;
    let fg = |x: &[f64]| -> (f64, Vec<f64>) {
        let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        let (theta, theta_hat) = p.split_at(d);
        let eval = evaluate(theta, theta_hat, &schema, objective, lambda, true);
        match eval.grad {
            Some((gt, gh)) => {
                let grad = gt
                    .iter()
                    .chain(&gh)
                    .zip(&p)
                    .map(|(g, &q)| g * q * (1.0 - q))
                    .collect();
                (eval.value, grad)
            }
            None => (f64::INFINITY, vec![0.0; 2 * d]),
        }
    };
    let lbfgs_config = LbfgsConfig {
        max_iters: config.max_iters,
        grad_tol: config.grad_tol,
        ..LbfgsConfig::default()
    };
    let result = lbfgs::minimize(fg, &x0, &lbfgs_config);
    let p: Vec<f64> = result.x.iter().map(|&v| sigmoid(v)).collect();
    let (theta, theta_hat) = p.split_at(d);
    let loss = blt_loss(theta, theta_hat, &schema, objective, 0.0);
    RestartRun {
        index,
        theta: theta.to_vec(),
        theta_hat: theta_hat.to_vec(),
        loss,
        iterations: result.iterations,
        converged: result.converged(),
    }
}

/// Sorts `(theta, theta_hat)` descending and builds validated parameters.
fn extract(run: &RestartRun) -> Result<(BltParams, Vec<f64>)> {
    let mut theta = run.theta.clone();
    let mut theta_hat = run.theta_hat.clone();
    theta.sort_by(|a, b| b.total_cmp(a));
    theta_hat.sort_by(|a, b| b.total_cmp(a));
    let omega = calc_output_scale(&theta, &theta_hat)?;
    let params = BltParams::new(theta, omega)?;
    let coefs = params.coefs(run_len(&params))?;
    if !coefs.is_nonneg_nonincreasing() {
        return Err(Error::Optimization(
            "extracted coefficients are not monotone".into(),
        ));
    }
    let inverse = params.inverse()?;
    if inverse.residual > 1e-8 {
        return Err(Error::Optimization(format!(
            "inverse roundtrip residual {:.3e}",
            inverse.residual
        )));
    }
    Ok((params, theta_hat))
}

fn run_len(params: &BltParams) -> usize {
    64.max(4 * params.buffers())
}

fn max_gap(theta: &[f64], theta_hat: &[f64]) -> f64 {
    theta
        .iter()
        .zip(theta_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Runs L-BFGS from `config.restarts` seeded starts and returns the best
/// validated result.
pub fn optimize_blt(config: &OptimizerConfig) -> Result<OptimizationResult> {
    config.validate()?;
    let runs: Vec<RestartRun> = (0..config.restarts)
        .into_par_iter()
        .map(|i| run_restart(config, i))
        .collect();

    let mut outcomes = Vec::with_capacity(runs.len());
    let mut candidates = Vec::new();
    for run in &runs {
        let mut outcome = RestartOutcome {
            index: run.index,
            loss: run.loss,
            iterations: run.iterations,
            converged: run.converged,
            rejected: None,
        };
        if !run.loss.is_finite() {
            outcome.rejected = Some("infeasible or diverged".into());
        } else {
            match extract(run) {
                Ok((params, theta_hat)) => candidates.push((run, params, theta_hat)),
                Err(e) => outcome.rejected = Some(e.to_string()),
            }
        }
        outcomes.push(outcome);
    }

    candidates.sort_by(|a, b| {
        a.0.loss
            .total_cmp(&b.0.loss)
            .then(
                max_gap(a.1.theta(), &a.2)
                    .total_cmp(&max_gap(b.1.theta(), &b.2)),
            )
            .then(a.0.index.cmp(&b.0.index))
    });
    let Some((run, params, theta_hat)) = candidates.into_iter().next() else {
        let reasons: Vec<String> = outcomes
            .iter()
            .map(|o| {
                format!(
                    "restart {}: {}",
                    o.index,
                    o.rejected.as_deref().unwrap_or("?")
                )
            })
            .collect();
        return Err(Error::Optimization(format!(
            "no restart produced a valid BLT ({})",
            reasons.join("; ")
        )));
    };

    let mechanism = blt_mechanism_loss(&params, &config.schema)?;
    Ok(OptimizationResult {
        params,
        theta_hat,
        loss: run.loss,
        mechanism,
        converged: run.converged,
        iterations: run.iterations,
        best_restart: run.index,
        restarts: outcomes,
    })
}
