//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective may return `+inf` (or NaN) outside its domain; the line
//! search treats such points as too far and shrinks the step.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `||g||_inf <= grad_tol`.
    pub grad_tol: f64,
    /// Stop when the relative decrease stays below this twice in a row.
    pub f_rel_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-9,
            f_rel_tol: 1e-13,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    /// No further decrease is representable, or it stalled below `f_rel_tol`.
    Stagnation,
    MaxIterations,
    /// Start point outside the domain or with non-finite gradient.
    InfeasibleStart,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.reason,
            StopReason::GradientTolerance | StopReason::Stagnation
        )
    }

    pub fn grad_norm_inf(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn is_finite_point(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Evaluator<'_, F> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.count += 1;
        let (f, g) = (self.f)(x);
        if is_finite_point(f, &g) {
            (f, g)
        } else {
            (f64::INFINITY, g)
        }
    }
}

struct Trial {
    step: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: &[f64], config: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut ev = Evaluator {
        f: &mut f,
        count: 0,
    };
    let mut x = x0.to_vec();
    let (mut fx, mut g) = ev.eval(&x);
    if !fx.is_finite() {
        return LbfgsResult {
            x,
            f: fx,
            grad: g,
            iterations: 0,
            evaluations: ev.count,
            reason: StopReason::InfeasibleStart,
        };
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut small_steps = 0;
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iters {
        if inf_norm(&g) <= config.grad_tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        iterations += 1;

        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let initial = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };

        let mut trial = line_search(&mut ev, &x, fx, slope, &dir, initial, config);
        if trial.is_none() && !history.is_empty() {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            trial = line_search(
                &mut ev,
                &x,
                fx,
                slope,
                &dir,
                (1.0 / inf_norm(&g)).min(1.0),
                config,
            );
        }
        let Some(trial) = trial else {
            reason = StopReason::Stagnation;
            break;
        };

        let x_new: Vec<f64> = x
            .iter()
            .zip(&dir)
            .map(|(a, d)| a + trial.step * d)
            .collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let decrease = fx - trial.f;
        let scale = fx.abs().max(trial.f.abs());
        x = x_new;
        fx = trial.f;
        g = trial.g;

        if decrease <= config.f_rel_tol * scale {
            small_steps += 1;
            if small_steps >= 2 {
                reason = StopReason::Stagnation;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    if reason == StopReason::MaxIterations && inf_norm(&g) <= config.grad_tol {
        reason = StopReason::GradientTolerance;
    }

    LbfgsResult {
        x,
        f: fx,
        grad: g,
        iterations,
        evaluations: ev.count,
        reason,
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Strong-Wolfe line search (bracketing then zoom). Returns `None` when no
/// step decreases the objective.
fn line_search<F>(
    ev: &mut Evaluator<'_, F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial: f64,
    config: &LbfgsConfig,
) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let probe = |step: f64, ev: &mut Evaluator<'_, F>| -> Trial {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let (f, g) = ev.eval(&xt);
        let slope = if f.is_finite() {
            dot(&g, dir)
        } else {
            f64::NAN
        };
        Trial { step, f, g, slope }
    };

    let mut best: Option<Trial> = None;
    let keep_best = |t: &Trial, best: &mut Option<Trial>| {
        if t.f < f0 && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial {
                step: t.step,
                f: t.f,
                g: t.g.clone(),
                slope: t.slope,
            });
        }
    };

    let mut lo = Trial {
        step: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut step = initial;
    let mut evals = 0;
    let mut hi: Option<Trial> = None;

    // bracketing phase
    while evals < config.max_line_search {
        let t = probe(step, ev);
        evals += 1;
        keep_best(&t, &mut best);
        if !t.f.is_finite() || t.f > f0 + config.c1 * step * slope0 || (evals > 1 && t.f >= lo.f) {
            hi = Some(t);
            break;
        }
        if t.slope.abs() <= -config.c2 * slope0 {
            return Some(t);
        }
        if t.slope >= 0.0 {
            hi = Some(lo);
            lo = t;
            break;
        }
        lo = t;
        step *= 2.0;
    }
    let Some(mut hi) = hi else {
        return best;
    };

    // zoom phase
    while evals < config.max_line_search {
        let step = if hi.f.is_finite() && lo.slope.is_finite() {
            cubic_or_bisect(&lo, &hi)
        } else {
            0.5 * (lo.step + hi.step)
        };
        if (step - lo.step).abs() <= f64::EPSILON * lo.step.abs().max(1e-300) {
            break;
        }
        let t = probe(step, ev);
        evals += 1;
        keep_best(&t, &mut best);
        if !t.f.is_finite() || t.f > f0 + config.c1 * step * slope0 || t.f >= lo.f {
            hi = t;
        } else {
            if t.slope.abs() <= -config.c2 * slope0 {
                return Some(t);
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
        if (hi.step - lo.step).abs() < 1e-16 * lo.step.abs().max(hi.step.abs()) {
            break;
        }
    }
    best
}

/// Minimizer of the cubic through both ends, safeguarded into the middle
/// 80% of the interval.
fn cubic_or_bisect(a: &Trial, b: &Trial) -> f64 {
    let (lo, hi) = (a.step.min(b.step), a.step.max(b.step));
    let mid = 0.5 * (lo + hi);
    if !b.slope.is_finite() {
        return mid;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.step - b.step);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt().copysign(b.step - a.step);
    let step = b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if step.is_finite() && step > lo + margin && step < hi - margin {
        step
    } else {
        mid
    }
}
