#![allow(dead_code)]

use corrnoise::BltParams;
use rand::Rng;

/// A valid BLT with `d` buffers, decays in `(0.05, 0.999)` separated by at
/// least `1e-3`, and output scales summing to at most 0.95.
pub fn random_blt(rng: &mut impl Rng, d: usize) -> BltParams {
    loop {
        let mut theta: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.999)).collect();
        theta.sort_by(|a, b| b.total_cmp(a));
        if theta.windows(2).any(|w| w[0] - w[1] < 1e-3) {
            continue;
        }
        let mut omega: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = omega.iter().sum();
        let target = rng.random_range(0.05..0.95);
        omega.iter_mut().for_each(|w| *w *= target / total);
        return BltParams::new(theta, omega).expect("generated parameters are valid");
    }
}

/// Decays and interlaced inverse decays, `theta_0 > theta_hat_0 > theta_1 > ...`.
pub fn random_interlaced(rng: &mut impl Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let mut theta: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.999)).collect();
        theta.sort_by(|a, b| b.total_cmp(a));
        if theta.windows(2).any(|w| w[0] - w[1] < 1e-2) {
            continue;
        }
        let theta_hat: Vec<f64> = (0..d)
            .map(|i| {
                let next = theta.get(i + 1).copied().unwrap_or(0.0);
                theta[i] - rng.random_range(0.1..0.9) * (theta[i] - next)
            })
            .collect();
        let gap: f64 = theta.iter().sum::<f64>() - theta_hat.iter().sum::<f64>();
        if gap < 0.99 {
            return (theta, theta_hat);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
