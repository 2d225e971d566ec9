//! Participation schemas and sensitivity.
//!
//! A schema `(n, b, k)` allows a user to contribute to at most `k` of `n`
//! rounds, with any two contributions at least `b` rounds apart.

use serde::{Deserialize, Serialize};

use crate::blt::ToeplitzCoefs;
use crate::{Error, Matrix, Result};

/// Largest `n` accepted by the brute-force enumeration.
pub const MAX_ENUM_ROUNDS: usize = 24;
/// Largest number of patterns the brute-force enumeration will materialize.
pub const MAX_ENUM_PATTERNS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParticipationSchema {
    n: usize,
    b: usize,
    k: usize,
}

impl ParticipationSchema {
    pub fn new(n: usize, b: usize, k: usize) -> Result<Self> {
        if n == 0 || b == 0 {
            return Err(Error::InvalidSchema(format!(
                "rounds ({n}) and min-separation ({b}) must be positive"
            )));
        }
        let max_k = n.div_ceil(b);
        if k == 0 || k > max_k {
            return Err(Error::InvalidSchema(format!(
                "max participations {k} must lie in [1, {max_k}] for n={n}, b={b}"
            )));
        }
        Ok(Self { n, b, k })
    }

    /// Schema with the worst-case `k = ceil(n / b)`.
    pub fn worst_case(n: usize, b: usize) -> Result<Self> {
        if b == 0 {
            return Err(Error::InvalidSchema(
                "min-separation must be positive".into(),
            ));
        }
        Self::new(n, b, n.div_ceil(b))
    }

    /// Like [`new`](Self::new), but an optional `k` defaults to the worst
    /// case and a `k` too large for `(n, b)` is clamped with a warning.
    pub fn clamped(n: usize, b: usize, k: Option<usize>) -> Result<Self> {
        if n == 0 || b == 0 {
            return Self::new(n, b, 1);
        }
        let max_k = n.div_ceil(b);
        let k = match k {
            Some(k) if k > max_k => {
                log::warn!("k={k} does not fit n={n}, b={b}; clamping to {max_k}");
                max_k
            }
            Some(k) => k,
            None => max_k,
        };
        Self::new(n, b, k)
    }

    pub fn rounds(&self) -> usize {
        self.n
    }

    pub fn min_sep(&self) -> usize {
        self.b
    }

    pub fn max_part(&self) -> usize {
        self.k
    }

    /// The same separation and participation bound over a different horizon,
    /// with `k` clamped to what fits.
    pub fn with_rounds(&self, n: usize) -> Result<Self> {
        Self::clamped(n, self.b, Some(self.k))
    }

    /// `(0, b, 2b, ..., (k-1) b)`.
    pub fn worst_case_pattern(&self) -> ParticipationPattern {
        ParticipationPattern {
            indices: (0..self.k).map(|i| i * self.b).collect(),
        }
    }
}

/// Worst-case pattern for an unvalidated `(n, b, k)`.
pub fn worst_case_pattern(n: usize, b: usize, k: usize) -> Result<ParticipationPattern> {
    if k == 0 || b == 0 || (k - 1).saturating_mul(b) >= n {
        return Err(Error::InvalidSchema(format!(
            "pattern with k={k}, b={b} does not fit in n={n} rounds"
        )));
    }
    Ok(ParticipationSchema::new(n, b, k)?.worst_case_pattern())
}

/// Sorted round indices in which one user participates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParticipationPattern {
    indices: Vec<usize>,
}

impl ParticipationPattern {
    pub fn new(indices: Vec<usize>, schema: &ParticipationSchema) -> Result<Self> {
        if indices.len() > schema.k {
            return Err(Error::InvalidSchema(format!(
                "{} participations exceed k={}",
                indices.len(),
                schema.k
            )));
        }
        if indices.iter().any(|&i| i >= schema.n) {
            return Err(Error::InvalidSchema(
                "participation index out of range".into(),
            ));
        }
        if indices.windows(2).any(|w| w[1] < w[0] + schema.b) {
            return Err(Error::InvalidSchema(format!(
                "participations must be sorted and at least {} rounds apart",
                schema.b
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The 0/1 indicator vector `u(pi)` of length `n`.
    pub fn indicator(&self, n: usize) -> Vec<f64> {
        let mut u = vec![0.0; n];
        for &i in &self.indices {
            u[i] = 1.0;
        }
        u
    }
}

/// `c_bar = sum_{i<k} shift(c, b i)`, truncated to `n`.
pub fn shifted_column_sum(c: &[f64], schema: &ParticipationSchema) -> Vec<f64> {
    let n = schema.n;
    let mut cbar = vec![0.0; n];
    for p in 0..schema.k {
        let offset = p * schema.b;
        if offset >= n {
            break;
        }
        for (dst, src) in cbar[offset..].iter_mut().zip(c) {
            *dst += src;
        }
    }
    cbar
}

/// Sensitivity of `LtToep(c)` under the schema, valid when `c` is
/// non-negative and non-increasing; O(k n). Uses clip norm 1.
pub fn toeplitz_sensitivity(c: &ToeplitzCoefs, schema: &ParticipationSchema) -> Result<f64> {
    if c.len() < schema.n {
        return Err(Error::DimensionMismatch {
            expected: schema.n,
            got: c.len(),
        });
    }
    if !c.is_nonneg_nonincreasing() {
        return Err(Error::UnsupportedStrategy(
            "coefficients are not non-negative and non-increasing; \
             use exact_sensitivity_bruteforce instead"
                .into(),
        ));
    }
    let cbar = shifted_column_sum(&c.as_slice()[..schema.n], schema);
    Ok(norm(&cbar))
}

/// Sensitivity at clip norm `zeta`; linear in `zeta`.
pub fn toeplitz_sensitivity_at_clip(
    c: &ToeplitzCoefs,
    schema: &ParticipationSchema,
    zeta: f64,
) -> Result<f64> {
    Ok(zeta * toeplitz_sensitivity(c, schema)?)
}

/// `||C u(pi*)||_2`, a lower bound on the sensitivity of any strategy with
/// `n` columns.
pub fn matrix_sensitivity_lower_bound(c: &Matrix, schema: &ParticipationSchema) -> Result<f64> {
    pattern_norm(c, &schema.worst_case_pattern(), schema.n)
}

fn pattern_norm(c: &Matrix, pattern: &ParticipationPattern, n: usize) -> Result<f64> {
    if c.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: c.ncols(),
        });
    }
    let mut acc = vec![0.0; c.nrows()];
    for &j in pattern.indices() {
        for (a, v) in acc.iter_mut().zip(c.column(j).iter()) {
            *a += v;
        }
    }
    Ok(norm(&acc))
}

/// Every pattern allowed by the schema (including the empty one), or only
/// the maximal ones (those to which no round can be added).
pub fn enumerate_patterns(
    schema: &ParticipationSchema,
    maximal_only: bool,
) -> Result<Vec<ParticipationPattern>> {
    if schema.n > MAX_ENUM_ROUNDS {
        return Err(Error::TooLarge(format!(
            "pattern enumeration is limited to n <= {MAX_ENUM_ROUNDS}, got n={}",
            schema.n
        )));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(schema.k);
    enumerate_from(schema, 0, &mut current, maximal_only, &mut out)?;
    Ok(out)
}

fn enumerate_from(
    schema: &ParticipationSchema,
    start: usize,
    current: &mut Vec<usize>,
    maximal_only: bool,
    out: &mut Vec<ParticipationPattern>,
) -> Result<()> {
    if !maximal_only || is_maximal(schema, current) {
        if out.len() >= MAX_ENUM_PATTERNS {
            return Err(Error::TooLarge(format!(
                "more than {MAX_ENUM_PATTERNS} patterns for {schema:?}"
            )));
        }
        out.push(ParticipationPattern {
            indices: current.clone(),
        });
    }
    if current.len() == schema.k {
        return Ok(());
    }
    for next in start..schema.n {
        current.push(next);
        enumerate_from(schema, next + schema.b, current, maximal_only, out)?;
        current.pop();
    }
    Ok(())
}

fn is_maximal(schema: &ParticipationSchema, pattern: &[usize]) -> bool {
    if pattern.len() == schema.k {
        return true;
    }
    let b = schema.b;
    let (Some(&first), Some(&last)) = (pattern.first(), pattern.last()) else {
        return false;
    };
    let room_before = first >= b;
    let room_between = pattern.windows(2).any(|w| w[1] - w[0] >= 2 * b);
    let room_after = last + b < schema.n;
    !(room_before || room_between || room_after)
}

/// Exact sensitivity of a non-negative strategy, maximizing over all maximal
/// patterns.
pub fn exact_sensitivity_bruteforce(c: &Matrix, schema: &ParticipationSchema) -> Result<f64> {
    if c.iter().any(|&v| v < 0.0) {
        return Err(Error::UnsupportedStrategy(
            "brute-force sensitivity requires a non-negative strategy".into(),
        ));
    }
    let mut best = 0.0f64;
    for pattern in enumerate_patterns(schema, true)? {
        best = best.max(pattern_norm(c, &pattern, schema.n)?);
    }
    Ok(best)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix_sum_matrix;
    use approx::assert_relative_eq;

    fn schema(n: usize, b: usize, k: usize) -> ParticipationSchema {
        ParticipationSchema::new(n, b, k).unwrap()
    }

    /// Number of index sets in `[0, n)` with gaps >= b and size <= k.
    fn count_patterns(n: isize, b: isize, k: usize) -> usize {
        if n <= 0 || k == 0 {
            return 1;
        }
        count_patterns(n - 1, b, k) + count_patterns(n - b, b, k - 1)
    }

    #[test]
    fn schema_validation() {
        assert!(ParticipationSchema::new(0, 1, 1).is_err());
        assert!(ParticipationSchema::new(10, 0, 1).is_err());
        assert!(ParticipationSchema::new(10, 3, 0).is_err());
        assert!(ParticipationSchema::new(10, 3, 5).is_err());
        assert_eq!(
            ParticipationSchema::worst_case(10, 3).unwrap().max_part(),
            4
        );
        assert_eq!(
            ParticipationSchema::clamped(10, 3, Some(9))
                .unwrap()
                .max_part(),
            4
        );
        assert_eq!(
            ParticipationSchema::clamped(10, 3, None)
                .unwrap()
                .max_part(),
            4
        );
    }

    #[test]
    fn worst_case_patterns() {
        assert_eq!(schema(10, 3, 3).worst_case_pattern().indices(), &[0, 3, 6]);
        assert_eq!(
            schema(2052, 342, 6).worst_case_pattern().indices(),
            &[0, 342, 684, 1026, 1368, 1710]
        );
        assert_eq!(schema(5, 10, 1).worst_case_pattern().indices(), &[0]);
        assert!(worst_case_pattern(5, 3, 3).is_err());
    }

    #[test]
    fn pattern_validation() {
        let s = schema(10, 3, 3);
        assert!(ParticipationPattern::new(vec![0, 3, 6], &s).is_ok());
        assert!(ParticipationPattern::new(vec![0, 2], &s).is_err());
        assert!(ParticipationPattern::new(vec![0, 3, 6, 9], &s).is_err());
        assert!(ParticipationPattern::new(vec![10], &s).is_err());
    }

    #[test]
    fn identity_sensitivity_is_root_k() {
        let mut c = vec![0.0; 12];
        c[0] = 1.0;
        let c = ToeplitzCoefs::new(c).unwrap();
        assert_relative_eq!(toeplitz_sensitivity(&c, &schema(12, 3, 4)).unwrap(), 2.0);
    }

    #[test]
    fn all_ones_sensitivity() {
        let c = ToeplitzCoefs::new(vec![1.0; 4]).unwrap();
        let s = schema(4, 2, 2);
        assert_relative_eq!(toeplitz_sensitivity(&c, &s).unwrap(), 10f64.sqrt());
        let a = prefix_sum_matrix(4);
        assert_relative_eq!(
            matrix_sensitivity_lower_bound(&a, &s).unwrap(),
            10f64.sqrt()
        );
        assert_relative_eq!(exact_sensitivity_bruteforce(&a, &s).unwrap(), 10f64.sqrt());
    }

    #[test]
    fn increasing_coefficients_rejected() {
        let c = ToeplitzCoefs::new(vec![1.0, 0.5, 0.7]).unwrap();
        assert!(matches!(
            toeplitz_sensitivity(&c, &schema(3, 1, 3)),
            Err(Error::UnsupportedStrategy(_))
        ));
        let c = ToeplitzCoefs::new(vec![1.0, -0.1, -0.2]).unwrap();
        assert!(toeplitz_sensitivity(&c, &schema(3, 1, 3)).is_err());
    }

    #[test]
    fn identity_lower_bound() {
        let i = Matrix::identity(6, 6);
        assert_relative_eq!(
            matrix_sensitivity_lower_bound(&i, &schema(6, 2, 3)).unwrap(),
            3f64.sqrt()
        );
    }

    #[test]
    fn identity_bruteforce_uses_available_slots() {
        let i = Matrix::identity(7, 7);
        // at most min(k, ceil(n/b)) participations
        assert_relative_eq!(
            exact_sensitivity_bruteforce(&i, &schema(7, 3, 3)).unwrap(),
            3f64.sqrt()
        );
        assert_relative_eq!(
            exact_sensitivity_bruteforce(&i, &schema(7, 2, 2)).unwrap(),
            2f64.sqrt()
        );
    }

    #[test]
    fn all_ones_bruteforce_matches_worst_case() {
        let a = prefix_sum_matrix(6);
        let s = schema(6, 2, 3);
        assert_relative_eq!(
            exact_sensitivity_bruteforce(&a, &s).unwrap(),
            matrix_sensitivity_lower_bound(&a, &s).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn bruteforce_rejects_negative_entries() {
        let mut m = Matrix::identity(3, 3);
        m[(2, 0)] = -0.5;
        assert!(exact_sensitivity_bruteforce(&m, &schema(3, 1, 2)).is_err());
    }

    #[test]
    fn maximal_patterns_small() {
        let got: Vec<Vec<usize>> = enumerate_patterns(&schema(4, 2, 2), true)
            .unwrap()
            .into_iter()
            .map(|p| p.indices().to_vec())
            .collect();
        assert_eq!(got, vec![vec![0, 2], vec![0, 3], vec![1, 3]]);

        let got = enumerate_patterns(&schema(3, 1, 3), true).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].indices(), &[0, 1, 2]);
    }

    #[test]
    fn maximal_patterns_with_short_k() {
        // k=1: every singleton is maximal
        assert_eq!(enumerate_patterns(&schema(5, 2, 1), true).unwrap().len(), 5);
        // n=5, b=3, k=2: {0,3},{0,4},{1,4}; {2} cannot be extended
        let got: Vec<Vec<usize>> = enumerate_patterns(&schema(5, 3, 2), true)
            .unwrap()
            .into_iter()
            .map(|p| p.indices().to_vec())
            .collect();
        assert_eq!(got, vec![vec![0, 3], vec![0, 4], vec![1, 4], vec![2]]);
    }

    #[test]
    fn pattern_count_matches_recursion() {
        for (n, b, k) in [(8, 3, 3), (10, 2, 4), (12, 1, 5), (16, 4, 4), (20, 3, 7)] {
            let all = enumerate_patterns(&schema(n, b, k), false).unwrap();
            assert_eq!(
                all.len(),
                count_patterns(n as isize, b as isize, k),
                "{n} {b} {k}"
            );
        }
    }

    #[test]
    fn enumeration_refuses_large_schemas() {
        assert!(matches!(
            enumerate_patterns(&schema(25, 1, 3), true),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn sensitivity_scales_with_clip_norm() {
        let c = ToeplitzCoefs::new(vec![1.0, 0.5, 0.25, 0.125]).unwrap();
        let s = schema(4, 1, 4);
        let one = toeplitz_sensitivity(&c, &s).unwrap();
        assert_relative_eq!(
            toeplitz_sensitivity_at_clip(&c, &s, 3.5).unwrap(),
            3.5 * one
        );
    }
}
