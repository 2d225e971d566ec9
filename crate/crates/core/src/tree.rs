//! Binary-tree aggregation baseline with full (pseudoinverse) decoding.
//!
//! Every node of the tree is an interval of rounds, so the strategy `C` is a
//! 0/1 matrix with one row per node. Decoding uses `B = A C^+` where
//! `C^+ = (C^T C)^{-1} C^T`; `C^T C` counts the nodes shared by two leaves.

use serde::{Deserialize, Serialize};

use crate::loss::{self, MechanismLoss, SensMethod};
use crate::participation::{self, ParticipationSchema};
use crate::{Error, Matrix, Result};

/// Largest `n` materialized densely.
pub const MAX_DENSE_TREE_ROUNDS: usize = 8192;

/// How a tree over a non-power-of-two number of leaves is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeCompletion {
    /// Recursive halving: the left child of a node over `m` leaves covers
    /// `floor(m / 2)` of them.
    #[default]
    Balanced,
    /// The next power-of-two tree with columns beyond `n` dropped, then
    /// all-zero rows removed.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct TreeStrategy {
    n: usize,
    levels: usize,
    completion: TreeCompletion,
    /// Half-open leaf intervals, one per row of `C`.
    nodes: Vec<(usize, usize)>,
}

/// Levels of the power-of-two tree covering `n` leaves: `ceil(log2 n) + 1`.
pub fn tree_levels(n: usize) -> usize {
    n.next_power_of_two().trailing_zeros() as usize + 1
}

pub fn build_tree_matrix(n: usize) -> Result<TreeStrategy> {
    build_tree(n, TreeCompletion::default())
}

pub fn build_tree(n: usize, completion: TreeCompletion) -> Result<TreeStrategy> {
    if n == 0 {
        return Err(Error::InvalidParams("tree needs at least one leaf".into()));
    }
    if n > MAX_DENSE_TREE_ROUNDS {
        return Err(Error::TooLarge(format!(
            "dense tree limited to n <= {MAX_DENSE_TREE_ROUNDS}, got {n}"
        )));
    }
    let mut nodes = Vec::with_capacity(2 * n);
    match completion {
        TreeCompletion::Balanced => balanced_nodes(0, n, &mut nodes),
        TreeCompletion::Truncated => {
            let mut full = Vec::new();
            balanced_nodes(0, n.next_power_of_two(), &mut full);
            nodes.extend(
                full.into_iter()
                    .filter(|&(lo, _)| lo < n)
                    .map(|(lo, hi)| (lo, hi.min(n))),
            );
        }
    }
    Ok(TreeStrategy {
        n,
        levels: tree_levels(n),
        completion,
        nodes,
    })
}

/// Rows in the order of the recursion `[[C, 0], [0, C], [1, 1]]`.
fn balanced_nodes(lo: usize, hi: usize, out: &mut Vec<(usize, usize)>) {
    if hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        balanced_nodes(lo, mid, out);
        balanced_nodes(mid, hi, out);
    }
    out.push((lo, hi));
}

impl TreeStrategy {
    pub fn rounds(&self) -> usize {
        self.n
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn completion(&self) -> TreeCompletion {
        self.completion
    }

    pub fn nodes(&self) -> &[(usize, usize)] {
        &self.nodes
    }

    pub fn to_dense(&self) -> Matrix {
        let mut c = Matrix::zeros(self.nodes.len(), self.n);
        for (r, &(lo, hi)) in self.nodes.iter().enumerate() {
            for j in lo..hi {
                c[(r, j)] = 1.0;
            }
        }
        c
    }

    /// `C^T C`, row-major.
    fn gram(&self) -> Vec<f64> {
        let n = self.n;
        let mut g = vec![0.0; n * n];
        for &(lo, hi) in &self.nodes {
            for i in lo..hi {
                g[i * n + lo..i * n + hi].iter_mut().for_each(|v| *v += 1.0);
            }
        }
        g
    }

    /// `B = A C^+`, shape `n x nodes`.
    pub fn full_decoder(&self) -> Result<Matrix> {
        let n = self.n;
        let gram = self.gram();
        let mut factor = gram.clone();
        cholesky_in_place(&mut factor, n)?;
        let gram_inv = inverse_from_cholesky(&factor, n);
        check_inverse(&gram, &gram_inv, n)?;

        // X = A G^{-1}: running sums of rows
        let mut x = gram_inv;
        for i in 1..n {
            let (done, rest) = x.split_at_mut(i * n);
            rest[..n]
                .iter_mut()
                .zip(&done[(i - 1) * n..])
                .for_each(|(a, b)| *a += b);
        }
        // B = X C^T: node r sums columns lo..hi of X
        let rows = self.nodes.len();
        let mut b = Matrix::zeros(n, rows);
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            let xi = &x[i * n..(i + 1) * n];
            for j in 0..n {
                prefix[j + 1] = prefix[j] + xi[j];
            }
            for (r, &(lo, hi)) in self.nodes.iter().enumerate() {
                b[(i, r)] = prefix[hi] - prefix[lo];
            }
        }
        Ok(b)
    }
}

/// Lower Cholesky factor of a row-major SPD matrix, written over its lower
/// triangle; the strict upper triangle is zeroed.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let (head, tail) = a.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        for i in 0..j {
            let row_i = &head[i * n..i * n + i];
            let dot: f64 = row_i.iter().zip(&row_j[..i]).map(|(p, q)| p * q).sum();
            row_j[i] = (row_j[i] - dot) / head[i * n + i];
        }
        let sq: f64 = row_j[..j].iter().map(|v| v * v).sum();
        let diag = row_j[j] - sq;
        if !(diag > 0.0) {
            return Err(Error::RankDeficient(format!(
                "Gram matrix not positive definite at column {j}"
            )));
        }
        row_j[j] = diag.sqrt();
        row_j[j + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// `(L L^T)^{-1}` from the row-major factor `L`.
fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // M = L^{-1}, lower triangular
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let (done, rest) = m.split_at_mut(i * n);
        let row = &mut rest[..n];
        row[i] = 1.0;
        for k in 0..i {
            let coef = l[i * n + k];
            if coef != 0.0 {
                row[..=k]
                    .iter_mut()
                    .zip(&done[k * n..k * n + k + 1])
                    .for_each(|(r, v)| *r -= coef * v);
            }
        }
        let d = l[i * n + i];
        row[..=i].iter_mut().for_each(|v| *v /= d);
    }
    // G^{-1} = M^T M, accumulated as a sum of outer products of rows of M
    let mut inv = vec![0.0; n * n];
    for k in 0..n {
        let mk = &m[k * n..k * n + k + 1];
        for (a, &va) in mk.iter().enumerate() {
            if va != 0.0 {
                inv[a * n..a * n + k + 1]
                    .iter_mut()
                    .zip(mk)
                    .for_each(|(r, vb)| *r += va * vb);
            }
        }
    }
    inv
}

/// Applies `G^{-1} G` to a fixed probe vector and checks it comes back.
fn check_inverse(gram: &[f64], inv: &[f64], n: usize) -> Result<()> {
    let probe: Vec<f64> = (0..n)
        .map(|i| ((i * 7919 % 101) as f64 - 50.0) / 50.0 + 0.01)
        .collect();
    let apply = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                m[i * n..(i + 1) * n]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    };
    let back = apply(inv, &apply(gram, &probe));
    let err = participation::norm(
        &back
            .iter()
            .zip(&probe)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    ) / participation::norm(&probe);
    if err > 1e-8 {
        return Err(Error::IllConditioned(format!(
            "tree pseudoinverse residual {err:.3e}"
        )));
    }
    Ok(())
}

/// TreeAgg with full decoding at the schema's `n`.
pub fn eval_tree(schema: &ParticipationSchema) -> Result<MechanismLoss> {
    eval_tree_with(schema, TreeCompletion::default())
}

pub fn eval_tree_with(
    schema: &ParticipationSchema,
    completion: TreeCompletion,
) -> Result<MechanismLoss> {
    let tree = build_tree(schema.rounds(), completion)?;
    let b = tree.full_decoder()?;
    let sens = participation::matrix_sensitivity_lower_bound(&tree.to_dense(), schema)?;
    Ok(MechanismLoss::new(
        sens,
        loss::dense_error(&b),
        *schema,
        SensMethod::LowerBound,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix_sum_matrix;
    use approx::assert_relative_eq;

    fn rows(t: &TreeStrategy) -> Vec<Vec<u8>> {
        let c = t.to_dense();
        (0..c.nrows())
            .map(|r| c.row(r).iter().map(|&v| v as u8).collect())
            .collect()
    }

    #[test]
    fn single_leaf() {
        let t = build_tree_matrix(1).unwrap();
        assert_eq!(rows(&t), vec![vec![1]]);
        assert_eq!(t.levels(), 1);
        let b = t.full_decoder().unwrap();
        assert_relative_eq!(b[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_leaves() {
        let t = build_tree_matrix(2).unwrap();
        assert_eq!(rows(&t), vec![vec![1, 0], vec![0, 1], vec![1, 1]]);
        let b = t.full_decoder().unwrap();
        assert!((b * t.to_dense() - prefix_sum_matrix(2)).abs().max() < 1e-10);
    }

    #[test]
    fn three_leaves_truncated() {
        let t = build_tree(3, TreeCompletion::Truncated).unwrap();
        assert_eq!(
            rows(&t),
            vec![
                vec![1, 0, 0],
                vec![0, 1, 0],
                vec![1, 1, 0],
                vec![0, 0, 1],
                vec![0, 0, 1],
                vec![1, 1, 1],
            ]
        );
        assert_eq!(t.levels(), 3);
    }

    #[test]
    fn three_leaves_balanced() {
        let t = build_tree(3, TreeCompletion::Balanced).unwrap();
        assert_eq!(
            rows(&t),
            vec![
                vec![1, 0, 0],
                vec![0, 1, 0],
                vec![0, 0, 1],
                vec![0, 1, 1],
                vec![1, 1, 1],
            ]
        );
    }

    #[test]
    fn power_of_two_column_sums() {
        for n in [1usize, 2, 4, 8, 64] {
            for completion in [TreeCompletion::Balanced, TreeCompletion::Truncated] {
                let t = build_tree(n, completion).unwrap();
                let c = t.to_dense();
                assert_eq!(c.nrows(), 2 * n - 1);
                for j in 0..n {
                    assert_eq!(c.column(j).sum() as usize, t.levels());
                }
            }
        }
    }

    #[test]
    fn two_leaf_hand_computation() {
        // A C^+ = [[2, -1, 1], [1, 1, 2]] / 3, rows of squared norm 2/3;
        // u(0, 1) maps to (1, 1, 2)
        let s = ParticipationSchema::new(2, 1, 2).unwrap();
        let l = eval_tree(&s).unwrap();
        assert_relative_eq!(l.sens, 6f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l.max_error, (2.0f64 / 3.0).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l.rms_error, (2.0f64 / 3.0).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l.max_loss, 2.0, epsilon = 1e-13);
        assert_eq!(l.sens_method, SensMethod::LowerBound);
    }

    #[test]
    fn single_participation_is_root_levels() {
        let s = ParticipationSchema::new(16, 16, 1).unwrap();
        let l = eval_tree(&s).unwrap();
        assert_eq!(tree_levels(16), 5);
        assert_relative_eq!(l.sens, 5f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn decoder_matches_svd_pseudoinverse() {
        for n in [3usize, 5, 12, 17] {
            for completion in [TreeCompletion::Balanced, TreeCompletion::Truncated] {
                let t = build_tree(n, completion).unwrap();
                let c = t.to_dense();
                let pinv = c.clone().pseudo_inverse(1e-12).unwrap();
                let expected = prefix_sum_matrix(n) * pinv;
                let got = t.full_decoder().unwrap();
                assert!((expected - got).abs().max() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn oversized_tree_refused() {
        assert!(matches!(
            build_tree_matrix(MAX_DENSE_TREE_ROUNDS + 1),
            Err(Error::TooLarge(_))
        ));
        assert!(build_tree_matrix(0).is_err());
    }
}
