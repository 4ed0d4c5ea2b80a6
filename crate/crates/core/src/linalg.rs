//! Small dense linear-algebra helpers on top of nalgebra: SVD-based
//! numerical rank, eigen-decomposition of real matrices with eigenvectors,
//! and matrix norms.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// 2^-40, the default relative rank threshold.
pub const DEFAULT_RANK_FACTOR: f64 = 9.094_947_017_729_282e-13;

/// How singular values are compared against zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTolerance {
    /// `tol = max(rows, cols) * sigma_max * factor`.
    Relative { factor: f64 },
    /// Fixed threshold.
    Absolute { tol: f64 },
}

impl Default for RankTolerance {
    fn default() -> Self {
        RankTolerance::Relative {
            factor: DEFAULT_RANK_FACTOR,
        }
    }
}

impl RankTolerance {
    pub fn scaled(self, s: f64) -> Self {
        match self {
            RankTolerance::Relative { factor } => RankTolerance::Relative { factor: factor * s },
            RankTolerance::Absolute { tol } => RankTolerance::Absolute { tol: tol * s },
        }
    }

    fn threshold(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match *self {
            RankTolerance::Relative { factor } => rows.max(cols) as f64 * sigma_max * factor,
            RankTolerance::Absolute { tol } => tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub threshold: f64,
}

fn rank_from_singular_values(
    mut sv: Vec<f64>,
    rows: usize,
    cols: usize,
    policy: RankTolerance,
) -> RankInfo {
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let threshold = policy.threshold(rows, cols, sigma_max);
    let rank = sv.iter().filter(|&&s| s > threshold).count();
    RankInfo {
        rank,
        singular_values: sv,
        threshold,
    }
}

/// Numerical rank: number of singular values above the policy threshold.
pub fn numerical_rank(m: &DMatrix<f64>, policy: RankTolerance) -> RankInfo {
    if m.nrows() == 0 || m.ncols() == 0 {
        return RankInfo {
            rank: 0,
            singular_values: Vec::new(),
            threshold: 0.0,
        };
    }
    let sv = m.clone().svd(false, false).singular_values;
    rank_from_singular_values(sv.iter().copied().collect(), m.nrows(), m.ncols(), policy)
}

pub fn numerical_rank_complex(m: &DMatrix<Complex64>, policy: RankTolerance) -> RankInfo {
    if m.nrows() == 0 || m.ncols() == 0 {
        return RankInfo {
            rank: 0,
            singular_values: Vec::new(),
            threshold: 0.0,
        };
    }
    let sv = m.clone().svd(false, false).singular_values;
    rank_from_singular_values(sv.iter().copied().collect(), m.nrows(), m.ncols(), policy)
}

pub fn sigma_min_complex(m: &DMatrix<Complex64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Induced infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// LU factorization that refuses numerically singular matrices.
#[derive(Debug, Clone)]
pub struct DenseSolver {
    lu: LU<f64, Dyn, Dyn>,
}

impl DenseSolver {
    /// Returns `None` when the matrix is singular to working precision,
    /// judged by the smallest singular value relative to the largest.
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        if m.nrows() != m.ncols() {
            return None;
        }
        if m.nrows() == 0 {
            return Some(DenseSolver { lu: m.clone().lu() });
        }
        let info = numerical_rank(m, RankTolerance::default());
        if info.rank < m.nrows() {
            return None;
        }
        Some(DenseSolver { lu: m.clone().lu() })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        self.lu.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        self.lu.solve(rhs)
    }
}

/// Eigenvalues of a real square matrix (via the real Schur form).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| Complex64::new(c.re, c.im))
        .collect()
}

/// Eigenvector matrix `R` of `m = R Lambda R^-1`, built from null spaces of
/// `m - lambda I` for each distinct eigenvalue cluster. Returns `None` when
/// the matrix is defective (geometric multiplicity below algebraic).
pub fn eigenvectors(m: &DMatrix<f64>, eigs: &[Complex64]) -> Option<DMatrix<Complex64>> {
    let n = m.nrows();
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let cluster_tol = 1e-8 * scale;
    let mut used = vec![false; eigs.len()];
    let mut columns: Vec<DVector<Complex64>> = Vec::with_capacity(n);
    let mc: DMatrix<Complex64> = m.map(|v| Complex64::new(v, 0.0));
    for i in 0..eigs.len() {
        if used[i] {
            continue;
        }
        let members: Vec<usize> = (0..eigs.len())
            .filter(|&k| !used[k] && (eigs[k] - eigs[i]).norm() <= cluster_tol)
            .collect();
        for &k in &members {
            used[k] = true;
        }
        let mult = members.len();
        let mut shifted = mc.clone();
        for d in 0..n {
            shifted[(d, d)] -= eigs[i];
        }
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t?;
        let sv = &svd.singular_values;
        // singular values are not guaranteed sorted; pick the `mult` smallest
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
        let null_tol = 1e-6 * scale.max(sv.iter().fold(0.0, |a: f64, v| a.max(*v)));
        for &idx in order.iter().take(mult) {
            if sv[idx] > null_tol {
                return None;
            }
            let row = v_t.row(idx);
            columns.push(DVector::from_iterator(n, row.iter().map(|c| c.conj())));
        }
    }
    if columns.len() != n {
        return None;
    }
    Some(DMatrix::from_columns(&columns))
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number_complex(m: &DMatrix<Complex64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Determinant by cofactor expansion. Test oracle for small matrices only.
pub fn cofactor_determinant(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    match n {
        0 => 1.0,
        1 => m[(0, 0)],
        _ => (0..n)
            .map(|col| {
                let minor = m.clone().remove_row(0).remove_column(col);
                let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, col)] * cofactor_determinant(&minor)
            })
            .sum(),
    }
}
