//! Dense linear-algebra helpers shared by the estimators.
//!
//! The symmetric eigensolver is a plain cyclic Jacobi iteration. The
//! matrices it sees are small (at most a few hundred rows) and usually
//! block-diagonal after a cluster-wise weighting, so [`sym_eigenvalues`]
//! splits the matrix into its connected blocks before rotating.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

/// Convergence threshold on the off-diagonal norm, relative to the Frobenius norm.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Symmetry tolerance, relative to the largest absolute entry (or 1).
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |S[{i},{j}] - S[{j},{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("normal matrix is singular or not positive definite")]
    SingularNormalMatrix,
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Columns are the eigenvectors matching `values`.
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

impl SymEigen {
    /// Q diag(values) Q^T.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * lambda * self.vectors.transpose()
    }
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<(), LinalgError> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let scale = s.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..rows {
        for j in (i + 1)..cols {
            let diff = (s[(i, j)] - s[(j, i)]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Cyclic Jacobi on a working copy; returns (diagonal, eigenvectors, sweeps).
fn jacobi_in_place(
    a: &mut DMatrix<f64>,
    want_vectors: bool,
) -> Result<(Option<DMatrix<f64>>, usize), LinalgError> {
    let n = a.nrows();
    let mut v = want_vectors.then(|| DMatrix::<f64>::identity(n, n));

    for sweep in 0..=MAX_SWEEPS {
        let mut off = 0.0;
        let mut fro = 0.0;
        for j in 0..n {
            for i in 0..n {
                let x = a[(i, j)] * a[(i, j)];
                fro += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off.sqrt() <= OFF_DIAGONAL_TOL * fro.sqrt() || off == 0.0 {
            return Ok((v, sweep));
        }
        if sweep == MAX_SWEEPS {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[(r, p)] = new_rp;
                    a[(p, r)] = new_rp;
                    a[(r, q)] = new_rq;
                    a[(q, r)] = new_rq;
                }
                if let Some(v) = v.as_mut() {
                    for r in 0..n {
                        let vrp = v[(r, p)];
                        let vrq = v[(r, q)];
                        v[(r, p)] = c * vrp - s * vrq;
                        v[(r, q)] = s * vrp + c * vrq;
                    }
                }
            }
        }
    }
    Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS })
}

/// Full symmetric eigen-decomposition by cyclic Jacobi rotations.
pub fn eigen_sym(s: &DMatrix<f64>) -> Result<SymEigen, LinalgError> {
    check_symmetric(s)?;
    let mut a = s.clone();
    let (v, sweeps) = jacobi_in_place(&mut a, true)?;
    let v = v.expect("vectors requested");
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Groups of indices that form independent diagonal blocks (connected
/// components of the nonzero off-diagonal pattern).
pub fn diagonal_blocks(s: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = s.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for j in 0..n {
        for i in (j + 1)..n {
            if s[(i, j)] != 0.0 || s[(j, i)] != 0.0 {
                let ri = find(&mut parent, i);
                let rj = find(&mut parent, j);
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
}

/// Eigenvalues only (descending), decomposing independent blocks separately.
///
/// Gives the same spectrum as [`eigen_sym`] but costs O(sum of block³)
/// instead of O(n³) for block-diagonal input.
pub fn sym_eigenvalues(s: &DMatrix<f64>) -> Result<Vec<f64>, LinalgError> {
    check_symmetric(s)?;
    let mut values = Vec::with_capacity(s.nrows());
    for block in diagonal_blocks(s) {
        if block.len() == 1 {
            values.push(s[(block[0], block[0])]);
            continue;
        }
        let mut sub = DMatrix::from_fn(block.len(), block.len(), |i, j| s[(block[i], block[j])]);
        jacobi_in_place(&mut sub, false)?;
        values.extend((0..block.len()).map(|i| sub[(i, i)]));
    }
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Solves (a) x = b for symmetric positive-definite `a` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or(LinalgError::SingularNormalMatrix)?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive-definite matrix by Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or(LinalgError::SingularNormalMatrix)?;
    Ok(chol.inverse())
}

/// log|a| for symmetric positive-definite `a`.
pub fn spd_log_det(a: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or(LinalgError::SingularNormalMatrix)?;
    let l = chol.l_dirty();
    Ok((0..a.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Singular values of `x`, descending.
pub fn singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = x.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical column rank: singular values above `rel_tol` times the largest.
pub fn column_rank(x: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(x);
    let Some(&largest) = sv.first() else {
        return 0;
    };
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * largest).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(n: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let m = DMatrix::from_fn(n, n, |_, _| next());
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn textbook_two_by_two() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = eigen_sym(&s).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_is_sorted_descending() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, -1.0, 0.0]));
        assert_eq!(eigen_sym(&s).unwrap().values, vec![5.0, 0.0, -1.0]);
        assert_eq!(sym_eigenvalues(&s).unwrap(), vec![5.0, 0.0, -1.0]);
    }

    #[test]
    fn trace_and_determinant_match_random_8x8() {
        let s = lcg_matrix(8, 42);
        let e = eigen_sym(&s).unwrap();
        let trace: f64 = s.trace();
        let sum: f64 = e.values.iter().sum();
        assert!((trace - sum).abs() < 1e-10);
        // determinant through nalgebra's LU, independent of the rotations
        let det = s.clone().lu().determinant();
        let prod: f64 = e.values.iter().product();
        assert!(((det - prod) / det).abs() < 1e-8, "{det} vs {prod}");
        let recon = e.reconstruct();
        assert!((recon - &s).norm() <= 1e-9 * s.norm());
    }

    #[test]
    fn blockwise_spectrum_matches_full() {
        let a = lcg_matrix(3, 7);
        let b = lcg_matrix(4, 9);
        let mut s = DMatrix::zeros(7, 7);
        // interleave the two blocks so the split has to find them
        let ia = [0, 3, 5];
        let ib = [1, 2, 4, 6];
        for (r, &i) in ia.iter().enumerate() {
            for (c, &j) in ia.iter().enumerate() {
                s[(i, j)] = a[(r, c)];
            }
        }
        for (r, &i) in ib.iter().enumerate() {
            for (c, &j) in ib.iter().enumerate() {
                s[(i, j)] = b[(r, c)];
            }
        }
        let blocks = diagonal_blocks(&s);
        assert_eq!(blocks, vec![ia.to_vec(), ib.to_vec()]);
        let full = eigen_sym(&s).unwrap().values;
        let split = sym_eigenvalues(&s).unwrap();
        for (x, y) in full.iter().zip(&split) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(eigen_sym(&s), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn duplicated_column_loses_rank() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 0., 1., 1., 0., 1., 0., 1., 1., 0., 1., 1.]);
        assert_eq!(column_rank(&x, 1e-10), 2);
    }

    #[test]
    fn agrees_with_nalgebra_symmetric_eigen() {
        let s = lcg_matrix(12, 3);
        let ours = eigen_sym(&s).unwrap().values;
        let mut theirs: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
