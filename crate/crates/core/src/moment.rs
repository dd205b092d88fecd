//! Fixed-weight moment estimation for the three-level model.
//!
//! Level 2 (within clusters): with a fixed symmetric weight matrix A,
//! β̂_A = (XᵀAX)⁻¹XᵀAT, Q_A = Tᵀ A (I − H_A) T, and
//! τ̂² = max((Q_A − Σ c_ii v²_i) / Σ c_ii, 0) where c_ii is the diagonal of
//! C = A(I − H_A).
//!
//! Level 3 (between clusters): with fixed F, γ̂_F = (WᵀFW)⁻¹WᵀF â_0,
//! Q_F = â_0ᵀ F (I − H_F) â_0, and ω̂² from Q_F after subtracting the
//! conditional variance of each â_0g and the known Z_g Ω Z_gᵀ.
//!
//! Because the weights do not depend on the variance components, the two
//! levels are estimated one after the other with no iteration.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::model::{Dataset, WeightSpec};
use crate::qform::{self, QFormError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("normal matrix XᵀAX (or WᵀFW) is singular or not positive definite")]
    SingularNormalMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    QForm(#[from] QFormError),
}

impl From<LinalgError> for MomentError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::SingularNormalMatrix => MomentError::SingularNormalMatrix,
            other => MomentError::QForm(QFormError::Linalg(other)),
        }
    }
}

/// H = X (XᵀAX)⁻¹ XᵀA.
pub fn hat_matrix(x: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>, MomentError> {
    let xta = x.transpose() * a;
    let normal = &xta * x;
    let h = x * linalg::spd_solve(&normal, &xta)?;
    #[cfg(debug_assertions)]
    {
        let scale = h.norm().max(1.0);
        debug_assert!((&h * &h - &h).norm() <= 1e-10 * scale, "H is not idempotent");
        debug_assert!(
            (h.transpose() * a - a * &h).norm() <= 1e-10 * scale * a.norm().max(1.0),
            "HᵀA != AH"
        );
    }
    Ok(h)
}

/// Within-cluster (level-2) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Level2Fit {
    /// (â_01, …, â_0M, β̂_0).
    pub beta_hat: DVector<f64>,
    pub q_a: f64,
    /// C = A(I − H_A).
    pub c_matrix: DMatrix<f64>,
    pub c_diag: Vec<f64>,
    pub tau2_hat: f64,
    /// Moment estimate before truncation at zero.
    pub tau2_untruncated: f64,
    /// b_gi: the weights that map cluster g's T_gi onto â_0g.
    pub b_weights: Vec<Vec<f64>>,
    /// Var(â_0g | a_0g) at (τ̂², v²).
    pub cond_var_a0: Vec<f64>,
}

impl Level2Fit {
    pub fn a0_hat(&self) -> &[f64] {
        &self.beta_hat.as_slice()[..self.b_weights.len()]
    }
}

/// General level-2 fit for any fixed symmetric positive-definite A.
///
/// `cluster_sizes` gives K_g in stacked order; the first M columns of `x`
/// must be the cluster intercepts.
pub fn fit_level2(
    t: &DVector<f64>,
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    v2: &[f64],
    cluster_sizes: &[usize],
) -> Result<Level2Fit, MomentError> {
    let k = t.len();
    if x.nrows() != k || a.shape() != (k, k) || v2.len() != k {
        return Err(MomentError::DimensionMismatch(format!(
            "T has {k} rows, X is {}x{}, A is {}x{}, v2 has {}",
            x.nrows(),
            x.ncols(),
            a.nrows(),
            a.ncols(),
            v2.len()
        )));
    }
    if cluster_sizes.iter().sum::<usize>() != k || cluster_sizes.len() > x.ncols() {
        return Err(MomentError::DimensionMismatch("cluster sizes do not match T".into()));
    }
    let xta = x.transpose() * a;
    let normal = &xta * x;
    // B = (XᵀAX)⁻¹XᵀA maps T onto β̂
    let b = linalg::spd_solve(&normal, &xta)?;
    let beta_hat = &b * t;
    let h = x * &b;
    let c_matrix = a - a * &h;
    let c_matrix = (&c_matrix + c_matrix.transpose()) * 0.5;
    let q_a = (t.transpose() * &c_matrix * t)[(0, 0)];
    let c_diag: Vec<f64> = (0..k).map(|i| c_matrix[(i, i)]).collect();
    let (tau2_hat, tau2_untruncated) = tau2_from_q(q_a, &c_diag, v2);

    let mut b_weights = Vec::with_capacity(cluster_sizes.len());
    let mut start = 0;
    for (g, &kg) in cluster_sizes.iter().enumerate() {
        b_weights.push((start..start + kg).map(|j| b[(g, j)]).collect());
        start += kg;
    }
    let cond_var_a0 = (0..cluster_sizes.len())
        .map(|g| (0..k).map(|j| b[(g, j)].powi(2) * (tau2_hat + v2[j])).sum())
        .collect();

    Ok(Level2Fit {
        beta_hat,
        q_a,
        c_matrix,
        c_diag,
        tau2_hat,
        tau2_untruncated,
        b_weights,
        cond_var_a0,
    })
}

/// Level-2 fit for diagonal weights and no level-2 covariates: â_0g is the
/// weighted cluster mean and C is block diagonal. Agrees with
/// [`fit_level2`] but costs O(𝒦) apart from materializing C.
pub fn fit_level2_diagonal(
    t: &[f64],
    weights: &[f64],
    v2: &[f64],
    cluster_sizes: &[usize],
) -> Result<Level2Fit, MomentError> {
    let k = t.len();
    if weights.len() != k || v2.len() != k || cluster_sizes.iter().sum::<usize>() != k {
        return Err(MomentError::DimensionMismatch(format!(
            "T has {k} entries, weights {}, v2 {}",
            weights.len(),
            v2.len()
        )));
    }
    let m = cluster_sizes.len();
    let mut beta = Vec::with_capacity(m);
    let mut b_weights = Vec::with_capacity(m);
    let mut c_matrix = DMatrix::zeros(k, k);
    let mut q_a = 0.0;
    let mut start = 0;
    for &kg in cluster_sizes {
        let rows = start..start + kg;
        let total: f64 = weights[rows.clone()].iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(MomentError::SingularNormalMatrix);
        }
        let a0 = rows.clone().map(|i| weights[i] * t[i]).sum::<f64>() / total;
        q_a += rows.clone().map(|i| weights[i] * (t[i] - a0).powi(2)).sum::<f64>();
        for i in rows.clone() {
            for j in rows.clone() {
                let diag = if i == j { weights[i] } else { 0.0 };
                c_matrix[(i, j)] = diag - weights[i] * weights[j] / total;
            }
        }
        beta.push(a0);
        b_weights.push(rows.map(|i| weights[i] / total).collect::<Vec<f64>>());
        start += kg;
    }
    let c_diag: Vec<f64> = (0..k).map(|i| c_matrix[(i, i)]).collect();
    let (tau2_hat, tau2_untruncated) = tau2_from_q(q_a, &c_diag, v2);
    let mut start = 0;
    let cond_var_a0 = b_weights
        .iter()
        .map(|bg| {
            let v = bg
                .iter()
                .enumerate()
                .map(|(i, b)| b * b * (tau2_hat + v2[start + i]))
                .sum();
            start += bg.len();
            v
        })
        .collect();
    Ok(Level2Fit {
        beta_hat: DVector::from_vec(beta),
        q_a,
        c_matrix,
        c_diag,
        tau2_hat,
        tau2_untruncated,
        b_weights,
        cond_var_a0,
    })
}

fn tau2_from_q(q_a: f64, c_diag: &[f64], v2: &[f64]) -> (f64, f64) {
    let c_sum: f64 = c_diag.iter().sum();
    if c_sum <= 0.0 {
        // every cluster has a single study: nothing to estimate τ² from
        return (0.0, 0.0);
    }
    let expected_within: f64 = c_diag.iter().zip(v2).map(|(c, v)| c * v).sum();
    let raw = (q_a - expected_within) / c_sum;
    (raw.max(0.0), raw)
}

/// Between-cluster (level-3) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Level3Fit {
    pub gamma_hat: DVector<f64>,
    pub q_f: f64,
    /// P = F(I − H_F).
    pub p_matrix: DMatrix<f64>,
    pub p_diag: Vec<f64>,
    pub omega2_hat: f64,
    pub omega2_untruncated: f64,
    /// Cov(γ̂_F) at (τ̂², ω̂², v²).
    pub cov_gamma: DMatrix<f64>,
    pub se_gamma: Vec<f64>,
    /// Var(â_0g | a_0g) + Z_g Ω Z_gᵀ; the level-3 null variance of â_0g.
    pub base_var_a0: Vec<f64>,
    /// Estimated unconditional Var(â_0g).
    pub var_a0_uncond: Vec<f64>,
}

/// Level-3 fit on top of a level-2 fit.
///
/// `known_var` is Z_g Ω Z_gᵀ for each cluster (all zero when r = 0).
pub fn fit_level3(
    level2: &Level2Fit,
    w: &DMatrix<f64>,
    f: &DMatrix<f64>,
    known_var: &[f64],
) -> Result<Level3Fit, MomentError> {
    let a0 = DVector::from_column_slice(level2.a0_hat());
    let m = a0.len();
    if w.nrows() != m || f.shape() != (m, m) || known_var.len() != m {
        return Err(MomentError::DimensionMismatch(format!(
            "M = {m}, W is {}x{}, F is {}x{}, known variances {}",
            w.nrows(),
            w.ncols(),
            f.nrows(),
            f.ncols(),
            known_var.len()
        )));
    }
    let wtf = w.transpose() * f;
    let normal = &wtf * w;
    let g = linalg::spd_solve(&normal, &wtf)?;
    let gamma_hat = &g * &a0;
    let h = w * &g;
    let p_matrix = f - f * &h;
    let p_matrix = (&p_matrix + p_matrix.transpose()) * 0.5;
    let q_f = (a0.transpose() * &p_matrix * &a0)[(0, 0)];
    let p_diag: Vec<f64> = (0..m).map(|i| p_matrix[(i, i)]).collect();

    let base_var_a0: Vec<f64> = level2
        .cond_var_a0
        .iter()
        .zip(known_var)
        .map(|(c, z)| c + z)
        .collect();
    let p_sum: f64 = p_diag.iter().sum();
    let omega2_untruncated = if p_sum > 0.0 {
        (q_f - p_diag.iter().zip(&base_var_a0).map(|(p, v)| p * v).sum::<f64>()) / p_sum
    } else {
        0.0
    };
    let omega2_hat = omega2_untruncated.max(0.0);

    let var_a0_uncond: Vec<f64> = base_var_a0.iter().map(|v| v + omega2_hat).collect();
    let cov_a0 = DMatrix::from_diagonal(&DVector::from_column_slice(&var_a0_uncond));
    let cov_gamma = &g * cov_a0 * g.transpose();
    let se_gamma = (0..cov_gamma.nrows()).map(|i| cov_gamma[(i, i)].max(0.0).sqrt()).collect();

    Ok(Level3Fit {
        gamma_hat,
        q_f,
        p_matrix,
        p_diag,
        omega2_hat,
        omega2_untruncated,
        cov_gamma,
        se_gamma,
        base_var_a0,
        var_a0_uncond,
    })
}

/// Source of the critical value for a Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Critical {
    Normal,
    /// Student t with the given degrees of freedom.
    T(u32),
}

impl Critical {
    pub fn value(self, alpha: f64) -> f64 {
        let p = 1.0 - alpha / 2.0;
        match self {
            Critical::Normal => Normal::standard().inverse_cdf(p),
            Critical::T(df) => StudentsT::new(0.0, 1.0, f64::from(df.max(1)))
                .expect("positive degrees of freedom")
                .inverse_cdf(p),
        }
    }
}

/// estimate ± c · se.
pub fn delta_interval(estimate: f64, se: f64, crit: Critical, alpha: f64) -> (f64, f64) {
    let half = crit.value(alpha) * se;
    (estimate - half, estimate + half)
}

/// Options for the full moment pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentOptions {
    pub alpha: f64,
    /// Compute the Q_A / Q_F test-inversion intervals.
    pub intervals: bool,
    /// Compute the heterogeneity-test p-values.
    pub tests: bool,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions {
            alpha: 0.05,
            intervals: true,
            tests: true,
        }
    }
}

/// Everything the moment method reports for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    pub level2: Level2Fit,
    pub level3: Level3Fit,
    /// First level-3 coefficient (δ̂ when W is an intercept).
    pub delta: f64,
    pub se_delta: f64,
    pub ci_delta_normal: (f64, f64),
    pub ci_delta_t: (f64, f64),
    pub q_a_pvalue: Option<f64>,
    pub q_f_pvalue: Option<f64>,
    pub ci_tau2: Option<(f64, f64)>,
    pub ci_omega2: Option<(f64, f64)>,
}

/// Runs both levels with the supplied weights, then the tests and intervals.
pub fn fit_with_weights(
    dataset: &Dataset,
    weights: &WeightSpec,
    opts: MomentOptions,
) -> Result<MomentFit, MomentError> {
    let sizes: Vec<usize> = dataset.clusters().iter().map(|c| c.len()).collect();
    let v2 = dataset.v2();
    let level2 = if dataset.p() == 0 && is_diagonal(&weights.level2) {
        let t: Vec<f64> = dataset.studies().map(|s| s.t).collect();
        let diag: Vec<f64> = weights.level2.diagonal().iter().copied().collect();
        fit_level2_diagonal(&t, &diag, &v2, &sizes)?
    } else {
        let stacked = dataset.stack();
        fit_level2(&stacked.t, &stacked.x, &weights.level2, &v2, &sizes)?
    };
    let level3 = fit_level3(
        &level2,
        &dataset.design_w(),
        &weights.level3,
        &dataset.known_cluster_variance(),
    )?;
    finish(dataset, level2, level3, &v2, opts)
}

/// The effective-sample-size-weighted fit.
pub fn fit_ssw(dataset: &Dataset, opts: MomentOptions) -> Result<MomentFit, MomentError> {
    fit_with_weights(dataset, &WeightSpec::ssw(dataset), opts)
}

fn is_diagonal(a: &DMatrix<f64>) -> bool {
    a.iter().enumerate().all(|(idx, &v)| {
        let (i, j) = (idx % a.nrows(), idx / a.nrows());
        i == j || v == 0.0
    })
}

fn finish(
    dataset: &Dataset,
    level2: Level2Fit,
    level3: Level3Fit,
    v2: &[f64],
    opts: MomentOptions,
) -> Result<MomentFit, MomentError> {
    let m = dataset.num_clusters();
    let delta = level3.gamma_hat[0];
    let se_delta = level3.se_gamma[0];
    let df = (m - 1) as u32;
    let ci_delta_normal = delta_interval(delta, se_delta, Critical::Normal, opts.alpha);
    let ci_delta_t = delta_interval(delta, se_delta, Critical::T(df), opts.alpha);

    let (mut q_a_pvalue, mut q_f_pvalue) = (None, None);
    if opts.tests {
        let l_a = qform::het_test_lambdas(&level2.c_matrix, v2, 0.0)?;
        q_a_pvalue = Some(qform::het_test(level2.q_a, &l_a)?);
        let l_f = qform::het_test_lambdas(&level3.p_matrix, &level3.base_var_a0, 0.0)?;
        q_f_pvalue = Some(qform::het_test(level3.q_f, &l_f)?);
    }

    let (mut ci_tau2, mut ci_omega2) = (None, None);
    if opts.intervals {
        ci_tau2 = Some(qform::invert_ci(
            level2.q_a,
            |tau2| qform::het_test_lambdas(&level2.c_matrix, v2, tau2),
            opts.alpha,
        )?);
        ci_omega2 = Some(qform::invert_ci(
            level3.q_f,
            |omega2| qform::het_test_lambdas(&level3.p_matrix, &level3.base_var_a0, omega2),
            opts.alpha,
        )?);
    }

    Ok(MomentFit {
        level2,
        level3,
        delta,
        se_delta,
        ci_delta_normal,
        ci_delta_t,
        q_a_pvalue,
        q_f_pvalue,
        ci_tau2,
        ci_omega2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cluster, StudySummary};

    fn dataset(values: &[&[f64]], n_arm: u32) -> Dataset {
        Dataset::new(
            values
                .iter()
                .enumerate()
                .map(|(g, ts)| {
                    Cluster::new(
                        format!("c{g}"),
                        ts.iter()
                            .enumerate()
                            .map(|(i, &t)| StudySummary::new(t, n_arm + i as u32, n_arm, None).unwrap())
                            .collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hat_matrix_on_constants() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let h = hat_matrix(&x, &DMatrix::identity(3, 3)).unwrap();
        assert!(h.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn hat_matrix_is_scale_invariant() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 0.2, 1., 0.5, 1., 0.9]);
        let h1 = hat_matrix(&x, &DMatrix::identity(3, 3)).unwrap();
        let h2 = hat_matrix(&x, &(DMatrix::identity(3, 3) * 2.0)).unwrap();
        assert!((h1 - h2).norm() < 1e-14);
    }

    #[test]
    fn block_hat_matrix_is_idempotent() {
        let d = dataset(&[&[0.1, 0.4], &[0.3, 0.2, 0.9]], 10);
        let x = d.design_x();
        let a = WeightSpec::ssw(&d).level2;
        let h = hat_matrix(&x, &a).unwrap();
        assert!((&h * &h - &h).norm() < 1e-12);
        // zero coupling across clusters, rows of each block sum to one
        assert_eq!(h[(0, 2)], 0.0);
        for i in 0..5 {
            assert!((h.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_effects_give_zero_heterogeneity() {
        let d = dataset(&[&[0.3, 0.3], &[0.3, 0.3, 0.3], &[0.3]], 10);
        let fit = fit_ssw(&d, MomentOptions::default()).unwrap();
        assert!(fit.level2.a0_hat().iter().all(|a| (a - 0.3).abs() < 1e-14));
        assert!(fit.level2.q_a.abs() < 1e-14);
        assert_eq!(fit.level2.tau2_hat, 0.0);
        assert!(fit.level3.q_f.abs() < 1e-14);
        assert_eq!(fit.level3.omega2_hat, 0.0);
        assert!((fit.delta - 0.3).abs() < 1e-14);
    }

    #[test]
    fn general_and_diagonal_paths_agree() {
        let d = dataset(&[&[0.1, 0.4, -0.2], &[0.3, 0.2], &[0.9, 0.5, 0.7]], 12);
        let s = d.stack();
        let w = WeightSpec::ssw(&d);
        let sizes: Vec<usize> = d.clusters().iter().map(|c| c.len()).collect();
        let general = fit_level2(&s.t, &s.x, &w.level2, &d.v2(), &sizes).unwrap();
        let t: Vec<f64> = s.t.iter().copied().collect();
        let fast = fit_level2_diagonal(&t, &d.n_tilde(), &d.v2(), &sizes).unwrap();
        assert!((general.q_a - fast.q_a).abs() < 1e-12);
        assert!((general.tau2_untruncated - fast.tau2_untruncated).abs() < 1e-12);
        assert!((&general.c_matrix - &fast.c_matrix).norm() < 1e-10);
        for (a, b) in general.cond_var_a0.iter().zip(&fast.cond_var_a0) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in general.b_weights.iter().flatten().zip(fast.b_weights.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn b_weights_sum_to_one() {
        let d = dataset(&[&[0.1, 0.4, -0.2], &[0.3, 0.2]], 12);
        let fit = fit_ssw(&d, MomentOptions::default()).unwrap();
        for bg in &fit.level2.b_weights {
            assert!((bg.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn level3_intercept_is_weighted_mean() {
        let d = dataset(&[&[0.1, 0.4, -0.2], &[0.3, 0.2], &[0.9, 0.5, 0.7]], 12);
        let fit = fit_ssw(&d, MomentOptions::default()).unwrap();
        let nt = d.cluster_n_tilde();
        let a0 = fit.level2.a0_hat();
        let direct: f64 =
            nt.iter().zip(a0).map(|(n, a)| n * a).sum::<f64>() / nt.iter().sum::<f64>();
        assert!((fit.delta - direct).abs() < 1e-14);
    }

    #[test]
    fn zero_se_gives_point_interval() {
        assert_eq!(delta_interval(0.4, 0.0, Critical::T(4), 0.05), (0.4, 0.4));
    }

    #[test]
    fn t_interval_wider_for_five_clusters() {
        let z = Critical::Normal.value(0.05);
        let t = Critical::T(4).value(0.05);
        assert!((z - 1.959964).abs() < 1e-6);
        assert!((t - 2.776445).abs() < 1e-6);
        assert!((t / z - 1.4166).abs() < 1e-3);
    }
}
