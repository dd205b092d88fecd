//! REML baseline with inverse-variance weights.
//!
//! The marginal covariance of cluster g is
//! V_g = diag(τ² + v²_gi) + (ω² + Z_g Ω Z_gᵀ) J_g, a diagonal plus a
//! rank-one term, so V_g⁻¹ and log|V_g| come from the Sherman–Morrison
//! identity in O(K_g). The restricted log-likelihood (without the 2π
//! constant) is
//!
//! ℓ_R = −½ [Σ_g log|V_g| + log|XᵀV⁻¹X| + rᵀV⁻¹r],  r = T − Xβ̂_GLS.
//!
//! Maximization is by Nelder–Mead over softplus-transformed (τ², ω²) from
//! several starts; profile-likelihood intervals are calibrated by χ²₁.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::model::Dataset;
use crate::optim::{self, NelderMeadOptions};

/// Bisection tolerance on profile-interval endpoints.
pub const PROFILE_TOL: f64 = 1e-6;
/// Largest variance the profile search will bracket to.
pub const PROFILE_CAP: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemlError {
    #[error("restricted likelihood is not finite at tau2 = {tau2}, omega2 = {omega2}")]
    NonFiniteLikelihood { tau2: f64, omega2: f64 },
    #[error("REML fit did not converge")]
    FitNotConverged,
    #[error("profile-likelihood {side} limit for {component} did not converge")]
    NotConverged {
        component: Component,
        side: &'static str,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Tau2,
    Omega2,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Tau2 => "tau2",
            Component::Omega2 => "omega2",
        })
    }
}

/// GLS quantities at fixed variance components.
#[derive(Debug, Clone, PartialEq)]
pub struct Gls {
    pub beta: DVector<f64>,
    /// (XᵀV⁻¹X)⁻¹.
    pub cov_beta: DMatrix<f64>,
    pub loglik: f64,
}

/// Data for the marginal three-level model.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    t: Vec<f64>,
    x: DMatrix<f64>,
    v2: Vec<f64>,
    ranges: Vec<Range<usize>>,
    known_var: Vec<f64>,
}

impl RemlProblem {
    pub fn new(
        t: Vec<f64>,
        x: DMatrix<f64>,
        v2: Vec<f64>,
        cluster_sizes: &[usize],
        known_var: Vec<f64>,
    ) -> Result<Self, RemlError> {
        let k = t.len();
        if x.nrows() != k || v2.len() != k || cluster_sizes.iter().sum::<usize>() != k {
            return Err(RemlError::DimensionMismatch(format!(
                "T has {k} rows, X {}, v2 {}, clusters cover {}",
                x.nrows(),
                v2.len(),
                cluster_sizes.iter().sum::<usize>()
            )));
        }
        if known_var.len() != cluster_sizes.len() {
            return Err(RemlError::DimensionMismatch("one known variance per cluster".into()));
        }
        let mut ranges = Vec::with_capacity(cluster_sizes.len());
        let mut start = 0;
        for &kg in cluster_sizes {
            ranges.push(start..start + kg);
            start += kg;
        }
        Ok(RemlProblem {
            t,
            x,
            v2,
            ranges,
            known_var,
        })
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let sizes: Vec<usize> = dataset.clusters().iter().map(|c| c.len()).collect();
        RemlProblem::new(
            dataset.studies().map(|s| s.t).collect(),
            dataset.marginal_design(),
            dataset.v2(),
            &sizes,
            dataset.known_cluster_variance(),
        )
        .expect("validated dataset has consistent dimensions")
    }

    pub fn num_clusters(&self) -> usize {
        self.ranges.len()
    }

    pub fn gls(&self, tau2: f64, omega2: f64) -> Result<Gls, RemlError> {
        let nonfinite = || RemlError::NonFiniteLikelihood { tau2, omega2 };
        if !(tau2 >= 0.0 && omega2 >= 0.0) {
            return Err(nonfinite());
        }
        let pf = self.x.ncols();
        let mut xtvx = DMatrix::<f64>::zeros(pf, pf);
        let mut xtvt = DVector::<f64>::zeros(pf);
        let mut log_det_v = 0.0;
        // per cluster: (w, κ) with V_g⁻¹ = diag(w) − κ w wᵀ
        let mut parts = Vec::with_capacity(self.ranges.len());
        for (g, rows) in self.ranges.iter().enumerate() {
            let c = omega2 + self.known_var[g];
            let mut w = Vec::with_capacity(rows.len());
            let mut s = 0.0;
            for i in rows.clone() {
                let d = tau2 + self.v2[i];
                if d.is_nan() || d <= 0.0 {
                    return Err(nonfinite());
                }
                log_det_v += d.ln();
                w.push(1.0 / d);
                s += 1.0 / d;
            }
            log_det_v += (c * s).ln_1p();
            let kappa = c / (1.0 + c * s);

            let mut xw = DVector::<f64>::zeros(pf);
            let mut wt = 0.0;
            for (i, row) in rows.clone().enumerate() {
                wt += w[i] * self.t[row];
                for a in 0..pf {
                    xw[a] += self.x[(row, a)] * w[i];
                    xtvt[a] += self.x[(row, a)] * w[i] * self.t[row];
                    for b in 0..pf {
                        xtvx[(a, b)] += self.x[(row, a)] * w[i] * self.x[(row, b)];
                    }
                }
            }
            for a in 0..pf {
                xtvt[a] -= kappa * xw[a] * wt;
                for b in 0..pf {
                    xtvx[(a, b)] -= kappa * xw[a] * xw[b];
                }
            }
            parts.push((w, kappa));
        }
        let cov_beta = linalg::spd_inverse(&xtvx)?;
        let beta = &cov_beta * &xtvt;
        let log_det_xtvx = linalg::spd_log_det(&xtvx)?;

        let mut quad = 0.0;
        for (rows, (w, kappa)) in self.ranges.iter().zip(&parts) {
            let mut wr = 0.0;
            for (i, row) in rows.clone().enumerate() {
                let fitted: f64 = (0..pf).map(|a| self.x[(row, a)] * beta[a]).sum();
                let r = self.t[row] - fitted;
                quad += w[i] * r * r;
                wr += w[i] * r;
            }
            quad -= kappa * wr * wr;
        }
        let loglik = -0.5 * (log_det_v + log_det_xtvx + quad);
        if !loglik.is_finite() {
            return Err(nonfinite());
        }
        Ok(Gls {
            beta,
            cov_beta,
            loglik,
        })
    }

    pub fn loglik(&self, tau2: f64, omega2: f64) -> Result<f64, RemlError> {
        self.gls(tau2, omega2).map(|g| g.loglik)
    }

    /// max over the other component of ℓ_R with `which` held at `value`.
    pub fn profile_loglik(&self, which: Component, value: f64, hint: f64) -> f64 {
        let eval = |other: f64| {
            let (tau2, omega2) = match which {
                Component::Tau2 => (value, other),
                Component::Omega2 => (other, value),
            };
            self.loglik(tau2, omega2.max(0.0)).map_or(f64::INFINITY, |l| -l)
        };
        let mut upper = (4.0 * hint).max(1.0);
        loop {
            let (arg, neg) = optim::brent_min(eval, 0.0, upper, 1e-9, 200);
            if arg < 0.95 * upper || upper >= PROFILE_CAP {
                return -neg;
            }
            upper *= 4.0;
        }
    }
}

/// Standalone restricted log-likelihood (see [`RemlProblem::loglik`]).
pub fn reml_loglik(
    tau2: f64,
    omega2: f64,
    t: &[f64],
    x: &DMatrix<f64>,
    v2: &[f64],
    cluster_sizes: &[usize],
) -> Result<f64, RemlError> {
    let problem = RemlProblem::new(
        t.to_vec(),
        x.clone(),
        v2.to_vec(),
        cluster_sizes,
        vec![0.0; cluster_sizes.len()],
    )?;
    problem.loglik(tau2, omega2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlEstimate {
    pub tau2: f64,
    pub omega2: f64,
    /// Inverse-variance GLS estimate of the first fixed effect.
    pub delta_iv: f64,
    pub beta: DVector<f64>,
    pub se_delta: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlFit {
    pub converged: bool,
    /// Present only when `converged`.
    pub estimate: Option<RemlEstimate>,
    pub iterations: usize,
    pub pl_ci_tau2: Option<(f64, f64)>,
    pub pl_ci_omega2: Option<(f64, f64)>,
    pub pl_converged_tau2: bool,
    pub pl_converged_omega2: bool,
}

impl RemlFit {
    fn failed(iterations: usize) -> Self {
        RemlFit {
            converged: false,
            estimate: None,
            iterations,
            pl_ci_tau2: None,
            pl_ci_omega2: None,
            pl_converged_tau2: false,
            pl_converged_omega2: false,
        }
    }

    /// Fills in both profile-likelihood intervals.
    pub fn with_profile_intervals(mut self, problem: &RemlProblem, alpha: f64) -> Self {
        if !self.converged {
            return self;
        }
        let tau = profile_ci(problem, &self, Component::Tau2, alpha);
        let omega = profile_ci(problem, &self, Component::Omega2, alpha);
        self.pl_converged_tau2 = tau.is_ok();
        self.pl_converged_omega2 = omega.is_ok();
        self.pl_ci_tau2 = tau.ok();
        self.pl_ci_omega2 = omega.ok();
        self
    }
}

/// Maximizes ℓ_R over (τ², ω²) ≥ 0.
///
/// `seed` is an optional moment-based starting point; the fit always also
/// starts near the origin and from a perturbed copy of the seed, keeping
/// the best converged run.
pub fn reml_fit(problem: &RemlProblem, seed: Option<(f64, f64)>) -> RemlFit {
    let objective = |x: &[f64]| {
        problem
            .loglik(optim::softplus(x[0]), optim::softplus(x[1]))
            .map_or(f64::INFINITY, |l| -l)
    };
    let natural = |x: &[f64]| vec![optim::softplus(x[0]), optim::softplus(x[1])];
    let (s_tau, s_omega) = seed.unwrap_or((0.1, 0.1));
    let (s_tau, s_omega) = (s_tau.max(1e-3), s_omega.max(1e-3));
    let starts = [
        (1e-2, 1e-2),
        (s_tau, s_omega),
        (4.0 * s_tau + 0.05, 0.25 * s_omega + 0.01),
    ];

    let opts = NelderMeadOptions::default();
    let mut best: Option<optim::Minimum> = None;
    let mut iterations = 0;
    for (tau, omega) in starts {
        let x0 = [optim::softplus_inv(tau), optim::softplus_inv(omega)];
        let run = optim::nelder_mead(objective, natural, &x0, opts);
        iterations += run.iterations;
        if run.converged && run.value.is_finite() && best.as_ref().map_or(true, |b| run.value < b.value) {
            best = Some(run);
        }
    }
    let Some(best) = best else {
        return RemlFit::failed(iterations);
    };
    // the softplus map never reaches zero; values under the simplex
    // tolerance are on the boundary
    let snap = |x: f64| if x < opts.x_tol { 0.0 } else { x };
    let (tau2, omega2) = (snap(optim::softplus(best.x[0])), snap(optim::softplus(best.x[1])));
    let Ok(gls) = problem.gls(tau2, omega2) else {
        return RemlFit::failed(iterations);
    };
    RemlFit {
        converged: true,
        estimate: Some(RemlEstimate {
            tau2,
            omega2,
            delta_iv: gls.beta[0],
            se_delta: gls.cov_beta[(0, 0)].max(0.0).sqrt(),
            beta: gls.beta,
            loglik: gls.loglik,
        }),
        iterations,
        pl_ci_tau2: None,
        pl_ci_omega2: None,
        pl_converged_tau2: false,
        pl_converged_omega2: false,
    }
}

/// Profile-likelihood interval: the set where 2(ℓ̂ − ℓ_p(θ)) <= χ²₁(1 − α).
pub fn profile_ci(
    problem: &RemlProblem,
    fit: &RemlFit,
    which: Component,
    alpha: f64,
) -> Result<(f64, f64), RemlError> {
    let est = fit.estimate.as_ref().ok_or(RemlError::FitNotConverged)?;
    let crit = ChiSquared::new(1.0)
        .expect("one degree of freedom")
        .inverse_cdf(1.0 - alpha);
    let (theta_hat, other_hat) = match which {
        Component::Tau2 => (est.tau2, est.omega2),
        Component::Omega2 => (est.omega2, est.tau2),
    };
    let profile = |theta: f64| problem.profile_loglik(which, theta, other_hat);
    let l_hat = est.loglik.max(profile(theta_hat));
    let deviance = |theta: f64| 2.0 * (l_hat - profile(theta));

    let bisect = |mut inside: f64, mut outside: f64| {
        while (outside - inside).abs() > PROFILE_TOL {
            let mid = 0.5 * (inside + outside);
            if deviance(mid) <= crit {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        0.5 * (inside + outside)
    };

    let lo = if theta_hat <= 0.0 || deviance(0.0) <= crit {
        0.0
    } else {
        bisect(theta_hat, 0.0)
    };

    let mut inside = theta_hat;
    let mut step = theta_hat.max(0.01);
    let mut outside = theta_hat + step;
    while deviance(outside) <= crit {
        if outside >= PROFILE_CAP {
            return Err(RemlError::NotConverged {
                component: which,
                side: "upper",
            });
        }
        inside = outside;
        step *= 2.0;
        outside = (theta_hat + step).min(PROFILE_CAP);
    }
    let hi = bisect(inside, outside);
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> RemlProblem {
        let t = vec![0.3, 0.5, 0.1, 0.9, 0.7, 0.2, 0.4, -0.1, 0.6, 0.8];
        let v2 = vec![0.1, 0.12, 0.09, 0.2, 0.15, 0.11, 0.1, 0.13, 0.1, 0.14];
        RemlProblem::new(t, DMatrix::from_element(10, 1, 1.0), v2, &[2, 2, 3, 3], vec![0.0; 4]).unwrap()
    }

    #[test]
    fn sherman_morrison_matches_dense_inverse() {
        let d = [0.3, 0.5, 0.25, 0.4, 0.35];
        let c = 0.17;
        let s: f64 = d.iter().map(|x| 1.0 / x).sum();
        let kappa = c / (1.0 + c * s);
        let sm = DMatrix::from_fn(5, 5, |i, j| {
            let diag = if i == j { 1.0 / d[i] } else { 0.0 };
            diag - kappa / (d[i] * d[j])
        });
        let v = DMatrix::from_fn(5, 5, |i, j| if i == j { d[i] } else { 0.0 } + c);
        let dense = v.clone().lu().try_inverse().unwrap();
        assert!((sm - dense).norm() < 1e-10);
    }

    #[test]
    fn two_study_log_determinant() {
        // V = [[0.4, 0.1], [0.1, 0.4]]
        let closed = (0.4f64 * 0.4 - 0.1 * 0.1).ln();
        let sm = 2.0 * 0.3f64.ln() + (0.1f64 * (2.0 / 0.3)).ln_1p();
        assert!((closed - sm).abs() < 1e-12);
    }

    #[test]
    fn reduces_to_two_level_without_omega() {
        let p = problem();
        let tau2 = 0.05;
        let t = &p.t;
        let w: Vec<f64> = p.v2.iter().map(|v| 1.0 / (v + tau2)).collect();
        let sw: f64 = w.iter().sum();
        let mu = w.iter().zip(t).map(|(w, t)| w * t).sum::<f64>() / sw;
        let direct = -0.5
            * (p.v2.iter().map(|v| (v + tau2).ln()).sum::<f64>()
                + sw.ln()
                + w.iter().zip(t).map(|(w, t)| w * (t - mu).powi(2)).sum::<f64>());
        assert!((p.loglik(tau2, 0.0).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn loglik_invariant_to_cluster_order() {
        let p = problem();
        // clusters visited as (3, 2, 0, 1), rows reversed inside each
        let mut t = Vec::new();
        let mut v2 = Vec::new();
        let mut sizes = Vec::new();
        for g in [3, 2, 0, 1] {
            let rows = p.ranges[g].clone();
            sizes.push(rows.len());
            for i in rows.rev() {
                t.push(p.t[i]);
                v2.push(p.v2[i]);
            }
        }
        let q = RemlProblem::new(t, DMatrix::from_element(10, 1, 1.0), v2, &sizes, vec![0.0; 4]).unwrap();
        for &(a, b) in &[(0.0, 0.0), (0.05, 0.1), (0.3, 0.02)] {
            let l1 = p.loglik(a, b).unwrap();
            let l2 = q.loglik(a, b).unwrap();
            assert!((l1 - l2).abs() < 1e-10, "{l1} vs {l2}");
        }
    }

    #[test]
    fn optimum_has_no_improving_axis_step() {
        let p = problem();
        let fit = reml_fit(&p, None);
        assert!(fit.converged);
        let e = fit.estimate.unwrap();
        for (dt, dw) in [(1e-4, 0.0), (-1e-4, 0.0), (0.0, 1e-4), (0.0, -1e-4)] {
            let (t, w) = (e.tau2 + dt, e.omega2 + dw);
            if t < 0.0 || w < 0.0 {
                continue;
            }
            assert!(p.loglik(t, w).unwrap() <= e.loglik + 1e-6);
        }
    }

    #[test]
    fn profile_endpoints_hit_critical_deviance() {
        let p = problem();
        let fit = reml_fit(&p, None);
        let e = fit.estimate.clone().unwrap();
        let (lo, hi) = profile_ci(&p, &fit, Component::Omega2, 0.05).unwrap();
        assert!(lo <= e.omega2 && e.omega2 <= hi);
        let l_hat = e.loglik.max(p.profile_loglik(Component::Omega2, e.omega2, e.tau2));
        let dev = 2.0 * (l_hat - p.profile_loglik(Component::Omega2, hi, e.tau2));
        assert!((dev - 3.841458820694124).abs() < 1e-3, "{dev}");
    }

    #[test]
    fn negative_components_are_rejected() {
        assert!(problem().loglik(-0.1, 0.0).is_err());
    }
}
