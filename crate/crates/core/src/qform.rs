//! Distribution of quadratic forms Σ λ_j Z_j² in standard normal variables.
//!
//! [`davies_cdf`] inverts the characteristic function numerically following
//! Davies (1980, Applied Statistics algorithm AS 155): it bounds the
//! truncation error of the integral with the moment generating function,
//! picks an integration step from the range of the distribution, and adds
//! convergence factors when that reduces the number of terms. The result
//! carries a guaranteed error bound.
//!
//! On top of it sit the two heterogeneity tests (for Q_A and Q_F) and the
//! test-inversion confidence interval for a variance component.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{self, LinalgError};

/// Eigenvalues below this fraction of the largest magnitude are dropped.
pub const DEGENERATE_EIGEN_TOL: f64 = 1e-12;
/// Default absolute accuracy of the CDF.
pub const DEFAULT_ACC: f64 = 1e-6;
/// Default limit on integration terms.
pub const DEFAULT_LIM: usize = 100_000;
/// Absolute tolerance on the variance component in [`invert_ci`].
pub const CI_TOL: f64 = 1e-6;
/// Upper cap on the bracketing search in [`invert_ci`].
pub const CI_THETA_CAP: f64 = 1e3;

const LOG28: f64 = 0.0866; // log(2) / 8

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QFormError {
    #[error("invalid quadratic form: {0}")]
    InvalidSpec(String),
    #[error("Davies algorithm could not locate integration parameters within {lim} evaluations")]
    IntegrationParameters { lim: usize },
    #[error("could not bracket the confidence limit below {cap}")]
    BracketingFailed { cap: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Coefficients of a central quadratic form in independent N(0,1) variables.
#[derive(Debug, Clone, PartialEq)]
pub struct QFormSpec {
    pub lambdas: Vec<f64>,
    /// Target absolute accuracy of the CDF.
    pub acc: f64,
    /// Maximum number of integration terms.
    pub lim: usize,
}

impl QFormSpec {
    pub fn new(lambdas: Vec<f64>) -> Self {
        QFormSpec {
            lambdas,
            acc: DEFAULT_ACC,
            lim: DEFAULT_LIM,
        }
    }

    pub fn with_accuracy(mut self, acc: f64, lim: usize) -> Self {
        self.acc = acc;
        self.lim = lim;
        self
    }
}

/// Outcome of a CDF evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaviesCdf {
    /// P(Q <= q), clamped to [0, 1].
    pub prob: f64,
    /// Guaranteed bound on |prob - true CDF|.
    pub err_bound: f64,
    /// False if `acc` could not be met within `lim` terms; `err_bound` then
    /// holds the looser accuracy that was reached.
    pub accuracy_reached: bool,
    /// Round-off may be significant relative to the bound.
    pub roundoff_warning: bool,
    /// Total integration terms used.
    pub terms: usize,
}

/// Drops eigenvalues that are numerically zero relative to the largest one.
pub fn prune_lambdas(lambdas: &[f64]) -> Vec<f64> {
    let max = lambdas.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    if max == 0.0 {
        return Vec::new();
    }
    lambdas
        .iter()
        .copied()
        .filter(|l| l.abs() > DEGENERATE_EIGEN_TOL * max)
        .collect()
}

/// P(Σ λ_j Z_j² <= q).
///
/// Accuracy shortfalls are not fatal: the requested accuracy is relaxed by
/// factors of ten until the integration fits in `lim` terms, and the
/// returned `err_bound` reports what was achieved.
pub fn davies_cdf(q: f64, spec: &QFormSpec) -> Result<DaviesCdf, QFormError> {
    if spec.acc.is_nan() || spec.acc <= 0.0 || spec.lim == 0 {
        return Err(QFormError::InvalidSpec(format!(
            "acc = {}, lim = {}",
            spec.acc, spec.lim
        )));
    }
    if spec.lambdas.iter().any(|l| !l.is_finite()) || !q.is_finite() {
        return Err(QFormError::InvalidSpec("non-finite coefficient or point".into()));
    }
    let mut acc = spec.acc;
    loop {
        let mut engine = Davies::new(&spec.lambdas, q, spec.lim);
        match engine.run(acc) {
            Ok(Outcome::Value { prob, roundoff, terms }) => {
                return Ok(DaviesCdf {
                    prob: prob.clamp(0.0, 1.0),
                    err_bound: acc,
                    accuracy_reached: acc == spec.acc,
                    roundoff_warning: roundoff,
                    terms,
                })
            }
            Ok(Outcome::TooManyTerms) if acc < 0.05 => acc *= 10.0,
            Ok(Outcome::TooManyTerms) | Err(_) => {
                return Err(QFormError::IntegrationParameters { lim: spec.lim })
            }
        }
    }
}

enum Outcome {
    Value { prob: f64, roundoff: bool, terms: usize },
    TooManyTerms,
}

/// Evaluation counter exceeded; mirrors the abort path of the reference code.
struct CountExceeded;

struct Davies<'a> {
    lb: &'a [f64],
    c: f64,
    lim: usize,
    count: usize,
    sigsq: f64,
    lmax: f64,
    lmin: f64,
    mean: f64,
    intl: f64,
    ersm: f64,
    /// Indices of `lb` ordered by decreasing |λ|.
    order: Option<Vec<usize>>,
    fail: bool,
}

fn exp1(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

/// log(1 + x) if `first`, else log(1 + x) - x, accurate for small x.
fn log1(x: f64, first: bool) -> f64 {
    if x.abs() > 0.1 {
        if first {
            x.ln_1p()
        } else {
            x.ln_1p() - x
        }
    } else {
        let mut y = x / (2.0 + x);
        let mut term = 2.0 * y * y * y;
        let mut k = 3.0;
        let mut s = if first { 2.0 } else { -x } * y;
        y *= y;
        let mut s1 = s + term / k;
        while s1 != s {
            k += 2.0;
            term *= y;
            s = s1;
            s1 = s + term / k;
        }
        s
    }
}

impl<'a> Davies<'a> {
    fn new(lb: &'a [f64], c: f64, lim: usize) -> Self {
        Davies {
            lb,
            c,
            lim,
            count: 0,
            sigsq: 0.0,
            lmax: 0.0,
            lmin: 0.0,
            mean: 0.0,
            intl: 0.0,
            ersm: 0.0,
            order: None,
            fail: false,
        }
    }

    fn counter(&mut self) -> Result<(), CountExceeded> {
        self.count += 1;
        if self.count > self.lim {
            Err(CountExceeded)
        } else {
            Ok(())
        }
    }

    /// Bound on the tail probability via the mgf; the cutoff goes to `cx`.
    fn errbd(&mut self, u: f64, cx: &mut f64) -> Result<f64, CountExceeded> {
        self.counter()?;
        let mut xconst = u * self.sigsq;
        let mut sum1 = u * xconst;
        let u = 2.0 * u;
        for &lj in self.lb.iter().rev() {
            let x = u * lj;
            let y = 1.0 - x;
            xconst += lj / y;
            sum1 += x * x / y + log1(-x, false);
        }
        *cx = xconst;
        Ok(exp1(-0.5 * sum1))
    }

    /// Cutoff beyond which the upper (upn > 0) or lower tail has mass < accx.
    fn ctff(&mut self, accx: f64, upn: &mut f64) -> Result<f64, CountExceeded> {
        let mut u2 = *upn;
        let mut u1 = 0.0;
        let mut c1 = self.mean;
        let rb = 2.0 * if u2 > 0.0 { self.lmax } else { self.lmin };
        let mut c2 = 0.0;
        loop {
            let u = u2 / (1.0 + u2 * rb);
            if self.errbd(u, &mut c2)? <= accx {
                break;
            }
            u1 = u2;
            c1 = c2;
            u2 *= 2.0;
        }
        while (c1 - self.mean) / (c2 - self.mean) < 0.9 {
            let u = (u1 + u2) / 2.0;
            let mut xconst = 0.0;
            if self.errbd(u / (1.0 + u * rb), &mut xconst)? > accx {
                u1 = u;
                c1 = xconst;
            } else {
                u2 = u;
                c2 = xconst;
            }
        }
        *upn = u2;
        Ok(c2)
    }

    /// Bound on the integration error from truncating at `u`.
    fn truncation(&mut self, u: f64, tausq: f64) -> Result<f64, CountExceeded> {
        self.counter()?;
        let mut prod2 = 0.0;
        let mut prod3 = 0.0;
        let mut s = 0.0;
        let sum2 = (self.sigsq + tausq) * u * u;
        let mut prod1 = 2.0 * sum2;
        let u = 2.0 * u;
        for &lj in self.lb {
            let x = (u * lj) * (u * lj);
            if x > 1.0 {
                prod2 += x.ln();
                prod3 += log1(x, true);
                s += 1.0;
            } else {
                prod1 += log1(x, true);
            }
        }
        prod2 += prod1;
        prod3 += prod1;
        let x = exp1(-0.25 * prod2) / PI;
        let y = exp1(-0.25 * prod3) / PI;
        let mut err1 = if s == 0.0 { 1.0 } else { x * 2.0 / s };
        let err2 = if prod3 > 1.0 { 2.5 * y } else { 1.0 };
        if err2 < err1 {
            err1 = err2;
        }
        let x = 0.5 * sum2;
        let err2 = if x <= y { 1.0 } else { y / x };
        Ok(if err1 < err2 { err1 } else { err2 })
    }

    /// Finds u with truncation(u) <= accx and truncation(u / 1.2) > accx.
    fn findu(&mut self, utx: &mut f64, accx: f64) -> Result<(), CountExceeded> {
        const DIVIS: [f64; 4] = [2.0, 1.4, 1.2, 1.1];
        let mut ut = *utx;
        let mut u = ut / 4.0;
        if self.truncation(u, 0.0)? > accx {
            u = ut;
            while self.truncation(u, 0.0)? > accx {
                ut *= 4.0;
                u = ut;
            }
        } else {
            ut = u;
            u /= 4.0;
            while self.truncation(u, 0.0)? <= accx {
                ut = u;
                u /= 4.0;
            }
        }
        for d in DIVIS {
            let u = ut / d;
            if self.truncation(u, 0.0)? <= accx {
                ut = u;
            }
        }
        *utx = ut;
        Ok(())
    }

    /// Adds nterm + 1 terms at step `interv`; the auxiliary pass multiplies
    /// the integrand by 1 - exp(-tausq u² / 2).
    fn integrate(&mut self, nterm: usize, interv: f64, tausq: f64, mainx: bool) {
        let inpi = interv / PI;
        for k in (0..=nterm).rev() {
            let u = (k as f64 + 0.5) * interv;
            let mut sum1 = -2.0 * u * self.c;
            let mut sum2 = sum1.abs();
            let mut sum3 = -0.5 * self.sigsq * u * u;
            for &lj in self.lb.iter().rev() {
                let x = 2.0 * lj * u;
                let y = x * x;
                sum3 -= 0.25 * log1(y, true);
                let z = x.atan();
                sum1 += z;
                sum2 += z.abs();
            }
            let mut x = inpi * exp1(sum3) / u;
            if !mainx {
                x *= 1.0 - exp1(-0.5 * tausq * u * u);
            }
            self.intl += (0.5 * sum1).sin() * x;
            self.ersm += 0.5 * sum2 * x;
        }
    }

    /// Coefficient of tausq in the error of the convergence factor at x.
    fn cfe(&mut self, x: f64) -> Result<f64, CountExceeded> {
        self.counter()?;
        if self.order.is_none() {
            let mut idx: Vec<usize> = (0..self.lb.len()).collect();
            idx.sort_by(|&a, &b| self.lb[b].abs().total_cmp(&self.lb[a].abs()));
            self.order = Some(idx);
        }
        let th = self.order.as_ref().expect("ordered above");
        let mut axl = x.abs();
        let sxl = if x > 0.0 { 1.0 } else { -1.0 };
        let mut sum1 = 0.0;
        for j in (0..th.len()).rev() {
            let t = th[j];
            if self.lb[t] * sxl > 0.0 {
                let lj = self.lb[t].abs();
                let axl1 = axl - lj;
                let axl2 = lj / LOG28;
                if axl1 > axl2 {
                    axl = axl1;
                } else {
                    if axl > axl2 {
                        axl = axl2;
                    }
                    sum1 = (axl - axl1) / lj + j as f64;
                    break;
                }
            }
        }
        if sum1 > 100.0 {
            self.fail = true;
            Ok(1.0)
        } else {
            Ok(2f64.powf(sum1 / 4.0) / (PI * axl * axl))
        }
    }

    fn run(&mut self, acc: f64) -> Result<Outcome, CountExceeded> {
        let mut xlim = self.lim as f64;
        let mut sd = self.sigsq;
        for &lj in self.lb {
            sd += lj * lj * 2.0;
            self.mean += lj;
            if self.lmax < lj {
                self.lmax = lj;
            } else if self.lmin > lj {
                self.lmin = lj;
            }
        }
        if sd == 0.0 {
            let prob = if self.c > 0.0 { 1.0 } else { 0.0 };
            return Ok(Outcome::Value {
                prob,
                roundoff: false,
                terms: 0,
            });
        }
        let sd = sd.sqrt();
        let almx = if self.lmax < -self.lmin { -self.lmin } else { self.lmax };

        let mut utx = 16.0 / sd;
        let mut up = 4.5 / sd;
        let mut un = -up;
        let mut acc1 = acc;
        let mut terms = 0usize;

        // truncation point with no convergence factor
        self.findu(&mut utx, 0.5 * acc1)?;
        // does a convergence factor help?
        if self.c != 0.0 && almx > 0.07 * sd {
            let tausq = 0.25 * acc1 / self.cfe(self.c)?;
            if self.fail {
                self.fail = false;
            } else if self.truncation(utx, tausq)? < 0.2 * acc1 {
                self.sigsq += tausq;
                self.findu(&mut utx, 0.25 * acc1)?;
            }
        }
        acc1 *= 0.5;

        loop {
            // range of the distribution; outside it the answer is 0 or 1
            let d1 = self.ctff(acc1, &mut up)? - self.c;
            if d1 < 0.0 {
                return Ok(Outcome::Value {
                    prob: 1.0,
                    roundoff: false,
                    terms,
                });
            }
            let d2 = self.c - self.ctff(acc1, &mut un)?;
            if d2 < 0.0 {
                return Ok(Outcome::Value {
                    prob: 0.0,
                    roundoff: false,
                    terms,
                });
            }
            let intv = 2.0 * PI / d1.max(d2);
            let xnt = utx / intv;
            let xntm = 3.0 / acc1.sqrt();
            if xnt > xntm * 1.5 {
                // auxiliary integration with a convergence factor
                if xntm > xlim {
                    return Ok(Outcome::TooManyTerms);
                }
                let ntm = (xntm + 0.5).floor() as usize;
                let intv1 = utx / ntm as f64;
                let x = 2.0 * PI / intv1;
                if x > self.c.abs() {
                    let tausq =
                        0.33 * acc1 / (1.1 * (self.cfe(self.c - x)? + self.cfe(self.c + x)?));
                    if !self.fail {
                        acc1 *= 0.67;
                        self.integrate(ntm, intv1, tausq, false);
                        xlim -= xntm;
                        self.sigsq += tausq;
                        terms += ntm + 1;
                        self.findu(&mut utx, 0.25 * acc1)?;
                        acc1 *= 0.75;
                        continue;
                    }
                }
            }

            // main integration
            if xnt > xlim {
                return Ok(Outcome::TooManyTerms);
            }
            let nt = (xnt + 0.5).floor() as usize;
            self.integrate(nt, intv, 0.0, true);
            terms += nt + 1;
            let prob = 0.5 - self.intl;

            // is round-off possibly significant?
            let up = self.ersm;
            let x = up + acc / 10.0;
            let roundoff = [1.0, 2.0, 4.0, 8.0].iter().any(|r| r * x == r * up);
            return Ok(Outcome::Value {
                prob,
                roundoff,
                terms,
            });
        }
    }
}

/// Eigenvalues of Σ^{1/2} W Σ^{1/2}, Σ = diag(base_var + null_component),
/// with numerically zero ones removed.
///
/// For Q_A pass W = C = A(I − H_A) and base_var = v²; for Q_F pass
/// W = P = F(I − H_F) and base_var = Σ_i b²_gi(τ̂² + v²_gi) + Z_g Ω Z_gᵀ.
pub fn het_test_lambdas(
    weights: &DMatrix<f64>,
    base_var: &[f64],
    null_component: f64,
) -> Result<Vec<f64>, QFormError> {
    let n = weights.nrows();
    if weights.ncols() != n || base_var.len() != n {
        return Err(QFormError::InvalidSpec(format!(
            "weight matrix {}x{} does not conform to {} variances",
            n,
            weights.ncols(),
            base_var.len()
        )));
    }
    let sd: Vec<f64> = base_var
        .iter()
        .map(|v| (v + null_component).max(0.0).sqrt())
        .collect();
    let s = DMatrix::from_fn(n, n, |i, j| sd[i] * weights[(i, j)] * sd[j]);
    let s = (&s + s.transpose()) * 0.5;
    Ok(prune_lambdas(&linalg::sym_eigenvalues(&s)?))
}

/// Upper-tail p-value P(Q >= q_obs).
pub fn het_test(q_obs: f64, lambdas: &[f64]) -> Result<f64, QFormError> {
    if q_obs <= 0.0 {
        return Ok(1.0);
    }
    let cdf = davies_cdf(q_obs, &QFormSpec::new(lambdas.to_vec()))?;
    Ok((1.0 - cdf.prob).clamp(0.0, 1.0))
}

/// Confidence interval for a variance component by inverting the tail
/// probability of an observed quadratic form.
///
/// `lambda_fn(θ)` gives the eigenvalues of the form when the component
/// equals θ; the upper tail P(Q >= q_obs; θ) must increase with θ. The
/// lower limit solves tail = α/2 and the upper limit tail = 1 − α/2. Limits
/// that would be negative are truncated at zero.
pub fn invert_ci<F>(q_obs: f64, lambda_fn: F, alpha: f64) -> Result<(f64, f64), QFormError>
where
    F: Fn(f64) -> Result<Vec<f64>, QFormError>,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(QFormError::InvalidSpec(format!("alpha = {alpha}")));
    }
    let tail = |theta: f64| -> Result<f64, QFormError> { het_test(q_obs, &lambda_fn(theta)?) };
    let lo_target = alpha / 2.0;
    let hi_target = 1.0 - alpha / 2.0;

    let tail0 = tail(0.0)?;
    if tail0 >= hi_target {
        return Ok((0.0, 0.0));
    }

    let mut theta_max = 1.0;
    let mut tail_max = tail(theta_max)?;
    while tail_max < hi_target {
        if theta_max >= CI_THETA_CAP {
            return Err(QFormError::BracketingFailed { cap: CI_THETA_CAP });
        }
        theta_max = (theta_max * 2.0).min(CI_THETA_CAP);
        tail_max = tail(theta_max)?;
    }
    debug_assert!(tail0 <= tail_max + 1e-6, "tail probability not increasing in theta");

    let solve = |target: f64| -> Result<f64, QFormError> {
        let (mut a, mut b) = (0.0, theta_max);
        while b - a > CI_TOL {
            let mid = 0.5 * (a + b);
            if tail(mid)? < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    };

    let lo = if tail0 >= lo_target { 0.0 } else { solve(lo_target)? };
    let hi = solve(hi_target)?;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cdf(q: f64, l: &[f64]) -> f64 {
        davies_cdf(q, &QFormSpec::new(l.to_vec())).unwrap().prob
    }

    #[test]
    fn chi_square_one_quantile() {
        assert!((cdf(3.841458820694124, &[1.0]) - 0.95).abs() < 1e-4);
    }

    #[test]
    fn chi_square_three_quantile() {
        assert!((cdf(7.814727903251178, &[1.0, 1.0, 1.0]) - 0.95).abs() < 1e-4);
    }

    #[test]
    fn negative_point_has_zero_mass() {
        assert_eq!(cdf(-1.0, &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn monotone_on_grid() {
        let l = [2.0, 1.0, 0.5, 0.1];
        let mut prev = 0.0;
        for i in 0..200 {
            let p = cdf(i as f64 * 0.1, &l);
            assert!(p >= prev - 1e-6, "q = {}", i as f64 * 0.1);
            prev = p;
        }
    }

    #[test]
    fn zero_observation_has_unit_p_value() {
        assert_eq!(het_test(0.0, &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn p_value_at_chi_square_critical_point() {
        assert!((het_test(3.841458820694124, &[1.0]).unwrap() - 0.05).abs() < 1e-4);
    }

    #[test]
    fn centering_matrix_spectrum() {
        let k = 4;
        let v = 0.3;
        let c = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
        let l = het_test_lambdas(&c, &vec![v; k], 0.0).unwrap();
        assert_eq!(l.len(), k - 1);
        assert!(l.iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn tiny_observation_truncates_to_zero() {
        // Q is scaled chi-square(3): θ ↦ (1 + θ) {1,1,1}
        let f = |theta: f64| Ok(vec![1.0 + theta; 3]);
        let (lo, hi) = invert_ci(0.05, f, 0.05).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        let (lo, hi) = invert_ci(1.0, f, 0.05).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0);
    }

    #[test]
    fn interval_endpoints_reproduce_targets() {
        let f = |theta: f64| Ok(vec![0.2 + theta, 0.3 + theta, 0.5 + theta, 0.1 + theta]);
        let q_obs = 9.0;
        let (lo, hi) = invert_ci(q_obs, f, 0.05).unwrap();
        assert!(lo > 0.0 && hi > lo);
        let cdf_hi = cdf(q_obs, &f(hi).unwrap());
        let cdf_lo = cdf(q_obs, &f(lo).unwrap());
        assert!((cdf_hi - 0.025).abs() < 1e-4, "{cdf_hi}");
        assert!((cdf_lo - 0.975).abs() < 1e-4, "{cdf_lo}");
    }

    #[test]
    fn unbracketable_interval_errors() {
        let f = |_theta: f64| Ok(vec![1e-9]);
        assert!(matches!(
            invert_ci(1.0, f, 0.05),
            Err(QFormError::BracketingFailed { .. })
        ));
    }

    #[test]
    fn prune_drops_rounding_zeros() {
        assert_eq!(prune_lambdas(&[3.0, 1e-15, -2e-14, 1.0]), vec![3.0, 1.0]);
        assert!(prune_lambdas(&[0.0, 0.0]).is_empty());
    }
}
