//! Standardized mean differences: Hedges's small-sample correction, the
//! unbiased variance estimate of g, and a noncentral-t generator for g.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmdError {
    #[error("degrees of freedom too small: need m >= 2 and both arms >= 2 (n_c = {n_c}, n_t = {n_t})")]
    DegreesOfFreedomTooSmall { n_c: u32, n_t: u32 },
}

/// Per-study constants derived from the arm sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmdMeta {
    /// Degrees of freedom of the pooled SD, n - 2.
    pub m: u32,
    /// Hedges's correction factor J(m).
    pub j: f64,
    /// Effective sample size n_c n_t / n.
    pub n_tilde: f64,
    /// sqrt(n_tilde); the noncentrality of t is `lambda_scale * theta`.
    pub lambda_scale: f64,
}

impl SmdMeta {
    pub fn new(n_c: u32, n_t: u32) -> Result<Self, SmdError> {
        if n_c < 2 || n_t < 2 {
            return Err(SmdError::DegreesOfFreedomTooSmall { n_c, n_t });
        }
        let n = n_c + n_t;
        let m = n - 2;
        let n_tilde = effective_sample_size(n_c, n_t);
        Ok(SmdMeta {
            m,
            j: hedges_j(m).map_err(|_| SmdError::DegreesOfFreedomTooSmall { n_c, n_t })?,
            n_tilde,
            lambda_scale: n_tilde.sqrt(),
        })
    }
}

/// n_c n_t / (n_c + n_t).
pub fn effective_sample_size(n_c: u32, n_t: u32) -> f64 {
    let (c, t) = (f64::from(n_c), f64::from(n_t));
    c * t / (c + t)
}

/// Exact correction factor J(m) = Γ(m/2) / (sqrt(m/2) Γ((m-1)/2)).
pub fn hedges_j(m: u32) -> Result<f64, SmdError> {
    if m < 2 {
        return Err(SmdError::DegreesOfFreedomTooSmall { n_c: m, n_t: 0 });
    }
    let half = f64::from(m) / 2.0;
    Ok((ln_gamma(half) - 0.5 * half.ln() - ln_gamma(half - 0.5)).exp())
}

/// Unbiased estimate of Var(g): 1/ñ + g² (1 − (m−2)/(m J²)).
pub fn smd_variance(g: f64, n_c: u32, n_t: u32) -> Result<f64, SmdError> {
    let meta = SmdMeta::new(n_c, n_t)?;
    Ok(variance_with(&meta, g))
}

pub(crate) fn variance_with(meta: &SmdMeta, g: f64) -> f64 {
    let m = f64::from(meta.m);
    1.0 / meta.n_tilde + g * g * (1.0 - (m - 2.0) / (m * meta.j * meta.j))
}

/// Exact Var(g) for a true effect `theta`; finite only for m > 2.
pub fn true_variance(theta: f64, n_c: u32, n_t: u32) -> Result<f64, SmdError> {
    let meta = SmdMeta::new(n_c, n_t)?;
    let m = f64::from(meta.m);
    let j2 = meta.j * meta.j;
    Ok(j2 * m / ((m - 2.0) * meta.n_tilde) + theta * theta * (j2 * m / (m - 2.0) - 1.0))
}

/// Draws Hedges's g for true effect `theta`.
///
/// t* = (Z + sqrt(ñ) θ) / sqrt(χ²_m / m) is noncentral t with m = n − 2
/// degrees of freedom, and g = J(m) t* / sqrt(ñ).
pub fn sample_g<R: Rng + ?Sized>(theta: f64, meta: &SmdMeta, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let chi = ChiSquared::new(f64::from(meta.m))
        .expect("m >= 2 is checked when SmdMeta is built")
        .sample(rng);
    let t = (z + meta.lambda_scale * theta) / (chi / f64::from(meta.m)).sqrt();
    meta.j * t / meta.lambda_scale
}
