//! Monte Carlo engine: scenario grid, data generation, per-repetition
//! estimation with both methods, and metric aggregation.
//!
//! Every repetition draws from its own ChaCha8 stream keyed by
//! (seed, scenario, rep), so results do not depend on how repetitions are
//! scheduled across threads. Aggregation is a sequential fold in
//! repetition order.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Cluster, Dataset, StudySummary};
use crate::moment::{self, Critical, MomentFit, MomentOptions};
use crate::reml::{self, RemlFit, RemlProblem};
use crate::smd::SmdMeta;

/// Header of the tidy result CSV.
pub const CSV_HEADER: &str = "M,K,n,delta,tau2,metric,estimator,value,denominator,seed";

/// Nominal level of the heterogeneity tests and all intervals.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// One cell of the simulation grid. ω² is always equal to τ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub m: usize,
    pub k: usize,
    pub n: u32,
    pub delta: f64,
    pub tau2: f64,
    /// Fraction of each study allocated to treatment.
    pub q_frac: f64,
    pub nrep: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn new(m: usize, k: usize, n: u32, delta: f64, tau2: f64) -> Self {
        Scenario {
            m,
            k,
            n,
            delta,
            tau2,
            q_frac: 0.5,
            nrep: 1000,
            seed: 0,
        }
    }

    pub fn with_nrep(mut self, nrep: usize) -> Self {
        self.nrep = nrep;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn omega2(&self) -> f64 {
        self.tau2
    }

    /// (n_c, n_t).
    pub fn arms(&self) -> (u32, u32) {
        let n_t = (f64::from(self.n) * self.q_frac).round() as u32;
        (self.n - n_t, n_t)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        if self.m < 2 {
            return bad(format!("M = {} but at least 2 clusters are needed", self.m));
        }
        if self.k < 1 {
            return bad("K must be positive".into());
        }
        let treated = f64::from(self.n) * self.q_frac;
        if (treated - treated.round()).abs() > 1e-9 {
            return bad(format!("n * q_frac = {treated} is not an integer"));
        }
        let (n_c, n_t) = self.arms();
        if n_c < 2 || n_t < 2 {
            return bad(format!("arms of size {n_c} and {n_t}; both need at least 2"));
        }
        if !(self.delta.is_finite() && self.tau2.is_finite() && self.tau2 >= 0.0) {
            return bad(format!("delta = {}, tau2 = {}", self.delta, self.tau2));
        }
        Ok(())
    }

    /// Stable hash of the design parameters (not seed or nrep).
    fn design_hash(&self) -> u64 {
        [
            self.m as u64,
            self.k as u64,
            u64::from(self.n),
            self.delta.to_bits(),
            self.tau2.to_bits(),
            self.q_frac.to_bits(),
        ]
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |h, &v| splitmix64(h ^ v))
    }

    fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ self.design_hash()));
        rng.set_stream(rep as u64);
        rng
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Crosses parameter vectors into scenarios, M outermost and τ² innermost.
pub fn cross_grid(
    ms: &[usize],
    ks: &[usize],
    ns: &[u32],
    deltas: &[f64],
    tau2s: &[f64],
    nrep: usize,
    seed: u64,
) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &m in ms {
        for &k in ks {
            for &n in ns {
                for &delta in deltas {
                    for &tau2 in tau2s {
                        out.push(Scenario::new(m, k, n, delta, tau2).with_nrep(nrep).with_seed(seed));
                    }
                }
            }
        }
    }
    out
}

/// Draws the dataset of repetition `rep`.
pub fn generate(scn: &Scenario, rep: usize) -> Dataset {
    generate_with_theta(scn, rep).0
}

/// As [`generate`], also returning the true study effects θ_gi in stacked
/// order.
pub fn generate_with_theta(scn: &Scenario, rep: usize) -> (Dataset, Vec<f64>) {
    let mut rng = scn.rng(rep);
    let (n_c, n_t) = scn.arms();
    let meta = SmdMeta::new(n_c, n_t).expect("validated scenario has arms of at least 2");
    let (omega, tau) = (scn.omega2().sqrt(), scn.tau2.sqrt());
    let mut thetas = Vec::with_capacity(scn.m * scn.k);
    let mut clusters = Vec::with_capacity(scn.m);
    for g in 0..scn.m {
        let z: f64 = StandardNormal.sample(&mut rng);
        let delta_0g = scn.delta + omega * z;
        let mut studies = Vec::with_capacity(scn.k);
        for _ in 0..scn.k {
            let z: f64 = StandardNormal.sample(&mut rng);
            let theta = delta_0g + tau * z;
            let g = crate::smd::sample_g(theta, &meta, &mut rng);
            thetas.push(theta);
            studies.push(StudySummary::new(g, n_c, n_t, None).expect("arms of at least 2"));
        }
        clusters.push(Cluster::new(format!("{}", g + 1), studies));
    }
    (Dataset::new(clusters).expect("generated design is valid"), thetas)
}

/// Quantities kept from one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub mean_v2: f64,
    pub moment: Option<MomentFit>,
    pub reml: Option<RemlFit>,
}

/// Fits both methods to one generated dataset. Panics inside an estimator
/// count as a failure of that estimator.
pub fn run_rep(scn: &Scenario, rep: usize) -> RepOutcome {
    let data = generate(scn, rep);
    let mean_v2 = data.v2().iter().sum::<f64>() / data.num_studies() as f64;
    let moment = panic::catch_unwind(AssertUnwindSafe(|| {
        moment::fit_ssw(
            &data,
            MomentOptions {
                alpha: ALPHA,
                intervals: true,
                tests: true,
            },
        )
        .ok()
    }))
    .ok()
    .flatten();
    let seed = moment.as_ref().map(|f| (f.level2.tau2_hat, f.level3.omega2_hat));
    let reml = panic::catch_unwind(AssertUnwindSafe(|| {
        let problem = RemlProblem::from_dataset(&data);
        reml::reml_fit(&problem, seed).with_profile_intervals(&problem, ALPHA)
    }))
    .ok();
    RepOutcome {
        mean_v2,
        moment,
        reml,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    fn value(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Rate {
    hits: usize,
    denom: usize,
}

impl Rate {
    fn push(&mut self, hit: bool) {
        self.hits += usize::from(hit);
        self.denom += 1;
    }

    fn value(&self) -> f64 {
        if self.denom == 0 {
            f64::NAN
        } else {
            self.hits as f64 / self.denom as f64
        }
    }
}

fn covers(ci: (f64, f64), truth: f64) -> bool {
    ci.0 <= truth && truth <= ci.1
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Tally {
    delta_ssw: Mean,
    delta_iv: Mean,
    tau2_qa: Mean,
    tau2_qa_raw: Mean,
    tau2_reml: Mean,
    omega2_qf: Mean,
    omega2_qf_raw: Mean,
    omega2_reml: Mean,
    cover_delta_qn: Rate,
    cover_delta_qt: Rate,
    cover_delta_rn: Rate,
    cover_delta_rt: Rate,
    cover_tau2_qa: Rate,
    cover_tau2_pl: Rate,
    cover_omega2_qf: Rate,
    cover_omega2_pl: Rate,
    reject_qa: Rate,
    reject_qf: Rate,
    fail_moment: Rate,
    fail_reml: Rate,
    fail_pl_tau2: Rate,
    fail_pl_omega2: Rate,
    mean_v2: Mean,
    se_ssw: Mean,
    se_iv: Mean,
}

impl Tally {
    fn add(&mut self, scn: &Scenario, rep: &RepOutcome) {
        let (delta, tau2, omega2) = (scn.delta, scn.tau2, scn.omega2());
        self.mean_v2.push(rep.mean_v2);
        self.fail_moment.push(rep.moment.is_none());
        if let Some(f) = &rep.moment {
            self.delta_ssw.push(f.delta - delta);
            self.se_ssw.push(f.se_delta);
            self.tau2_qa.push(f.level2.tau2_hat - tau2);
            self.tau2_qa_raw.push(f.level2.tau2_untruncated - tau2);
            self.omega2_qf.push(f.level3.omega2_hat - omega2);
            self.omega2_qf_raw.push(f.level3.omega2_untruncated - omega2);
            self.cover_delta_qn.push(covers(f.ci_delta_normal, delta));
            self.cover_delta_qt.push(covers(f.ci_delta_t, delta));
            if let Some(p) = f.q_a_pvalue {
                self.reject_qa.push(p < ALPHA);
            }
            if let Some(p) = f.q_f_pvalue {
                self.reject_qf.push(p < ALPHA);
            }
            if let Some(ci) = f.ci_tau2 {
                self.cover_tau2_qa.push(covers(ci, tau2));
            }
            if let Some(ci) = f.ci_omega2 {
                self.cover_omega2_qf.push(covers(ci, omega2));
            }
        }

        let fit = rep.reml.as_ref().filter(|f| f.converged);
        self.fail_reml.push(fit.is_none());
        let Some(fit) = fit else { return };
        let Some(e) = &fit.estimate else { return };
        self.delta_iv.push(e.delta_iv - delta);
        self.se_iv.push(e.se_delta);
        self.tau2_reml.push(e.tau2 - tau2);
        self.omega2_reml.push(e.omega2 - omega2);
        let df = (scn.m - 1) as u32;
        self.cover_delta_rn.push(covers(
            moment::delta_interval(e.delta_iv, e.se_delta, Critical::Normal, ALPHA),
            delta,
        ));
        self.cover_delta_rt.push(covers(
            moment::delta_interval(e.delta_iv, e.se_delta, Critical::T(df), ALPHA),
            delta,
        ));
        self.fail_pl_tau2.push(!fit.pl_converged_tau2);
        self.fail_pl_omega2.push(!fit.pl_converged_omega2);
        if let Some(ci) = fit.pl_ci_tau2 {
            self.cover_tau2_pl.push(covers(ci, tau2));
        }
        if let Some(ci) = fit.pl_ci_omega2 {
            self.cover_omega2_pl.push(covers(ci, omega2));
        }
    }

    fn rows(&self) -> Vec<MetricRow> {
        let mean = |metric, estimator, m: &Mean| MetricRow {
            metric,
            estimator,
            value: m.value(),
            denominator: m.count,
        };
        let rate = |metric, estimator, r: &Rate| MetricRow {
            metric,
            estimator,
            value: r.value(),
            denominator: r.denom,
        };
        vec![
            mean("bias_delta", "SSW", &self.delta_ssw),
            mean("bias_delta", "IV", &self.delta_iv),
            mean("bias_tau2", "Q_A", &self.tau2_qa),
            mean("bias_tau2", "Q_A_untruncated", &self.tau2_qa_raw),
            mean("bias_tau2", "REML", &self.tau2_reml),
            mean("bias_omega2", "Q_F", &self.omega2_qf),
            mean("bias_omega2", "Q_F_untruncated", &self.omega2_qf_raw),
            mean("bias_omega2", "REML", &self.omega2_reml),
            rate("coverage_delta", "Q_N", &self.cover_delta_qn),
            rate("coverage_delta", "Q_t", &self.cover_delta_qt),
            rate("coverage_delta", "REML_N", &self.cover_delta_rn),
            rate("coverage_delta", "REML_t", &self.cover_delta_rt),
            rate("coverage_tau2", "Q_A", &self.cover_tau2_qa),
            rate("coverage_tau2", "PL", &self.cover_tau2_pl),
            rate("coverage_omega2", "Q_F", &self.cover_omega2_qf),
            rate("coverage_omega2", "PL", &self.cover_omega2_pl),
            rate("reject_rate", "Q_A", &self.reject_qa),
            rate("reject_rate", "Q_F", &self.reject_qf),
            rate("nonconvergence", "moment", &self.fail_moment),
            rate("nonconvergence", "REML_fit", &self.fail_reml),
            rate("nonconvergence", "REML_ci_tau2", &self.fail_pl_tau2),
            rate("nonconvergence", "REML_ci_omega2", &self.fail_pl_omega2),
            mean("mean_v2", "all", &self.mean_v2),
            mean("mean_se_delta", "SSW", &self.se_ssw),
            mean("mean_se_delta", "IV", &self.se_iv),
        ]
    }
}

/// One aggregated metric. `denominator` counts the repetitions that
/// entered it; REML metrics exclude repetitions where REML failed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub estimator: &'static str,
    pub value: f64,
    pub denominator: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub rows: Vec<MetricRow>,
}

impl ScenarioResult {
    pub fn get(&self, metric: &str, estimator: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.estimator == estimator)
    }

    /// Value of a metric; panics if the pair is unknown.
    pub fn value(&self, metric: &str, estimator: &str) -> f64 {
        self.get(metric, estimator)
            .unwrap_or_else(|| panic!("no metric {metric}/{estimator}"))
            .value
    }

    /// CSV lines (without header), one per metric.
    pub fn to_csv(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.m,
                s.k,
                s.n,
                format_g(s.delta),
                format_g(s.tau2),
                r.metric,
                r.estimator,
                format_g(r.value),
                r.denominator,
                s.seed
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

/// Number of metric rows each scenario contributes to the CSV.
pub fn rows_per_scenario() -> usize {
    Tally::default().rows().len()
}

/// Runs all repetitions of one scenario on the current rayon pool.
pub fn run_scenario(scn: &Scenario) -> Result<ScenarioResult, SimError> {
    scn.validate()?;
    let outcomes: Vec<RepOutcome> = (0..scn.nrep)
        .into_par_iter()
        .map(|rep| run_rep(scn, rep))
        .collect();
    let tally = outcomes.iter().fold(Tally::default(), |mut t, rep| {
        t.add(scn, rep);
        t
    });
    Ok(ScenarioResult {
        scenario: *scn,
        rows: tally.rows(),
    })
}

/// Runs a grid on a dedicated pool of `parallelism` threads. Results are in
/// grid order and do not depend on `parallelism`.
pub fn run_grid(grid: &[Scenario], parallelism: usize) -> Result<Vec<ScenarioResult>, SimError> {
    run_grid_with(grid, parallelism, |_, _| {})
}

/// As [`run_grid`], calling `on_done(index, result)` in grid order as soon
/// as each prefix of the grid is finished.
pub fn run_grid_with<F>(grid: &[Scenario], parallelism: usize, mut on_done: F) -> Result<Vec<ScenarioResult>, SimError>
where
    F: FnMut(usize, &ScenarioResult),
{
    for scn in grid {
        scn.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    let mut results = Vec::with_capacity(grid.len());
    for (i, scn) in grid.iter().enumerate() {
        let result = pool.install(|| run_scenario(scn))?;
        on_done(i, &result);
        results.push(result);
    }
    Ok(results)
}

/// C-style `%.6g`.
pub fn format_g(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
