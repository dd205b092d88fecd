use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use anyhow::Context;
use mlmeta_core::moment::{self, Critical, MomentFit, MomentOptions};
use mlmeta_core::reml::{self, RemlFit, RemlProblem};
use mlmeta_core::simulate::format_g;
use mlmeta_core::{read_csv, Dataset};

use crate::{Failure, Method};

pub fn run(path: &Path, alpha: f64, method: Method) -> Result<(), Failure> {
    let file = File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(Failure::Input)?;
    let data = read_csv(file)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::input)?;
    print!("{}", analyze(&data, alpha, method)?);
    Ok(())
}

/// Full text report for `data`.
pub fn analyze(data: &Dataset, alpha: f64, method: Method) -> Result<String, Failure> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "clusters {}  studies {}  alpha {}",
        data.num_clusters(),
        data.num_studies(),
        format_g(alpha)
    );
    if method != Method::Reml {
        let fit = moment::fit_ssw(
            data,
            MomentOptions {
                alpha,
                intervals: true,
                tests: true,
            },
        )
        .context("moment fit")
        .map_err(Failure::Numeric)?;
        out.push('\n');
        out.push_str(&moment_block(&fit, data.num_clusters()));
    }
    if method != Method::Moment {
        let problem = RemlProblem::from_dataset(data);
        let seed = moment::fit_ssw(
            data,
            MomentOptions {
                alpha,
                intervals: false,
                tests: false,
            },
        )
        .ok()
        .map(|f| (f.level2.tau2_hat, f.level3.omega2_hat));
        let fit = reml::reml_fit(&problem, seed).with_profile_intervals(&problem, alpha);
        out.push('\n');
        out.push_str(&reml_block(&fit, data.num_clusters(), alpha));
    }
    Ok(out)
}

fn interval(ci: (f64, f64)) -> String {
    format!("[{}, {}]", format_g(ci.0), format_g(ci.1))
}

fn opt_interval(ci: Option<(f64, f64)>) -> String {
    ci.map_or_else(|| "not available".to_string(), interval)
}

fn moment_block(fit: &MomentFit, m: usize) -> String {
    let mut s = String::new();
    let p = |x: Option<f64>| x.map_or_else(|| "NA".into(), format_g);
    let _ = writeln!(s, "moment (effective-sample-size weights)");
    let _ = writeln!(s, "  delta      {}  se {}", format_g(fit.delta), format_g(fit.se_delta));
    let _ = writeln!(s, "  ci normal  {}", interval(fit.ci_delta_normal));
    let _ = writeln!(s, "  ci t({})    {}", m - 1, interval(fit.ci_delta_t));
    let _ = writeln!(
        s,
        "  tau2       {}  ci {}",
        format_g(fit.level2.tau2_hat),
        opt_interval(fit.ci_tau2)
    );
    let _ = writeln!(s, "  Q_A        {}  p {}", format_g(fit.level2.q_a), p(fit.q_a_pvalue));
    let _ = writeln!(
        s,
        "  omega2     {}  ci {}",
        format_g(fit.level3.omega2_hat),
        opt_interval(fit.ci_omega2)
    );
    let _ = writeln!(s, "  Q_F        {}  p {}", format_g(fit.level3.q_f), p(fit.q_f_pvalue));
    s
}

fn reml_block(fit: &RemlFit, m: usize, alpha: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "reml (inverse-variance weights)");
    let Some(e) = &fit.estimate else {
        let _ = writeln!(s, "  converged  no");
        return s;
    };
    let _ = writeln!(s, "  converged  yes");
    let _ = writeln!(s, "  delta      {}  se {}", format_g(e.delta_iv), format_g(e.se_delta));
    let normal = moment::delta_interval(e.delta_iv, e.se_delta, Critical::Normal, alpha);
    let t = moment::delta_interval(e.delta_iv, e.se_delta, Critical::T((m - 1) as u32), alpha);
    let _ = writeln!(s, "  ci normal  {}", interval(normal));
    let _ = writeln!(s, "  ci t({})    {}", m - 1, interval(t));
    let pl = |ci: Option<(f64, f64)>, ok: bool| {
        if ok {
            opt_interval(ci)
        } else {
            "not converged".to_string()
        }
    };
    let _ = writeln!(
        s,
        "  tau2       {}  profile ci {}",
        format_g(e.tau2),
        pl(fit.pl_ci_tau2, fit.pl_converged_tau2)
    );
    let _ = writeln!(
        s,
        "  omega2     {}  profile ci {}",
        format_g(e.omega2),
        pl(fit.pl_ci_omega2, fit.pl_converged_omega2)
    );
    let _ = writeln!(s, "  loglik     {}", format_g(e.loglik));
    s
}
