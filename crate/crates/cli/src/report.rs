//! Appendix figure tables. Each output CSV holds one figure: facet columns
//! (row, col), the x column, `series`, the plotted quantity and its
//! denominator.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::Path;

use anyhow::{anyhow, Context};
use mlmeta_core::simulate::format_g;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Deserialize)]
struct ResultRow {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    n: u32,
    delta: f64,
    tau2: f64,
    metric: String,
    estimator: String,
    value: String,
    denominator: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    /// One figure per M; facets K x delta.
    M,
    /// One figure per delta; facets K x M.
    Delta,
    /// One figure per (delta, n); facets K x M.
    DeltaN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum XAxis {
    Tau2,
    Omega2,
    N,
}

struct Figure {
    metric: &'static str,
    y_name: &'static str,
    x: XAxis,
    split: Split,
    /// (estimator in the results, series label), in legend order.
    series: &'static [(&'static str, &'static str)],
}

fn figure(letter: char) -> Option<Figure> {
    let f = |metric, y_name, x, split, series| Figure {
        metric,
        y_name,
        x,
        split,
        series,
    };
    Some(match letter {
        'A' => f("nonconvergence", "nonconvergence_rate", XAxis::Tau2, Split::M, &[("REML_fit", "")]),
        'B' => f("reject_rate", "level", XAxis::N, Split::Delta, &[("Q_A", "Q_A"), ("Q_F", "Q_F")]),
        'C' => f("bias_tau2", "bias", XAxis::Tau2, Split::DeltaN, &[("REML", "REML"), ("Q_A", "Q_A")]),
        'D' => f("coverage_tau2", "coverage", XAxis::Tau2, Split::DeltaN, &[("PL", "PL"), ("Q_A", "Q_A")]),
        'E' => f("bias_omega2", "bias", XAxis::Omega2, Split::DeltaN, &[("REML", "REML"), ("Q_F", "Q_F")]),
        'F' => f("coverage_omega2", "coverage", XAxis::Omega2, Split::DeltaN, &[("PL", "PL"), ("Q_F", "Q_F")]),
        'G' => f("bias_delta", "bias", XAxis::Tau2, Split::DeltaN, &[("IV", "REML"), ("SSW", "SSW")]),
        'H' => f(
            "coverage_delta",
            "coverage",
            XAxis::Tau2,
            Split::DeltaN,
            &[("REML_N", "REML N"), ("REML_t", "REML t"), ("Q_N", "Q N"), ("Q_t", "Q t")],
        ),
        _ => return None,
    })
}

/// Study sizes drawn in the non-convergence figures.
const APPENDIX_A_N: [u32; 3] = [20, 40, 100];

/// Total order on finite floats for map keys.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

type SortKey = (Key, Key, usize, Key);

struct Table {
    header: String,
    rows: BTreeMap<SortKey, String>,
}

pub fn run(input: &Path, appendix: &str, out_dir: &Path) -> Result<(), Failure> {
    let letter = appendix.trim().to_ascii_uppercase();
    let fig = letter
        .chars()
        .next()
        .filter(|_| letter.len() == 1)
        .and_then(|c| figure(c).map(|f| (c, f)));
    let Some((letter, fig)) = fig else {
        return Err(Failure::input(anyhow!("unknown appendix {appendix:?}; expected one of A-H")));
    };

    let rows = read_results(input).map_err(Failure::Input)?;
    let tables = build(letter, &fig, &rows);
    if tables.is_empty() {
        eprintln!(
            "warning: {} has no rows for appendix {letter}; nothing written",
            input.display()
        );
        return Ok(());
    }
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(Failure::Input)?;
    for (name, table) in &tables {
        let path = out_dir.join(name);
        let mut text = table.header.clone();
        text.push('\n');
        for line in table.rows.values() {
            text.push_str(line);
            text.push('\n');
        }
        fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(Failure::Input)?;
    }
    eprintln!("appendix {letter}: {} figure tables in {}", tables.len(), out_dir.display());
    Ok(())
}

fn read_results(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    if file.metadata().map(|m| m.len() == 0).unwrap_or(false) {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("{} row {}", path.display(), i + 2)))
        .collect()
}

fn build(letter: char, fig: &Figure, rows: &[ResultRow]) -> BTreeMap<String, Table> {
    let x_name = match fig.x {
        XAxis::Tau2 => "tau2",
        XAxis::Omega2 => "omega2",
        XAxis::N => "n",
    };
    let (row_name, col_name) = match fig.split {
        Split::M => ("K", "delta"),
        Split::Delta | Split::DeltaN => ("K", "M"),
    };
    let header = format!("{row_name},{col_name},{x_name},series,{},denominator", fig.y_name);

    let mut tables: BTreeMap<String, Table> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == fig.metric) {
        let (series_idx, label) = match fig.split {
            Split::M => {
                let Some(i) = APPENDIX_A_N.iter().position(|&n| n == r.n) else {
                    continue;
                };
                if r.estimator != fig.series[0].0 {
                    continue;
                }
                (i, format!("n={}", r.n))
            }
            _ => {
                let Some(i) = fig.series.iter().position(|(e, _)| *e == r.estimator) else {
                    continue;
                };
                (i, fig.series[i].1.to_string())
            }
        };
        if fig.split == Split::Delta && r.tau2 != 0.0 {
            continue;
        }
        let name = match fig.split {
            Split::M => format!("{letter}_M{}.csv", r.m),
            Split::Delta => format!("{letter}_delta{}.csv", format_g(r.delta)),
            Split::DeltaN => format!("{letter}_delta{}_n{}.csv", format_g(r.delta), r.n),
        };
        let (facet_col, facet_col_text) = match fig.split {
            Split::M => (r.delta, format_g(r.delta)),
            _ => (r.m as f64, r.m.to_string()),
        };
        let x = match fig.x {
            XAxis::Tau2 | XAxis::Omega2 => r.tau2,
            XAxis::N => f64::from(r.n),
        };
        let line = format!(
            "{},{facet_col_text},{},{label},{},{}",
            r.k,
            format_g(x),
            r.value,
            r.denominator
        );
        tables
            .entry(name)
            .or_insert_with(|| Table {
                header: header.clone(),
                rows: BTreeMap::new(),
            })
            .rows
            .insert((Key(r.k as f64), Key(facet_col), series_idx, Key(x)), line);
    }
    tables
}
