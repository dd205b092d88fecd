use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use mlmeta_core::simulate::{self, format_g, rows_per_scenario, Scenario, CSV_HEADER};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Grid configuration. Each `[[grid]]` table is crossed on its own, M
/// outermost and tau2 innermost; tables run in file order.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default = "default_nrep")]
    pub nrep: usize,
    pub grid: Vec<GridTable>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTable {
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub n: Vec<u32>,
    pub delta: Vec<f64>,
    pub tau2: Vec<f64>,
}

fn default_nrep() -> usize {
    1000
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Meta {
    seed: u64,
    nrep: usize,
    alpha: f64,
    columns: String,
    reml_exclusion: String,
}

impl Config {
    pub fn scenarios(&self) -> Vec<Scenario> {
        self.grid
            .iter()
            .flat_map(|g| simulate::cross_grid(&g.m, &g.k, &g.n, &g.delta, &g.tau2, self.nrep, self.seed))
            .collect()
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if config.nrep == 0 {
        bail!("nrep must be positive");
    }
    for scn in config.scenarios() {
        scn.validate()?;
    }
    Ok(config)
}

fn scenario_key(s: &Scenario) -> String {
    format!(
        "{},{},{},{},{}",
        s.m,
        s.k,
        s.n,
        format_g(s.delta),
        format_g(s.tau2)
    )
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Complete scenario blocks of an earlier run, keyed by scenario.
fn existing_blocks(out: &Path, seed: u64) -> anyhow::Result<HashMap<String, String>> {
    let text = fs::read_to_string(out).with_context(|| format!("cannot read {}", out.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(HashMap::new()),
        Some(h) if h == CSV_HEADER => {}
        Some(h) => bail!("{} has header {h:?}, expected {CSV_HEADER:?}", out.display()),
    }
    let mut blocks: HashMap<String, Vec<&str>> = HashMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 || fields[9] != seed.to_string() {
            continue;
        }
        blocks.entry(fields[..5].join(",")).or_default().push(line);
    }
    let expected = rows_per_scenario();
    Ok(blocks
        .into_iter()
        .filter(|(_, rows)| rows.len() == expected)
        .map(|(key, rows)| (key, rows.iter().map(|r| format!("{r}\n")).collect()))
        .collect())
}

pub fn run(config_path: &Path, out: &Path, jobs: usize, resume: bool) -> Result<(), Failure> {
    let config = load_config(config_path).map_err(Failure::Input)?;
    let grid = config.scenarios();
    let meta = Meta {
        seed: config.seed,
        nrep: config.nrep,
        alpha: simulate::ALPHA,
        columns: CSV_HEADER.to_string(),
        reml_exclusion: "repetitions where the REML fit fails are excluded from REML and PL metrics; \
                         the denominator column counts the repetitions used"
            .to_string(),
    };

    let occupied = fs::metadata(out).map(|m| m.len() > 0).unwrap_or(false);
    let kept = if occupied {
        if !resume {
            return Err(Failure::input(anyhow!(
                "{} already exists; pass --resume to continue it or choose another path",
                out.display()
            )));
        }
        if let Ok(text) = fs::read_to_string(meta_path(out)) {
            let old: Meta = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", meta_path(out).display()))
                .map_err(Failure::Input)?;
            if old.seed != meta.seed || old.nrep != meta.nrep {
                return Err(Failure::input(anyhow!(
                    "{} was written with seed {} and nrep {}; the config has seed {} and nrep {}",
                    out.display(),
                    old.seed,
                    old.nrep,
                    meta.seed,
                    meta.nrep
                )));
            }
        }
        existing_blocks(out, config.seed).map_err(Failure::Input)?
    } else {
        HashMap::new()
    };

    fs::write(meta_path(out), serde_json::to_string_pretty(&meta).expect("serializable") + "\n")
        .with_context(|| format!("cannot write {}", meta_path(out).display()))
        .map_err(Failure::Input)?;

    // a resumed run is assembled next to the output and renamed over it
    let target = if occupied {
        let mut name = out.as_os_str().to_owned();
        name.push(".tmp");
        PathBuf::from(name)
    } else {
        out.to_path_buf()
    };
    let file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(&target)
        .with_context(|| format!("cannot write {}", target.display()))
        .map_err(Failure::Input)?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Failure::input(anyhow!(e).context(format!("writing {}", target.display())));
    writeln!(w, "{CSV_HEADER}").map_err(io)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(Failure::numeric)?;
    let total = grid.len();
    let (mut reused, mut computed) = (0, 0);
    for (i, scn) in grid.iter().enumerate() {
        let key = scenario_key(scn);
        if let Some(block) = kept.get(&key) {
            w.write_all(block.as_bytes()).map_err(io)?;
            reused += 1;
            eprintln!("[{}/{total}] {key}: kept", i + 1);
            continue;
        }
        let start = Instant::now();
        let result = pool
            .install(|| simulate::run_scenario(scn))
            .map_err(Failure::input)?;
        result.write_csv(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
        computed += 1;
        eprintln!(
            "[{}/{total}] {key}: {} reps in {:.1}s",
            i + 1,
            scn.nrep,
            start.elapsed().as_secs_f64()
        );
    }
    w.flush().map_err(io)?;
    drop(w);
    if target != out {
        fs::rename(&target, out)
            .with_context(|| format!("cannot replace {}", out.display()))
            .map_err(Failure::Input)?;
    }
    eprintln!("{computed} scenarios computed, {reused} kept; results in {}", out.display());
    Ok(())
}
