//! Domain types for the three-level model: studies nested in clusters, the
//! stacked design, and the weight matrices used by the moment estimators.

use std::io::Read;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::smd::{self, SmdError};

/// Relative singular-value threshold for the full-rank check on designs.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cluster {id:?} has no studies")]
    EmptyCluster { id: String },
    #[error("need at least M >= 2 clusters, got {found}")]
    TooFewClusters { found: usize },
    #[error("arm sizes must be positive (cluster {cluster:?}, study {study})")]
    ArmSizeNonPositive { cluster: String, study: usize },
    #[error("{what} design is rank deficient: rank {rank} < {cols} columns")]
    RankDeficientDesign {
        what: &'static str,
        rank: usize,
        cols: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite or negative value: {0}")]
    InvalidValue(String),
    #[error(transparent)]
    Smd(#[from] SmdError),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
}

/// One study's effect estimate and arm sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    /// Observed SMD (Hedges's g).
    pub t: f64,
    pub n_c: u32,
    pub n_t: u32,
    pub n: u32,
    pub n_tilde: f64,
    /// Estimate of the within-study variance.
    pub v2: f64,
}

impl StudySummary {
    /// Builds a study; a missing `v2` is filled with the Hedges-style
    /// unbiased variance estimate.
    pub fn new(t: f64, n_c: u32, n_t: u32, v2: Option<f64>) -> Result<Self, ModelError> {
        let v2 = match v2 {
            Some(v) => v,
            None => smd::smd_variance(t, n_c, n_t)?,
        };
        Ok(StudySummary {
            t,
            n_c,
            n_t,
            n: n_c + n_t,
            n_tilde: smd::effective_sample_size(n_c, n_t),
            v2,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub studies: Vec<StudySummary>,
    /// Sum of the member effective sample sizes.
    pub n_tilde: f64,
    /// Level-3 fixed-effect design row W_g (length q).
    pub w_row: Vec<f64>,
    /// Level-3 random-effect design row Z_g (length r).
    pub z_row: Vec<f64>,
    /// Level-2 covariates Y_g, K_g x p.
    pub y: DMatrix<f64>,
}

impl Cluster {
    /// Intercept-only cluster: W_g = [1], no Z, no Y.
    pub fn new(id: impl Into<String>, studies: Vec<StudySummary>) -> Self {
        let k = studies.len();
        let n_tilde = studies.iter().map(|s| s.n_tilde).sum();
        Cluster {
            id: id.into(),
            studies,
            n_tilde,
            w_row: vec![1.0],
            z_row: Vec::new(),
            y: DMatrix::zeros(k, 0),
        }
    }

    pub fn with_covariates(mut self, y: DMatrix<f64>) -> Self {
        self.y = y;
        self
    }

    pub fn with_level3_rows(mut self, w_row: Vec<f64>, z_row: Vec<f64>) -> Self {
        self.w_row = w_row;
        self.z_row = z_row;
        self
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }
}

/// A validated collection of clusters. Construct with [`Dataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    clusters: Vec<Cluster>,
    omega_known: DMatrix<f64>,
    p: usize,
    q: usize,
    r: usize,
}

/// Stacked response and design, cluster-major and study-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Stacked {
    pub t: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl Dataset {
    /// Intercept-only dataset with Ω = 0x0.
    pub fn new(clusters: Vec<Cluster>) -> Result<Self, ModelError> {
        validate(clusters, DMatrix::zeros(0, 0))
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_studies(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    /// Number of level-2 covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of level-3 fixed effects.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of level-3 random effects with known covariance.
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn omega_known(&self) -> &DMatrix<f64> {
        &self.omega_known
    }

    pub fn studies(&self) -> impl Iterator<Item = &StudySummary> {
        self.clusters.iter().flat_map(|c| c.studies.iter())
    }

    /// Row ranges of each cluster in the stacked order.
    pub fn cluster_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.clusters
            .iter()
            .map(|c| {
                let r = start..start + c.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn v2(&self) -> Vec<f64> {
        self.studies().map(|s| s.v2).collect()
    }

    pub fn n_tilde(&self) -> Vec<f64> {
        self.studies().map(|s| s.n_tilde).collect()
    }

    pub fn cluster_n_tilde(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.n_tilde).collect()
    }

    pub fn stack(&self) -> Stacked {
        Stacked {
            t: DVector::from_iterator(self.num_studies(), self.studies().map(|s| s.t)),
            x: self.design_x(),
        }
    }

    /// X = stacked (δ_g1 1_g, …, δ_gM 1_g, Y_g).
    pub fn design_x(&self) -> DMatrix<f64> {
        let m = self.num_clusters();
        let mut x = DMatrix::zeros(self.num_studies(), m + self.p);
        for (g, (cluster, rows)) in self.clusters.iter().zip(self.cluster_ranges()).enumerate() {
            for (i, row) in rows.enumerate() {
                x[(row, g)] = 1.0;
                for j in 0..self.p {
                    x[(row, m + j)] = cluster.y[(i, j)];
                }
            }
        }
        x
    }

    /// W, the M x q level-3 fixed-effect design.
    pub fn design_w(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_clusters(), self.q, |g, j| self.clusters[g].w_row[j])
    }

    /// Z, the M x r level-3 random-effect design.
    pub fn design_z(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_clusters(), self.r, |g, j| self.clusters[g].z_row[j])
    }

    /// Z_g Ω Z_gᵀ for every cluster.
    pub fn known_cluster_variance(&self) -> Vec<f64> {
        let z = self.design_z();
        (0..self.num_clusters())
            .map(|g| {
                let row = z.row(g);
                (row * &self.omega_known * row.transpose())[(0, 0)]
            })
            .collect()
    }

    /// Fixed-effect design of the marginal model used by REML: each study
    /// row carries its cluster's W_g followed by its own Y row.
    pub fn marginal_design(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.num_studies(), self.q + self.p);
        for (cluster, rows) in self.clusters.iter().zip(self.cluster_ranges()) {
            for (i, row) in rows.enumerate() {
                for j in 0..self.q {
                    x[(row, j)] = cluster.w_row[j];
                }
                for j in 0..self.p {
                    x[(row, self.q + j)] = cluster.y[(i, j)];
                }
            }
        }
        x
    }
}

/// Checks a candidate dataset and returns it with derived quantities recomputed.
pub fn validate(mut clusters: Vec<Cluster>, omega_known: DMatrix<f64>) -> Result<Dataset, ModelError> {
    if clusters.len() < 2 {
        return Err(ModelError::TooFewClusters {
            found: clusters.len(),
        });
    }
    let p = clusters[0].y.ncols();
    let q = clusters[0].w_row.len();
    let r = clusters[0].z_row.len();

    for cluster in clusters.iter_mut() {
        if cluster.studies.is_empty() {
            return Err(ModelError::EmptyCluster {
                id: cluster.id.clone(),
            });
        }
        for (i, s) in cluster.studies.iter_mut().enumerate() {
            if s.n_c == 0 || s.n_t == 0 {
                return Err(ModelError::ArmSizeNonPositive {
                    cluster: cluster.id.clone(),
                    study: i,
                });
            }
            if !s.t.is_finite() || !s.v2.is_finite() || s.v2 < 0.0 {
                return Err(ModelError::InvalidValue(format!(
                    "cluster {:?} study {i}: t = {}, v2 = {}",
                    cluster.id, s.t, s.v2
                )));
            }
            s.n = s.n_c + s.n_t;
            s.n_tilde = smd::effective_sample_size(s.n_c, s.n_t);
        }
        cluster.n_tilde = cluster.studies.iter().map(|s| s.n_tilde).sum();

        if cluster.y.nrows() != cluster.studies.len() || cluster.y.ncols() != p {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {:?}: Y is {}x{}, expected {}x{p}",
                cluster.id,
                cluster.y.nrows(),
                cluster.y.ncols(),
                cluster.studies.len()
            )));
        }
        if cluster.w_row.len() != q || cluster.z_row.len() != r {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {:?}: W row has {} entries (expected {q}), Z row has {} (expected {r})",
                cluster.id,
                cluster.w_row.len(),
                cluster.z_row.len()
            )));
        }
    }
    if q == 0 {
        return Err(ModelError::DimensionMismatch("level-3 design W needs at least one column".into()));
    }
    if omega_known.nrows() != r || omega_known.ncols() != r {
        return Err(ModelError::DimensionMismatch(format!(
            "Omega is {}x{}, expected {r}x{r}",
            omega_known.nrows(),
            omega_known.ncols()
        )));
    }
    if r > 0 {
        let eig = linalg::eigen_sym(&omega_known)
            .map_err(|e| ModelError::InvalidValue(format!("Omega: {e}")))?;
        let scale = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if eig.values.iter().any(|&v| v < -1e-12 * scale.max(1.0)) {
            return Err(ModelError::InvalidValue("Omega is not nonnegative definite".into()));
        }
    }

    let dataset = Dataset {
        clusters,
        omega_known,
        p,
        q,
        r,
    };
    let x = dataset.design_x();
    let rank = linalg::column_rank(&x, RANK_TOL);
    if rank < x.ncols() {
        return Err(ModelError::RankDeficientDesign {
            what: "level-2",
            rank,
            cols: x.ncols(),
        });
    }
    let w = dataset.design_w();
    let rank = linalg::column_rank(&w, RANK_TOL);
    if rank < w.ncols() {
        return Err(ModelError::RankDeficientDesign {
            what: "level-3",
            rank,
            cols: w.ncols(),
        });
    }
    Ok(dataset)
}

/// Weight matrices for the two moment fits.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    /// Level-2 weights A (𝒦 x 𝒦).
    pub level2: DMatrix<f64>,
    /// Level-3 weights F (M x M).
    pub level3: DMatrix<f64>,
}

impl WeightSpec {
    /// Effective-sample-size weights: A = diag(ñ_gi), F = diag(ñ_g).
    pub fn ssw(dataset: &Dataset) -> Self {
        WeightSpec {
            level2: DMatrix::from_diagonal(&DVector::from_vec(dataset.n_tilde())),
            level3: DMatrix::from_diagonal(&DVector::from_vec(dataset.cluster_n_tilde())),
        }
    }
}

#[derive(Debug, serde::Deserialize)]
struct CsvRow {
    cluster: String,
    study: String,
    n_c: i64,
    n_t: i64,
    g: f64,
    #[serde(default)]
    v2: Option<f64>,
}

/// Reads the long-format dataset CSV (`cluster,study,n_c,n_t,g[,v2]`).
///
/// Clusters keep the order of their first appearance and studies keep file
/// order within a cluster. Missing `v2` values are computed from g.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset, ModelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ModelError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for required in ["cluster", "study", "n_c", "n_t", "g"] {
        if !headers.iter().any(|h| h == required) {
            return Err(ModelError::Csv {
                line: 1,
                message: format!("missing required column `{required}`"),
            });
        }
    }

    let mut clusters: Vec<(String, Vec<(String, StudySummary)>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| ModelError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| ModelError::Csv {
            line,
            message: e.to_string(),
        })?;
        let csv_err = |message: String| ModelError::Csv { line, message };
        if row.n_c <= 0 || row.n_t <= 0 {
            return Err(csv_err(format!(
                "arm sizes must be positive (n_c = {}, n_t = {})",
                row.n_c, row.n_t
            )));
        }
        let (n_c, n_t) = (
            u32::try_from(row.n_c).map_err(|e| csv_err(e.to_string()))?,
            u32::try_from(row.n_t).map_err(|e| csv_err(e.to_string()))?,
        );
        if !row.g.is_finite() {
            return Err(csv_err("g must be finite".into()));
        }
        if let Some(v) = row.v2 {
            if !v.is_finite() || v < 0.0 {
                return Err(csv_err("v2 must be finite and nonnegative".into()));
            }
        }
        let study = StudySummary::new(row.g, n_c, n_t, row.v2).map_err(|e| csv_err(e.to_string()))?;

        let idx = match clusters.iter().position(|(id, _)| *id == row.cluster) {
            Some(i) => i,
            None => {
                clusters.push((row.cluster.clone(), Vec::new()));
                clusters.len() - 1
            }
        };
        if clusters[idx].1.iter().any(|(sid, _)| *sid == row.study) {
            return Err(csv_err(format!(
                "duplicate study {:?} in cluster {:?}",
                row.study, row.cluster
            )));
        }
        clusters[idx].1.push((row.study, study));
    }

    let clusters = clusters
        .into_iter()
        .map(|(id, studies)| Cluster::new(id, studies.into_iter().map(|(_, s)| s).collect()))
        .collect();
    Dataset::new(clusters)
}
