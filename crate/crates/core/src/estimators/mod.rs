//! The three column-grouping estimators and silhouette-based selection of K.
//!
//! All three maximize (or approximate the maximizer of) the block-diagonal
//! profile log-likelihood of [`crate::blockstruct::block_loglik`] over
//! partitions of the p variables into K groups, starting from nothing but a
//! sample covariance matrix.

pub mod convex;
pub mod linkage;

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::blockstruct::{block_loglik, ColumnGrouping};
use crate::error::{Error, Result};
use crate::eval::silhouette_mean;
use crate::linalg::sorted_symmetric_eigen;
use crate::stats::correlation_from_cov;

pub use convex::{
    convex_relax_estimate, convex_relax_solve, ConvexContext, ConvexDefaults, RelaxedGrouping,
};

/// Which column-grouping estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Convex,
    Hierarchical,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Method::Greedy),
            "convex" | "numerical" => Ok(Method::Convex),
            "hier" | "hierarchical" => Ok(Method::Hierarchical),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (expected greedy|convex|hier)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Greedy => "greedy",
            Method::Convex => "convex",
            Method::Hierarchical => "hierarchical",
        };
        f.write_str(s)
    }
}

/// Outcome of one estimator run.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub grouping: ColumnGrouping,
    /// Final block log-likelihood of the returned grouping.
    pub objective: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub method: Method,
}

impl EstimatorReport {
    fn from_grouping(
        method: Method,
        s: &DMatrix<f64>,
        grouping: ColumnGrouping,
        iterations: usize,
        started: Instant,
    ) -> Result<Self> {
        let objective = block_loglik(s, &grouping)?;
        Ok(Self {
            grouping,
            objective,
            iterations,
            wall_time: started.elapsed().as_secs_f64(),
            method,
        })
    }

    /// Group ids left without members, flagged for downstream consumers.
    pub fn empty_groups(&self) -> Vec<usize> {
        self.grouping.empty_groups()
    }
}

impl Serialize for EstimatorReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            method: Method,
            k: usize,
            assignment: &'a [usize],
            objective: f64,
            iterations: usize,
            wall_time: f64,
            #[serde(skip_serializing_if = "Vec::is_empty")]
            empty_groups: Vec<usize>,
        }
        Wire {
            method: self.method,
            k: self.grouping.k(),
            assignment: self.grouping.assignment(),
            objective: self.objective,
            iterations: self.iterations,
            wall_time: self.wall_time,
            empty_groups: self.empty_groups(),
        }
        .serialize(serializer)
    }
}

fn validate_square(s: &DMatrix<f64>, what: &str) -> Result<usize> {
    if s.nrows() != s.ncols() || s.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square and nonempty, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(s.nrows())
}

/// Initial assignment from the top-k eigenvectors of the correlation matrix:
/// variable j goes to the component whose loading is largest. By default the
/// comparison uses magnitudes, since eigenvector signs are arbitrary; set
/// `signed` to compare raw values instead.
pub fn pca_init_with_sign(corr: &DMatrix<f64>, k: usize, signed: bool) -> Result<ColumnGrouping> {
    let p = validate_square(corr, "correlation matrix")?;
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range for p={p}"
        )));
    }
    let (_, vectors) = sorted_symmetric_eigen(corr)?;
    let mut assignment = Vec::with_capacity(p);
    for j in 0..p {
        let mut best_c = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            let raw = vectors[(j, c)];
            let v = if signed { raw } else { raw.abs() };
            if v > best_v {
                best_v = v;
                best_c = c;
            }
        }
        assignment.push(best_c);
    }
    ColumnGrouping::new(assignment, k)
}

/// [`pca_init_with_sign`] in the default magnitude mode.
pub fn pca_init(corr: &DMatrix<f64>, k: usize) -> Result<ColumnGrouping> {
    pca_init_with_sign(corr, k, false)
}

/// Greedy coordinate ascent over assignments: sweep the variables, trying
/// each group for the current variable and keeping the best objective, until
/// a full sweep changes nothing or `max_sweeps` is reached. A move that ties
/// the incumbent exactly is not taken; among strictly improving groups the
/// lowest index wins.
pub fn greedy_estimate(s: &DMatrix<f64>, k: usize, max_sweeps: usize) -> Result<EstimatorReport> {
    let started = Instant::now();
    let p = validate_square(s, "sample covariance")?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let corr = correlation_from_cov(s);
    let init = pca_init(&corr, k.min(p))?;
    let mut assignment = init.assignment().to_vec();
    let mut objective = block_loglik(s, &ColumnGrouping::new(assignment.clone(), k)?)?;
    let mut sweeps = 0usize;

    if k > 1 {
        for _ in 0..max_sweeps {
            sweeps += 1;
            let mut changed = false;
            for j in 0..p {
                let incumbent = assignment[j];
                let mut best_group = incumbent;
                let mut best_value = objective;
                for cand in 0..k {
                    if cand == incumbent {
                        continue;
                    }
                    assignment[j] = cand;
                    let value = block_loglik(s, &ColumnGrouping::new(assignment.clone(), k)?)?;
                    if value > best_value {
                        best_value = value;
                        best_group = cand;
                    }
                }
                assignment[j] = best_group;
                debug_assert!(best_value >= objective - 1e-12);
                if best_group != incumbent {
                    objective = best_value;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    EstimatorReport::from_grouping(
        Method::Greedy,
        s,
        ColumnGrouping::new(assignment, k)?,
        sweeps,
        started,
    )
}

/// Hierarchical estimator: rows of |corr(S)| are the feature vectors of the
/// variables; Euclidean distances between them feed average-linkage
/// clustering, cut at k groups.
pub fn hierarchical_estimate(s: &DMatrix<f64>, k: usize) -> Result<EstimatorReport> {
    let started = Instant::now();
    let p = validate_square(s, "sample covariance")?;
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range for p={p}"
        )));
    }
    let dist = correlation_feature_distances(s);
    let dendro = linkage::average_linkage(&dist)?;
    let labels = dendro.cut(k)?;
    EstimatorReport::from_grouping(
        Method::Hierarchical,
        s,
        ColumnGrouping::new(labels, k)?,
        p - k,
        started,
    )
}

/// Distance matrix used by the hierarchical estimator and the silhouette
/// search: Euclidean distances between rows of the element-wise absolute
/// correlation matrix.
pub fn correlation_feature_distances(s: &DMatrix<f64>) -> DMatrix<f64> {
    let corr_abs = correlation_from_cov(s).map(f64::abs);
    linkage::row_distance_matrix(&corr_abs)
}

/// Pick K by maximum mean silhouette over dendrogram cuts in
/// `[k_min, k_max]`, using the hierarchical estimator's distances.
/// Ties go to the smallest k. Returns the winner and the full score list.
pub fn select_k_silhouette(
    s: &DMatrix<f64>,
    k_min: usize,
    k_max: usize,
) -> Result<(usize, Vec<(usize, f64)>)> {
    let p = validate_square(s, "sample covariance")?;
    if !(2 <= k_min && k_min <= k_max && k_max <= p.saturating_sub(1)) {
        return Err(Error::InvalidArgument(format!(
            "silhouette range [{k_min}, {k_max}] invalid for p={p}"
        )));
    }
    let dist = correlation_feature_distances(s);
    let dendro = linkage::average_linkage(&dist)?;
    let mut scores = Vec::with_capacity(k_max - k_min + 1);
    let mut best_k = k_min;
    let mut best_score = f64::NEG_INFINITY;
    for k in k_min..=k_max {
        let labels = dendro.cut(k)?;
        let score = silhouette_mean(&dist, &labels)?;
        if score > best_score {
            best_score = score;
            best_k = k;
        }
        scores.push((k, score));
    }
    Ok((best_k, scores))
}

/// Default silhouette search range when the true K is unknown:
/// [2, min(p - 1, ceil(2 sqrt p) + 2)].
pub fn default_k_range(p: usize) -> (usize, usize) {
    let hi = ((2.0 * (p as f64).sqrt()).ceil() as usize + 2).min(p.saturating_sub(1));
    (2, hi.max(2))
}

/// An estimator choice bundled with its tunable parameters, as passed around
/// by the mixture M-step and the CLI.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Sweep cap for the greedy estimator.
    pub max_sweeps: usize,
    pub convex: ConvexDefaults,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Hierarchical,
            max_sweeps: 50,
            convex: ConvexDefaults::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Run the configured estimator on a sample covariance.
    pub fn run(&self, s: &DMatrix<f64>, k: usize) -> Result<EstimatorReport> {
        match self.method {
            Method::Greedy => greedy_estimate(s, k, self.max_sweeps),
            Method::Convex => {
                let c = self.convex;
                convex_relax_estimate(s, k, c.gamma, c.lambda, c.omega, c.max_iter, c.tol)
            }
            Method::Hierarchical => hierarchical_estimate(s, k),
        }
    }
}

/// Run the estimator selected by `method` with its default parameters.
pub fn estimate(s: &DMatrix<f64>, k: usize, method: Method) -> Result<EstimatorReport> {
    EstimatorConfig::with_method(method).run(s, k)
}
