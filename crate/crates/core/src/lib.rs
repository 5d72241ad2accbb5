//! Gaussian bi-clustering with a general block-diagonal covariance matrix.
//!
//! The crate provides, bottom to top:
//!
//! * [`stats`] — sample statistics (MLE convention) and Gaussian densities;
//! * [`blockstruct`] — column groupings, block projection and the block
//!   log-likelihood objective;
//! * [`estimators`] — greedy, convex-relaxation and hierarchical estimators
//!   of the column grouping, plus silhouette selection of K;
//! * [`mixture`] — the G-component mixture with per-component block-diagonal
//!   covariance, fitted by EM with K-means initialization, Aitken stopping
//!   and BIC selection of G;
//! * [`simgen`] — deterministic generators for the simulation designs and a
//!   replicated experiment runner;
//! * [`eval`] — ARI, matched accuracy, MAPE, partition equality, silhouette;
//! * [`ingest`] — CSV loading, ANOVA feature selection, tf-idf corpora and
//!   the topic heatmap statistic.

pub mod blockstruct;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod ingest;
pub mod linalg;
pub mod mixture;
pub mod rng;
pub mod simgen;
pub mod stats;

pub use blockstruct::{block_loglik, project_block_diagonal, BlockCovariance, ColumnGrouping};
pub use error::{Error, Result};
pub use estimators::{
    convex_relax_estimate, estimate, greedy_estimate, hierarchical_estimate, pca_init,
    select_k_silhouette, EstimatorConfig, EstimatorReport, Method,
};
pub use eval::{ari, mape, matched_accuracy, partition_match, silhouette_mean};
pub use mixture::{bic, e_step, em_fit, kmeans, m_step, select_g, FitReport, MixtureModel};
pub use simgen::{
    make_random_block_cov, make_scenario1, make_scenario2, make_sigma_a, make_sigma_b,
    run_replicates, sample_mvn, ExperimentResult, ScenarioName, ScenarioSpec,
};
pub use stats::{compute_stats, gaussian_logpdf, standardize, DataMatrix, SampleStats};
