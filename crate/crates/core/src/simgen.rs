//! Deterministic generators for the simulation designs and a replicated
//! experiment runner.
//!
//! Every generator is a pure function of its seed: the RNG is pinned
//! (ChaCha8 + Box-Muller) and draw order is fixed, so replicated runs are
//! reproducible across platforms and thread counts.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockstruct::{project_block_diagonal, ColumnGrouping};
use crate::error::{Error, Result};
use crate::estimators::{estimate, select_k_silhouette, default_k_range, EstimatorConfig, Method};
use crate::eval::{ari, mape, partition_match};
use crate::linalg::ridged_cholesky;
use crate::mixture::select_g;
use crate::rng::{self, derive_seed2};
use crate::stats::{compute_stats, DataMatrix};

/// Draw `n` i.i.d. rows from N(mean, cov) via the Cholesky factor.
pub fn sample_mvn(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<DataMatrix> {
    let p = mean.len();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "mean has {} entries, cov is {}x{}",
            p,
            cov.nrows(),
            cov.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample 0 rows".into()));
    }
    let l = ridged_cholesky(cov)?.l();
    let mut r = rng::stream(seed);
    let mut out = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for j in 0..p {
            z[j] = rng::standard_normal(&mut r);
        }
        let x = &l * &z + mean;
        for j in 0..p {
            out[(i, j)] = x[j];
        }
    }
    DataMatrix::from_values(out)
}

/// One mixture component of a simulation design.
#[derive(Debug, Clone)]
pub struct MixtureComponentSpec {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub grouping: ColumnGrouping,
}

/// Draw exactly `n_per_component` rows from every component, concatenated in
/// component order, returning the data and the true row labels.
pub fn sample_mixture(
    components: &[MixtureComponentSpec],
    n_per_component: usize,
    seed: u64,
) -> Result<(DataMatrix, Vec<usize>)> {
    if components.is_empty() {
        return Err(Error::EmptyInput("no mixture components".into()));
    }
    let p = components[0].mean.len();
    let total = components.len() * n_per_component;
    let mut values = DMatrix::zeros(total, p);
    let mut labels = Vec::with_capacity(total);
    for (c, comp) in components.iter().enumerate() {
        let block = sample_mvn(
            &comp.mean,
            &comp.cov,
            n_per_component,
            derive_seed2(seed, 0x6d69_78, c as u64),
        )?;
        for i in 0..n_per_component {
            values.set_row(c * n_per_component + i, &block.values().row(i));
            labels.push(c);
        }
    }
    Ok((DataMatrix::from_values(values)?, labels))
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(p, p);
    let mut off = 0;
    for b in blocks {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out[(off + i, off + j)] = b[(i, j)];
            }
        }
        off += b.nrows();
    }
    out
}

fn grouping_of_sizes(sizes: &[usize]) -> ColumnGrouping {
    let mut assignment = Vec::new();
    for (g, &s) in sizes.iter().enumerate() {
        assignment.extend(std::iter::repeat_n(g, s));
    }
    ColumnGrouping::new(assignment, sizes.len()).expect("sizes are nonempty")
}

/// The 8x8 block-diagonal covariance with only non-negative entries
/// (blocks of sizes 3, 3, 2) and its generating grouping.
pub fn make_sigma_a() -> (DMatrix<f64>, ColumnGrouping) {
    let b3 = DMatrix::from_row_slice(3, 3, &[4.5, 2.0, 2.0, 2.0, 4.5, 2.0, 2.0, 2.0, 4.5]);
    let b2 = DMatrix::from_row_slice(2, 2, &[4.5, 2.0, 2.0, 4.5]);
    (
        block_diag(&[b3.clone(), b3, b2]),
        grouping_of_sizes(&[3, 3, 2]),
    )
}

/// The 8x8 companion design with negative off-diagonal entries.
pub fn make_sigma_b() -> (DMatrix<f64>, ColumnGrouping) {
    let b1 = DMatrix::from_row_slice(3, 3, &[4.5, -2.0, 1.0, -2.0, 4.5, 2.0, 1.0, 2.0, 4.5]);
    let b2 = DMatrix::from_row_slice(3, 3, &[4.5, -2.0, 2.0, -2.0, 4.5, 2.0, 2.0, 2.0, 4.5]);
    let b3 = DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 4.5]);
    (block_diag(&[b1, b2, b3]), grouping_of_sizes(&[3, 3, 2]))
}

/// The mean vector (0, 1, ..., 7) used with both 8x8 designs.
pub fn sigma_ab_mean() -> DVector<f64> {
    DVector::from_iterator(8, (0..8).map(|i| i as f64))
}

/// The three-component mixture with block-diagonal covariances: exact means
/// and blocks as listed in the simulation design (component 3 has two
/// blocks of sizes 5 and 3).
pub fn make_scenario1() -> Vec<MixtureComponentSpec> {
    let mu1 = DVector::from_vec(vec![-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0]);
    let mu2 = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    let mu3 = DVector::from_vec(vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);

    let s11 = DMatrix::from_row_slice(3, 3, &[2.5, 0.5, 0.5, 0.5, 3.5, 0.5, 0.5, 0.5, 4.5]);
    let s12 = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0]);
    let s13 = DMatrix::from_row_slice(2, 2, &[3.5, 3.0, 3.0, 3.9]);

    let s21 = DMatrix::from_row_slice(3, 3, &[4.5, -2.0, 1.0, -2.0, 4.5, 2.0, 1.0, 2.0, 4.5]);
    let s22 = DMatrix::from_row_slice(3, 3, &[4.0, 3.0, 3.0, 3.0, 3.5, 3.0, 3.0, 3.0, 4.0]);
    let s23 = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 4.0]);

    let s31 = {
        let diag = [2.1, 2.5, 3.0, 5.0, 4.0];
        DMatrix::from_fn(5, 5, |i, j| if i == j { diag[i] } else { 2.0 })
    };
    let s32 = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 1.0, 3.5, 1.0, 1.0, 1.0, 2.5]);

    vec![
        MixtureComponentSpec {
            weight: 1.0 / 3.0,
            mean: mu1,
            cov: block_diag(&[s11, s12, s13]),
            grouping: grouping_of_sizes(&[3, 3, 2]),
        },
        MixtureComponentSpec {
            weight: 1.0 / 3.0,
            mean: mu2,
            cov: block_diag(&[s21, s22, s23]),
            grouping: grouping_of_sizes(&[3, 3, 2]),
        },
        MixtureComponentSpec {
            weight: 1.0 / 3.0,
            mean: mu3,
            cov: block_diag(&[s31, s32]),
            grouping: grouping_of_sizes(&[5, 3]),
        },
    ]
}

/// Same means and weights, but each covariance is a dense random Gram
/// matrix A'A with A entries uniform on (0, 1) — the design that violates
/// the block-diagonal assumption.
pub fn make_scenario2(seed: u64) -> Vec<MixtureComponentSpec> {
    let base = make_scenario1();
    base.into_iter()
        .enumerate()
        .map(|(c, comp)| {
            let p = comp.mean.len();
            let mut r = rng::stream(derive_seed2(seed, 0x7363_32, c as u64));
            let a = DMatrix::from_fn(p, p, |_, _| rng::uniform(&mut r, 0.0, 1.0));
            MixtureComponentSpec {
                weight: comp.weight,
                mean: comp.mean,
                cov: a.transpose() * &a,
                grouping: ColumnGrouping::single_group(p),
            }
        })
        .collect()
}

/// A random block covariance design: K Gram blocks of size p/K with entries
/// of the generating factors uniform on (1, 2), plus dense Gram noise
/// `noise_weight * E'E` with E entries uniform on (0, 1). Also returns the
/// generating grouping and a companion mean with entries uniform on (0, 1).
pub fn make_random_block_cov_with_noise(
    p: usize,
    k: usize,
    noise_weight: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, ColumnGrouping, DVector<f64>)> {
    if k == 0 || p == 0 || !p.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "k={k} must divide p={p}"
        )));
    }
    let m = p / k;
    let mut r = rng::stream(seed);
    let blocks: Vec<DMatrix<f64>> = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(m, m, |_, _| rng::uniform(&mut r, 1.0, 2.0));
            a.transpose() * &a
        })
        .collect();
    let mut cov = block_diag(&blocks);
    if noise_weight != 0.0 {
        let e = DMatrix::from_fn(p, p, |_, _| rng::uniform(&mut r, 0.0, 1.0));
        cov += (e.transpose() * &e) * noise_weight;
    }
    let mean = DVector::from_fn(p, |_, _| rng::uniform(&mut r, 0.0, 1.0));
    Ok((cov, grouping_of_sizes(&vec![m; k]), mean))
}

/// [`make_random_block_cov_with_noise`] at the designed noise weight 0.5.
pub fn make_random_block_cov(
    p: usize,
    k: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, ColumnGrouping, DVector<f64>)> {
    make_random_block_cov_with_noise(p, k, 0.5, seed)
}

/// The p=12 covariance-recovery design: three equal blocks of four
/// variables, diagonal 4.5, within-block off-diagonal 2 (positive variant)
/// or -1 (negative variant); mean (1, ..., 12).
pub fn make_mape_design(negative: bool) -> (DMatrix<f64>, ColumnGrouping, DVector<f64>) {
    let off = if negative { -1.0 } else { 2.0 };
    let block = DMatrix::from_fn(4, 4, |i, j| if i == j { 4.5 } else { off });
    let cov = block_diag(&[block.clone(), block.clone(), block]);
    let mean = DVector::from_iterator(12, (1..=12).map(|i| i as f64));
    (cov, grouping_of_sizes(&[4, 4, 4]), mean)
}

/// Named simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioName {
    #[serde(rename = "sigmaA")]
    SigmaA,
    #[serde(rename = "sigmaB")]
    SigmaB,
    #[serde(rename = "mape_pos")]
    MapePos,
    #[serde(rename = "mape_neg")]
    MapeNeg,
    #[serde(rename = "grid_cell")]
    GridCell,
    #[serde(rename = "scenario1")]
    Scenario1,
    #[serde(rename = "scenario2")]
    Scenario2,
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sigmaa" | "sigma_a" => Ok(Self::SigmaA),
            "sigmab" | "sigma_b" => Ok(Self::SigmaB),
            "mape_pos" => Ok(Self::MapePos),
            "mape_neg" => Ok(Self::MapeNeg),
            "grid_cell" | "grid" => Ok(Self::GridCell),
            "scenario1" => Ok(Self::Scenario1),
            "scenario2" => Ok(Self::Scenario2),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::SigmaA => "sigmaA",
            Self::SigmaB => "sigmaB",
            Self::MapePos => "mape_pos",
            Self::MapeNeg => "mape_neg",
            Self::GridCell => "grid_cell",
            Self::Scenario1 => "scenario1",
            Self::Scenario2 => "scenario2",
        };
        f.write_str(s)
    }
}

/// A fully specified experiment: which design, how many observations (per
/// component for mixture designs), the base seed, and grid parameters where
/// the design needs them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub n_per_component: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Pick K by silhouette instead of using the design's true K.
    #[serde(default)]
    pub k_auto: bool,
}

impl ScenarioSpec {
    pub fn new(name: ScenarioName, n_per_component: usize, seed: u64) -> Self {
        Self {
            name,
            n_per_component,
            seed,
            p: None,
            k: None,
            k_auto: false,
        }
    }

    /// Check parameter consistency with the named design.
    pub fn validate(&self) -> Result<()> {
        if self.n_per_component == 0 {
            return Err(Error::InvalidArgument(
                "n_per_component must be positive".into(),
            ));
        }
        let fixed = |spec: &Self, p: usize, k: usize| -> Result<()> {
            if spec.p.is_some_and(|v| v != p) || spec.k.is_some_and(|v| v != k) {
                return Err(Error::InvalidArgument(format!(
                    "{} fixes p={p}, K={k}",
                    spec.name
                )));
            }
            Ok(())
        };
        match self.name {
            ScenarioName::SigmaA | ScenarioName::SigmaB => fixed(self, 8, 3),
            ScenarioName::MapePos | ScenarioName::MapeNeg => fixed(self, 12, 3),
            ScenarioName::Scenario1 | ScenarioName::Scenario2 => {
                if self.p.is_some_and(|v| v != 8) {
                    return Err(Error::InvalidArgument(format!(
                        "{} fixes p=8",
                        self.name
                    )));
                }
                Ok(())
            }
            ScenarioName::GridCell => {
                let (p, k) = match (self.p, self.k) {
                    (Some(p), Some(k)) => (p, k),
                    _ => {
                        return Err(Error::InvalidArgument(
                            "grid_cell needs explicit p and k".into(),
                        ))
                    }
                };
                if k == 0 || !p.is_multiple_of(k) {
                    return Err(Error::InvalidArgument(format!(
                        "grid cell k={k} must divide p={p}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One replicate of one method.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub success: bool,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape_estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape_mle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_g: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, method: Method, wall_ms: f64, err: &Error) -> Self {
        Self {
            replicate,
            method,
            success: false,
            wall_ms,
            mape_estimate: None,
            mape_mle: None,
            selected_g: None,
            selected_k: None,
            ari: None,
            error: Some(err.to_string()),
        }
    }
}

/// Aggregates over replicates for one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub replicates: usize,
    pub successes: usize,
    pub accuracy: f64,
    pub mean_wall_ms: f64,
    pub sd_wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mape_estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mape_mle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_histogram: Option<BTreeMap<usize, usize>>,
}

/// All records plus per-method aggregates of one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub spec: ScenarioSpec,
    pub replicates: usize,
    pub records: Vec<ReplicateRecord>,
    pub aggregates: Vec<MethodAggregate>,
}

impl ExperimentResult {
    /// One CSV row per (replicate, method); optional metrics left empty.
    pub fn write_records_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scenario",
            "replicate",
            "method",
            "success",
            "wall_ms",
            "mape_estimate",
            "mape_mle",
            "selected_g",
            "selected_k",
            "ari",
            "error",
        ])?;
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.records {
            w.write_record([
                self.spec.name.to_string(),
                r.replicate.to_string(),
                r.method.to_string(),
                r.success.to_string(),
                format!("{}", r.wall_ms),
                fmt_opt(r.mape_estimate),
                fmt_opt(r.mape_mle),
                r.selected_g.map_or(String::new(), |g| g.to_string()),
                r.selected_k.map_or(String::new(), |k| k.to_string()),
                fmt_opt(r.ari),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate-only JSON value (spec, replicate count, per-method summary).
    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.spec,
            "replicates": self.replicates,
            "aggregates": self.aggregates,
        })
    }

    pub fn aggregate_for(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

fn aggregate(records: &[ReplicateRecord], methods: &[Method], replicates: usize) -> Vec<MethodAggregate> {
    methods
        .iter()
        .map(|&method| {
            let rows: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.method == method).collect();
            let successes = rows.iter().filter(|r| r.success).count();
            let times: Vec<f64> = rows.iter().map(|r| r.wall_ms).collect();
            let mean_wall = mean(&times);
            let sd_wall = sd(&times, mean_wall);
            let mean_of = |f: fn(&ReplicateRecord) -> Option<f64>| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
                (!vals.is_empty()).then(|| mean(&vals))
            };
            let g_histogram = {
                let mut h = BTreeMap::new();
                for r in &rows {
                    if let Some(g) = r.selected_g {
                        *h.entry(g).or_insert(0usize) += 1;
                    }
                }
                (!h.is_empty()).then_some(h)
            };
            MethodAggregate {
                method,
                replicates,
                successes,
                accuracy: if replicates > 0 {
                    successes as f64 / replicates as f64
                } else {
                    0.0
                },
                mean_wall_ms: mean_wall,
                sd_wall_ms: sd_wall,
                mean_mape_estimate: mean_of(|r| r.mape_estimate),
                mean_mape_mle: mean_of(|r| r.mape_mle),
                mean_ari: mean_of(|r| r.ari),
                g_histogram,
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sd(xs: &[f64], mean: f64) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
    }
}

/// Run `replicates` independent replicates of the experiment with every
/// method, in parallel. Each replicate derives its own seeds, so results do
/// not depend on scheduling. Individual failures are recorded, not fatal.
pub fn run_replicates(
    spec: &ScenarioSpec,
    methods: &[Method],
    replicates: usize,
) -> Result<ExperimentResult> {
    spec.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    let records: Vec<Vec<ReplicateRecord>> = (0..replicates)
        .into_par_iter()
        .map(|rep| run_one_replicate(spec, methods, rep))
        .collect();
    let records: Vec<ReplicateRecord> = records.into_iter().flatten().collect();
    let aggregates = aggregate(&records, methods, replicates);
    Ok(ExperimentResult {
        spec: spec.clone(),
        replicates,
        records,
        aggregates,
    })
}

fn run_one_replicate(spec: &ScenarioSpec, methods: &[Method], rep: usize) -> Vec<ReplicateRecord> {
    match spec.name {
        ScenarioName::SigmaA | ScenarioName::SigmaB => {
            let (sigma, truth) = if spec.name == ScenarioName::SigmaA {
                make_sigma_a()
            } else {
                make_sigma_b()
            };
            grouping_recovery_replicate(spec, methods, rep, &sigma, &truth, &sigma_ab_mean(), false)
        }
        ScenarioName::MapePos | ScenarioName::MapeNeg => {
            let (sigma, truth, mean) = make_mape_design(spec.name == ScenarioName::MapeNeg);
            grouping_recovery_replicate(spec, methods, rep, &sigma, &truth, &mean, true)
        }
        ScenarioName::GridCell => {
            let p = spec.p.expect("validated");
            let k = spec.k.expect("validated");
            match make_random_block_cov(p, k, derive_seed2(spec.seed, rep as u64, 1)) {
                Ok((sigma, truth, mean)) => {
                    grouping_recovery_replicate(spec, methods, rep, &sigma, &truth, &mean, false)
                }
                Err(e) => methods
                    .iter()
                    .map(|&m| ReplicateRecord::failed(rep, m, 0.0, &e))
                    .collect(),
            }
        }
        ScenarioName::Scenario1 | ScenarioName::Scenario2 => {
            let comps = if spec.name == ScenarioName::Scenario1 {
                make_scenario1()
            } else {
                make_scenario2(derive_seed2(spec.seed, rep as u64, 1))
            };
            mixture_selection_replicate(spec, methods, rep, &comps)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grouping_recovery_replicate(
    spec: &ScenarioSpec,
    methods: &[Method],
    rep: usize,
    sigma: &DMatrix<f64>,
    truth: &ColumnGrouping,
    mean_vec: &DVector<f64>,
    with_mape: bool,
) -> Vec<ReplicateRecord> {
    let data_seed = derive_seed2(spec.seed, rep as u64, 2);
    let data = match sample_mvn(mean_vec, sigma, spec.n_per_component, data_seed) {
        Ok(d) => d,
        Err(e) => {
            return methods
                .iter()
                .map(|&m| ReplicateRecord::failed(rep, m, 0.0, &e))
                .collect()
        }
    };
    let s = match compute_stats(&data, None) {
        Ok(st) => st.cov,
        Err(e) => {
            return methods
                .iter()
                .map(|&m| ReplicateRecord::failed(rep, m, 0.0, &e))
                .collect()
        }
    };
    let true_k = truth.k();
    methods
        .iter()
        .map(|&method| {
            let started = Instant::now();
            let mut selected_k = None;
            let k = if spec.k_auto {
                let (lo, hi) = default_k_range(truth.p());
                match select_k_silhouette(&s, lo, hi) {
                    Ok((kk, _)) => {
                        selected_k = Some(kk);
                        kk
                    }
                    Err(e) => {
                        return ReplicateRecord::failed(
                            rep,
                            method,
                            started.elapsed().as_secs_f64() * 1e3,
                            &e,
                        )
                    }
                }
            } else {
                true_k
            };
            match estimate(&s, k, method) {
                Ok(report) => {
                    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                    let success = partition_match(&report.grouping, truth);
                    let (mape_estimate, mape_mle) = if with_mape {
                        let projected = project_block_diagonal(&s, &report.grouping)
                            .map(|b| b.expanded())
                            .ok();
                        (
                            projected.and_then(|pr| mape(sigma, &pr).ok()),
                            mape(sigma, &s).ok(),
                        )
                    } else {
                        (None, None)
                    };
                    ReplicateRecord {
                        replicate: rep,
                        method,
                        success,
                        wall_ms,
                        mape_estimate,
                        mape_mle,
                        selected_g: None,
                        selected_k,
                        ari: None,
                        error: None,
                    }
                }
                Err(e) => {
                    ReplicateRecord::failed(rep, method, started.elapsed().as_secs_f64() * 1e3, &e)
                }
            }
        })
        .collect()
}

fn mixture_selection_replicate(
    spec: &ScenarioSpec,
    methods: &[Method],
    rep: usize,
    comps: &[MixtureComponentSpec],
) -> Vec<ReplicateRecord> {
    let data_seed = derive_seed2(spec.seed, rep as u64, 2);
    let (data, truth) = match sample_mixture(comps, spec.n_per_component, data_seed) {
        Ok(x) => x,
        Err(e) => {
            return methods
                .iter()
                .map(|&m| ReplicateRecord::failed(rep, m, 0.0, &e))
                .collect()
        }
    };
    let fit_seed = derive_seed2(spec.seed, rep as u64, 3);
    let k = spec.k.unwrap_or(3);
    methods
        .iter()
        .map(|&method| {
            let config = EstimatorConfig::with_method(method);
            let started = Instant::now();
            match select_g(&data, &[1, 2, 3, 4, 5], k, &config, fit_seed, 1, 200, 1e-4) {
                Ok((fit, _table)) => {
                    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                    let g = fit.model.g();
                    ReplicateRecord {
                        replicate: rep,
                        method,
                        success: g == comps.len(),
                        wall_ms,
                        mape_estimate: None,
                        mape_mle: None,
                        selected_g: Some(g),
                        selected_k: None,
                        ari: ari(&truth, &fit.row_assignment).ok(),
                        error: None,
                    }
                }
                Err(e) => {
                    ReplicateRecord::failed(rep, method, started.elapsed().as_secs_f64() * 1e3, &e)
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mvn_law_of_large_numbers() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::identity(2, 2);
        let data = sample_mvn(&mean, &cov, 10_000, 5).unwrap();
        let stats = compute_stats(&data, None).unwrap();
        for j in 0..2 {
            assert!(stats.mean[j].abs() < 0.05, "mean {}", stats.mean[j]);
        }
        for a in 0..2 {
            for b in 0..2 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (stats.cov[(a, b)] - expect).abs() < 0.1,
                    "cov {:?}",
                    stats.cov
                );
            }
        }
    }

    #[test]
    fn mvn_single_row_and_determinism() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let cov = DMatrix::identity(2, 2);
        let one = sample_mvn(&mean, &cov, 1, 9).unwrap();
        assert_eq!(one.n(), 1);
        assert!(one.values().iter().all(|v| v.is_finite()));

        let a = sample_mvn(&mean, &cov, 50, 11).unwrap();
        let b = sample_mvn(&mean, &cov, 50, 11).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn sigma_a_entries_and_spd() {
        let (s, g) = make_sigma_a();
        assert_eq!(s[(0, 0)], 4.5);
        assert_eq!(s[(0, 1)], 2.0);
        assert_eq!(s[(0, 3)], 0.0);
        assert_eq!(g.assignment(), &[0, 0, 0, 1, 1, 1, 2, 2]);
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig > 0.0);
    }

    #[test]
    fn sigma_b_entries_and_spd() {
        let (s, _) = make_sigma_b();
        assert_eq!(s[(0, 1)], -2.0);
        assert_eq!(s[(2, 0)], 1.0);
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig > 0.0);
    }

    #[test]
    fn scenario1_exact_parameters() {
        let comps = make_scenario1();
        assert_eq!(comps.len(), 3);
        for c in &comps {
            assert_relative_eq!(c.weight, 1.0 / 3.0);
        }
        assert_eq!(
            comps[0].mean,
            DVector::from_vec(vec![-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0])
        );
        // third block of component 1
        assert_eq!(comps[0].cov[(6, 6)], 3.5);
        assert_eq!(comps[0].cov[(6, 7)], 3.0);
        assert_eq!(comps[0].cov[(7, 7)], 3.9);
        // component 3 has two blocks of sizes 5 and 3
        assert_eq!(comps[2].grouping.group_sizes(), vec![5, 3]);
        for c in &comps {
            let min_eig = c.cov.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig > 0.0, "component covariance not SPD");
        }
    }

    #[test]
    fn scenario2_gram_psd() {
        for seed in 0..3 {
            let comps = make_scenario2(seed);
            for c in &comps {
                let min_eig = c.cov.clone().symmetric_eigen().eigenvalues.min();
                assert!(min_eig >= -1e-10);
            }
        }
    }

    #[test]
    fn random_block_cov_structure() {
        let (cov, grouping, mean) = make_random_block_cov(24, 3, 7).unwrap();
        assert_eq!(grouping.group_sizes(), vec![8, 8, 8]);
        assert_eq!(mean.len(), 24);
        let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig > 0.0);

        // without noise, cross-block entries vanish exactly
        let (clean, g, _) = make_random_block_cov_with_noise(24, 3, 0.0, 7).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                if g.assignment()[i] != g.assignment()[j] {
                    assert_eq!(clean[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn random_block_cov_requires_divisibility() {
        assert!(make_random_block_cov(10, 3, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = ScenarioSpec::new(ScenarioName::SigmaA, 100, 0);
        assert!(spec.validate().is_ok());
        spec.p = Some(9);
        assert!(spec.validate().is_err());

        let mut grid = ScenarioSpec::new(ScenarioName::GridCell, 50, 0);
        assert!(grid.validate().is_err());
        grid.p = Some(24);
        grid.k = Some(3);
        assert!(grid.validate().is_ok());
        grid.k = Some(5);
        assert!(grid.validate().is_err());
    }

    #[test]
    fn zero_replicates_empty_result() {
        let spec = ScenarioSpec::new(ScenarioName::SigmaA, 50, 1);
        let result = run_replicates(&spec, &[Method::Hierarchical], 0).unwrap();
        assert!(result.records.is_empty());
        assert_eq!(result.aggregates.len(), 1);
        assert_eq!(result.aggregates[0].successes, 0);
    }

    #[test]
    fn sigma_a_hierarchical_small_run() {
        let spec = ScenarioSpec::new(ScenarioName::SigmaA, 400, 3);
        let result = run_replicates(&spec, &[Method::Hierarchical], 10).unwrap();
        let agg = result.aggregate_for(Method::Hierarchical).unwrap();
        assert_eq!(agg.replicates, 10);
        assert!(agg.accuracy >= 0.9, "accuracy {}", agg.accuracy);
    }

    #[test]
    fn replicates_deterministic() {
        let spec = ScenarioSpec::new(ScenarioName::SigmaB, 100, 5);
        let a = run_replicates(&spec, &[Method::Hierarchical], 5).unwrap();
        let b = run_replicates(&spec, &[Method::Hierarchical], 5).unwrap();
        let fingerprint = |r: &ExperimentResult| {
            r.records
                .iter()
                .map(|x| (x.replicate, x.success))
                .collect::<Vec<_>>()
        };
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn csv_emission_has_header_and_rows() {
        let spec = ScenarioSpec::new(ScenarioName::SigmaA, 60, 2);
        let result = run_replicates(&spec, &[Method::Hierarchical], 3).unwrap();
        let mut buf = Vec::new();
        result.write_records_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("scenario,replicate,method"));
    }
}
