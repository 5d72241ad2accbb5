//! Gaussian mixture with per-component block-diagonal covariance, fitted by
//! EM.
//!
//! Each component owns its column grouping: every M-step re-estimates the
//! grouping from that component's weighted covariance with the configured
//! estimator, then projects. Initialization comes from hard K-means labels,
//! stopping uses Aitken acceleration on the observed-data log-likelihood,
//! and the number of components is selected by BIC.

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::blockstruct::{project_block_diagonal, BlockCovariance, ColumnGrouping};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::linalg::{ridged_cholesky, RidgedCholesky};
use crate::rng::{self, derive_seed, derive_seed2};
use crate::stats::{compute_stats, DataMatrix};

/// K-means restarts used by [`em_fit`] when initializing responsibilities.
pub const DEFAULT_KMEANS_RESTARTS: usize = 10;

const SALT_KMEANS: u64 = 0x6b_6d65_616e;
const MAX_LLOYD_ITER: usize = 100;

/// A fitted G-component mixture. The covariance of each component carries
/// its own column grouping.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<BlockCovariance>,
}

impl MixtureModel {
    pub fn g(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn groupings(&self) -> Vec<&ColumnGrouping> {
        self.covariances.iter().map(|c| c.grouping()).collect()
    }
}

impl Serialize for MixtureModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Component<'a> {
            weight: f64,
            mean: Vec<f64>,
            grouping: &'a ColumnGrouping,
            covariance: Vec<Vec<f64>>,
        }
        let comps: Vec<Component> = (0..self.g())
            .map(|g| {
                let cov = self.covariances[g].expanded();
                Component {
                    weight: self.weights[g],
                    mean: self.means[g].iter().copied().collect(),
                    grouping: self.covariances[g].grouping(),
                    covariance: (0..cov.nrows())
                        .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
                        .collect(),
                }
            })
            .collect();
        let mut st = serializer.serialize_struct("MixtureModel", 2)?;
        st.serialize_field("g", &self.g())?;
        st.serialize_field("components", &comps)?;
        st.end()
    }
}

/// Everything produced by one EM run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: MixtureModel,
    pub responsibilities: DMatrix<f64>,
    pub row_assignment: Vec<usize>,
    pub loglik_trace: Vec<f64>,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seed: u64,
}

impl FitReport {
    pub fn n(&self) -> usize {
        self.responsibilities.nrows()
    }

    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace never empty")
    }
}

impl Serialize for FitReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("FitReport", 7)?;
        st.serialize_field("model", &self.model)?;
        st.serialize_field("row_assignment", &self.row_assignment)?;
        st.serialize_field("loglik_trace", &self.loglik_trace)?;
        st.serialize_field("bic", &self.bic)?;
        st.serialize_field("converged", &self.converged)?;
        st.serialize_field("iterations", &self.iterations)?;
        st.serialize_field("seed", &self.seed)?;
        st.end()
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs by
/// within-cluster sum of squares. Deterministic given the seed.
pub fn kmeans(data: &DataMatrix, g: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let x = data.values();
    let n = x.nrows();
    if g == 0 {
        return Err(Error::InvalidArgument("g must be at least 1".into()));
    }
    if g > n {
        return Err(Error::InvalidArgument(format!(
            "g={g} exceeds the number of observations {n}"
        )));
    }
    if g == 1 {
        return Ok(vec![0; n]);
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..restarts.max(1) {
        let mut r = rng::stream(derive_seed2(seed, SALT_KMEANS, restart as u64));
        let labels = lloyd_once(x, g, &mut r);
        let wcss = wcss_of(x, &labels, g);
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn lloyd_once(x: &DMatrix<f64>, g: usize, r: &mut rng::Stream) -> Vec<usize> {
    let (n, p) = x.shape();
    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(g);
    let first = ((rng::uniform(r, 0.0, 1.0) * n as f64) as usize).min(n - 1);
    centers.push(x.row(first).transpose());
    let mut d2 = vec![0.0f64; n];
    while centers.len() < g {
        let mut total = 0.0;
        for i in 0..n {
            let mut min_d = f64::INFINITY;
            for c in &centers {
                let mut acc = 0.0;
                for j in 0..p {
                    let d = x[(i, j)] - c[j];
                    acc += d * d;
                }
                min_d = min_d.min(acc);
            }
            d2[i] = min_d;
            total += min_d;
        }
        let pick = if total <= 0.0 {
            ((rng::uniform(r, 0.0, 1.0) * n as f64) as usize).min(n - 1)
        } else {
            let u = rng::uniform(r, 0.0, 1.0) * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u <= acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(x.row(pick).transpose());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..MAX_LLOYD_ITER {
        // assignment step, ties to the lowest center index
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let mut acc = 0.0;
                for j in 0..p {
                    let d = x[(i, j)] - c[j];
                    acc += d * d;
                }
                if acc < best_d {
                    best_d = acc;
                    best_c = ci;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }
        // update step
        let mut counts = vec![0usize; g];
        let mut sums = vec![DVector::<f64>::zeros(p); g];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..p {
                sums[labels[i]][j] += x[(i, j)];
            }
        }
        for c in 0..g {
            if counts[c] == 0 {
                // reseed an emptied cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (x.row(a).transpose() - &centers[labels[a]]).norm_squared();
                        let db = (x.row(b).transpose() - &centers[labels[b]]).norm_squared();
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("n >= 1");
                centers[c] = x.row(far).transpose();
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn wcss_of(x: &DMatrix<f64>, labels: &[usize], g: usize) -> f64 {
    let (n, p) = x.shape();
    let mut counts = vec![0usize; g];
    let mut means = vec![DVector::<f64>::zeros(p); g];
    for i in 0..n {
        counts[labels[i]] += 1;
        for j in 0..p {
            means[labels[i]][j] += x[(i, j)];
        }
    }
    for c in 0..g {
        if counts[c] > 0 {
            means[c] /= counts[c] as f64;
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..p {
            let d = x[(i, j)] - means[labels[i]][j];
            acc += d * d;
        }
    }
    acc
}

/// Per-component data prepared for fast repeated density evaluation:
/// block factorizations are done once, rows are evaluated block-wise.
struct ComponentDensity {
    log_weight: f64,
    blocks: Vec<BlockDensity>,
}

struct BlockDensity {
    members: Vec<usize>,
    mean: DVector<f64>,
    fact: RidgedCholesky,
    log_norm: f64,
}

impl ComponentDensity {
    fn prepare(weight: f64, mean: &DVector<f64>, cov: &BlockCovariance) -> Result<Self> {
        let mut blocks = Vec::new();
        for (block, members) in cov.blocks().iter().zip(cov.grouping().groups()) {
            if members.is_empty() {
                continue;
            }
            let fact = ridged_cholesky(block)?;
            let m = members.len() as f64;
            let log_norm = -0.5 * m * std::f64::consts::TAU.ln() - 0.5 * fact.log_det();
            blocks.push(BlockDensity {
                mean: DVector::from_iterator(members.len(), members.iter().map(|&j| mean[j])),
                members,
                fact,
                log_norm,
            });
        }
        Ok(Self {
            log_weight: weight.ln(),
            blocks,
        })
    }

    fn log_joint(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut lp = self.log_weight;
        for b in &self.blocks {
            // b.mean is indexed by block position, not variable id
            let diff = DVector::from_iterator(
                b.members.len(),
                b.members
                    .iter()
                    .enumerate()
                    .map(|(pos, &j)| x[(row, j)] - b.mean[pos]),
            );
            let y = b
                .fact
                .chol
                .l_dirty()
                .solve_lower_triangular(&diff)
                .expect("cholesky factor is nonsingular");
            lp += b.log_norm - 0.5 * y.dot(&y);
        }
        lp
    }
}

/// Responsibilities and observed-data log-likelihood under the model,
/// computed in log-space with max subtraction.
pub fn e_step(data: &DataMatrix, model: &MixtureModel) -> Result<(DMatrix<f64>, f64)> {
    let n = data.n();
    let g = model.g();
    let densities: Vec<ComponentDensity> = (0..g)
        .map(|c| ComponentDensity::prepare(model.weights[c], &model.means[c], &model.covariances[c]))
        .collect::<Result<_>>()?;

    let mut resp = DMatrix::zeros(n, g);
    let mut loglik = 0.0;
    let mut lp = vec![0.0f64; g];
    for i in 0..n {
        for (c, dens) in densities.iter().enumerate() {
            lp[c] = dens.log_joint(data.values(), i);
        }
        let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::UnderflowRow { row: i });
        }
        let sum_exp: f64 = lp.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        if !lse.is_finite() {
            return Err(Error::UnderflowRow { row: i });
        }
        for c in 0..g {
            resp[(i, c)] = (lp[c] - lse).exp();
        }
        loglik += lse;
    }
    Ok((resp, loglik))
}

/// M-step: weights, means and weighted covariances, with each component's
/// grouping re-estimated on its covariance and the covariance projected onto
/// it. The default estimator is hierarchical.
pub fn m_step(
    data: &DataMatrix,
    responsibilities: &DMatrix<f64>,
    k: usize,
    config: &EstimatorConfig,
) -> Result<MixtureModel> {
    let n = data.n();
    let p = data.p();
    let g = responsibilities.ncols();
    if responsibilities.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "responsibilities have {} rows for {} observations",
            responsibilities.nrows(),
            n
        )));
    }
    let mut weights = Vec::with_capacity(g);
    let mut means = Vec::with_capacity(g);
    let mut covariances = Vec::with_capacity(g);
    for c in 0..g {
        let col: Vec<f64> = (0..n).map(|i| responsibilities[(i, c)]).collect();
        let mass: f64 = col.iter().sum();
        if mass < 10.0 * f64::EPSILON * n as f64 {
            return Err(Error::DegenerateComponent {
                component: c,
                mass,
            });
        }
        let stats = compute_stats(data, Some(&col))?;
        let grouping = if k == 1 {
            ColumnGrouping::single_group(p)
        } else if k >= p {
            ColumnGrouping::finest(p)
        } else {
            config.run(&stats.cov, k)?.grouping
        };
        covariances.push(project_block_diagonal(&stats.cov, &grouping)?);
        means.push(stats.mean);
        weights.push(mass / n as f64);
    }
    Ok(MixtureModel {
        weights,
        means,
        covariances,
    })
}

fn one_hot(labels: &[usize], g: usize) -> DMatrix<f64> {
    let mut resp = DMatrix::zeros(labels.len(), g);
    for (i, &l) in labels.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }
    resp
}

fn argmax_rows(resp: &DMatrix<f64>) -> Vec<usize> {
    (0..resp.nrows())
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..resp.ncols() {
                if resp[(i, c)] > best_v {
                    best_v = resp[(i, c)];
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Free-parameter count: (G-1) mixing weights, G*p means, and one symmetric
/// block per component group.
pub fn parameter_count(model: &MixtureModel) -> usize {
    let g = model.g();
    let p = model.p();
    let mut nu = (g - 1) + g * p;
    for cov in &model.covariances {
        for size in cov.grouping().group_sizes() {
            nu += size * (size + 1) / 2;
        }
    }
    nu
}

/// BIC in the larger-is-better convention: 2 loglik - nu log N.
pub fn bic(report: &FitReport) -> f64 {
    let nu = parameter_count(&report.model) as f64;
    2.0 * report.loglik() - nu * (report.n() as f64).ln()
}

/// Fit by EM from a K-means initialization.
///
/// Stops when the Aitken-accelerated asymptotic log-likelihood estimate is
/// within `tol` of the current value (checked from the third iteration on),
/// when the log-likelihood step is exactly zero, or at `max_iter` with
/// `converged = false`.
pub fn em_fit(
    data: &DataMatrix,
    g: usize,
    k: usize,
    config: &EstimatorConfig,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<FitReport> {
    if data.n() <= g {
        return Err(Error::InvalidArgument(format!(
            "need more than g={g} observations, got {}",
            data.n()
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let labels = kmeans(
        data,
        g,
        DEFAULT_KMEANS_RESTARTS,
        derive_seed(seed, SALT_KMEANS),
    )?;
    let mut model = m_step(data, &one_hot(&labels, g), k, config)?;
    let mut trace: Vec<f64> = Vec::with_capacity(16);
    let mut converged = false;
    let mut resp;
    loop {
        let (resp_new, ll) = e_step(data, &model)?;
        trace.push(ll);
        resp = resp_new;
        let t = trace.len();
        if t >= 2 && trace[t - 1] - trace[t - 2] == 0.0 {
            converged = true;
            break;
        }
        if t >= 3 {
            let (l0, l1, l2) = (trace[t - 3], trace[t - 2], trace[t - 1]);
            let denom = l1 - l0;
            if denom != 0.0 {
                let a = (l2 - l1) / denom;
                if a < 1.0 {
                    let l_inf = l1 + (l2 - l1) / (1.0 - a);
                    if (l_inf - l2).abs() < tol {
                        converged = true;
                        break;
                    }
                }
            }
        }
        if t >= max_iter {
            break;
        }
        model = m_step(data, &resp, k, config)?;
    }

    let row_assignment = argmax_rows(&resp);
    let iterations = trace.len();
    let mut report = FitReport {
        model,
        responsibilities: resp,
        row_assignment,
        loglik_trace: trace,
        bic: 0.0,
        converged,
        iterations,
        seed,
    };
    report.bic = bic(&report);
    Ok(report)
}

/// Fit every G in the range (each with `replicate_starts` seeds, keeping the
/// best log-likelihood per G) and return the fit maximizing BIC together
/// with the full (G, BIC) table. Individual failed fits are skipped; it is
/// an error only if every fit fails.
pub fn select_g(
    data: &DataMatrix,
    g_range: &[usize],
    k: usize,
    config: &EstimatorConfig,
    seed: u64,
    replicate_starts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<(FitReport, Vec<(usize, f64)>)> {
    if g_range.is_empty() {
        return Err(Error::InvalidArgument("empty g range".into()));
    }
    let mut table = Vec::new();
    let mut best: Option<FitReport> = None;
    let mut last_err: Option<Error> = None;
    for &g in g_range {
        let mut best_for_g: Option<FitReport> = None;
        for r in 0..replicate_starts.max(1) {
            match em_fit(data, g, k, config, derive_seed2(seed, g as u64, r as u64), max_iter, tol)
            {
                Ok(fit) => {
                    if best_for_g
                        .as_ref()
                        .is_none_or(|b| fit.loglik() > b.loglik())
                    {
                        best_for_g = Some(fit);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        if let Some(fit) = best_for_g {
            table.push((g, fit.bic));
            let better = best.as_ref().is_none_or(|b| fit.bic > b.bic);
            if better {
                best = Some(fit);
            }
        }
    }
    match best {
        Some(fit) => Ok((fit, table)),
        None => Err(last_err.unwrap_or_else(|| Error::InvalidArgument("all fits failed".into()))),
    }
}
