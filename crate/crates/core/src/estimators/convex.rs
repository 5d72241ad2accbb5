//! Numerical estimator: simplex-relaxed column indicators optimized by
//! projected gradient ascent.
//!
//! The binary indicator matrix D is relaxed to rows on the probability
//! simplex. The objective combines the precision-form block log-likelihood
//! with a quadratic penalty pushing entries toward {0,1} (weight gamma) and a
//! log-determinant penalty on D'D (weight lambda). Columns are updated
//! cyclically, each update followed by clamping entries to a positive floor
//! and renormalizing rows.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{pca_init, EstimatorReport, Method};
use crate::blockstruct::ColumnGrouping;
use crate::error::{Error, Result};
use crate::linalg::ridged_cholesky;
use crate::stats::correlation_from_cov;

/// Smallest value a relaxed indicator entry may take.
pub const ENTRY_FLOOR: f64 = 1e-6;
/// Ridge added to D'D before inverting or taking its log-determinant.
const GRAM_RIDGE: f64 = 1e-10;
/// Mass added to the initial uniform rows on the PCA-suggested column.
const INIT_NUDGE: f64 = 0.1;

/// Default hyperparameters. Only omega comes with a reference value; the
/// penalty weights and stopping rule are exposed configuration.
#[derive(Debug, Clone, Copy)]
pub struct ConvexDefaults {
    pub gamma: f64,
    pub lambda: f64,
    pub omega: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ConvexDefaults {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 1.0,
            omega: 0.1,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

/// Final relaxed state of one solve: the p x K matrix, the hyperparameters
/// it was produced with, and the objective value after every cycle.
#[derive(Debug, Clone)]
pub struct RelaxedGrouping {
    pub d: DMatrix<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub omega: f64,
    pub objective_trace: Vec<f64>,
}

impl RelaxedGrouping {
    /// Row-wise argmax, ties to the lowest column index.
    pub fn round(&self) -> ColumnGrouping {
        let (p, k) = self.d.shape();
        let assignment = (0..p)
            .map(|j| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..k {
                    if self.d[(j, c)] > best_v {
                        best_v = self.d[(j, c)];
                        best = c;
                    }
                }
                best
            })
            .collect();
        ColumnGrouping::new(assignment, k).expect("argmax stays in range")
    }
}

/// Precomputed pieces of the relaxed objective for one sample covariance.
pub struct ConvexContext {
    /// S^-1 (after the ridge policy).
    sinv: DMatrix<f64>,
    /// S^-1 elementwise-times S; fixed coefficient of the trace term.
    trace_coeff: DMatrix<f64>,
    gamma: f64,
    lambda: f64,
    p: usize,
    k: usize,
}

impl ConvexContext {
    pub fn new(s: &DMatrix<f64>, k: usize, gamma: f64, lambda: f64) -> Result<Self> {
        let p = s.nrows();
        if s.ncols() != p || p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "sample covariance is {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if k == 0 || k > p {
            return Err(Error::InvalidArgument(format!(
                "k={k} out of range for p={p}"
            )));
        }
        let sinv = ridged_cholesky(s)?.inverse();
        let trace_coeff = sinv.component_mul(s);
        Ok(Self {
            sinv,
            trace_coeff,
            gamma,
            lambda,
            p,
            k,
        })
    }

    /// Parameterized block-diagonal precision: S^-1 elementwise-times D D'.
    fn theta(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        self.sinv.component_mul(&(d * d.transpose()))
    }

    /// D'D with its stabilizing ridge.
    fn gram(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = d.transpose() * d;
        for i in 0..self.k {
            g[(i, i)] += GRAM_RIDGE;
        }
        g
    }

    /// The full penalized objective.
    pub fn objective(&self, d: &DMatrix<f64>) -> Result<f64> {
        let log_det_theta = ridged_cholesky(&self.theta(d))?.log_det();
        let mut trace_term = 0.0;
        let mut sq_norm = 0.0;
        for c in 0..self.k {
            let col = d.column(c);
            trace_term += (&self.trace_coeff * col).dot(&col);
            sq_norm += col.dot(&col);
        }
        let log_det_gram = ridged_cholesky(&self.gram(d))?.log_det();
        Ok(0.5 * log_det_theta - 0.5 * trace_term + self.gamma * (sq_norm - self.p as f64)
            - self.lambda * log_det_gram)
    }

    /// Partial derivative of the objective with respect to one column of D.
    pub fn gradient_column(&self, d: &DMatrix<f64>, col: usize) -> Result<DVector<f64>> {
        let t = ridged_cholesky(&self.theta(d))?.inverse();
        let gram_inv = ridged_cholesky(&self.gram(d))?.inverse();
        let d_col = DVector::from_iterator(self.p, d.column(col).iter().copied());
        let likelihood = t.component_mul(&self.sinv) * &d_col - &self.trace_coeff * &d_col;
        let binary_push = &d_col * (2.0 * self.gamma);
        let gram_pull = (d * gram_inv).column(col) * (2.0 * self.lambda);
        Ok(likelihood + binary_push - gram_pull)
    }
}

/// Clamp every entry to the floor and renormalize rows to sum to one.
/// A couple of fixed-point passes keep both properties simultaneously.
pub fn project_rows(d: &mut DMatrix<f64>) {
    let (p, k) = d.shape();
    for _ in 0..4 {
        for j in 0..p {
            let mut sum = 0.0;
            for c in 0..k {
                if d[(j, c)] < ENTRY_FLOOR {
                    d[(j, c)] = ENTRY_FLOOR;
                }
                sum += d[(j, c)];
            }
            for c in 0..k {
                d[(j, c)] /= sum;
            }
        }
    }
}

/// Rows on the simplex with all entries at or above the floor.
pub fn rows_feasible(d: &DMatrix<f64>) -> bool {
    let (p, k) = d.shape();
    (0..p).all(|j| {
        let sum: f64 = (0..k).map(|c| d[(j, c)]).sum();
        (sum - 1.0).abs() <= 1e-8 && (0..k).all(|c| d[(j, c)] >= ENTRY_FLOOR * (1.0 - 1e-6))
    })
}

fn initial_relaxation(s: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let p = s.nrows();
    let warm = pca_init(&correlation_from_cov(s), k)?;
    let mut d = DMatrix::from_element(p, k, 1.0 / k as f64);
    for (j, &g) in warm.assignment().iter().enumerate() {
        d[(j, g)] += INIT_NUDGE;
    }
    project_rows(&mut d);
    Ok(d)
}

/// Run the projected gradient ascent to convergence and return the relaxed
/// state. Stops when the objective changes by less than `tol` between
/// cycles or after `max_iter` cycles.
pub fn convex_relax_solve(
    s: &DMatrix<f64>,
    k: usize,
    gamma: f64,
    lambda: f64,
    omega: f64,
    max_iter: usize,
    tol: f64,
) -> Result<RelaxedGrouping> {
    if omega <= 0.0 {
        return Err(Error::InvalidArgument("omega must be positive".into()));
    }
    let ctx = ConvexContext::new(s, k, gamma, lambda)?;
    let mut d = initial_relaxation(s, k)?;
    let mut trace: Vec<f64> = Vec::new();

    for iteration in 1..=max_iter {
        for col in 0..k {
            let grad = ctx.gradient_column(&d, col)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { iteration });
            }
            for j in 0..ctx.p {
                d[(j, col)] += omega * grad[j];
            }
            project_rows(&mut d);
            debug_assert!(rows_feasible(&d));
        }
        let f = ctx.objective(&d)?;
        if !f.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        trace.push(f);
        let n = trace.len();
        if n >= 2 && (trace[n - 1] - trace[n - 2]).abs() < tol {
            break;
        }
    }

    Ok(RelaxedGrouping {
        d,
        gamma,
        lambda,
        omega,
        objective_trace: trace,
    })
}

/// Full estimator: solve the relaxation, round to a grouping, report the
/// block log-likelihood of the rounded result.
pub fn convex_relax_estimate(
    s: &DMatrix<f64>,
    k: usize,
    gamma: f64,
    lambda: f64,
    omega: f64,
    max_iter: usize,
    tol: f64,
) -> Result<EstimatorReport> {
    let started = Instant::now();
    let relaxed = convex_relax_solve(s, k, gamma, lambda, omega, max_iter, tol)?;
    let iterations = relaxed.objective_trace.len();
    EstimatorReport::from_grouping(Method::Convex, s, relaxed.round(), iterations, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::partition_match;
    use crate::rng;
    use crate::simgen;
    use approx::assert_relative_eq;

    fn defaults() -> ConvexDefaults {
        ConvexDefaults::default()
    }

    #[test]
    fn scratch_diagnose() {
        let (sigma, _) = simgen::make_sigma_a();
        for (gamma, lambda) in [(1.0, 1.0), (1.0, 0.0), (0.5, 0.1), (2.0, 1.0)] {
            let relaxed = convex_relax_solve(&sigma, 3, gamma, lambda, 0.1, 1000, 1e-6).unwrap();
            println!(
                "gamma={gamma} lambda={lambda}: iters={} trace_first={:?} trace_last={:?}",
                relaxed.objective_trace.len(),
                relaxed.objective_trace.first(),
                relaxed.objective_trace.last()
            );
            println!("rounded: {:?}", relaxed.round().assignment());
            println!("d = {:.4}", relaxed.d);
        }
    }

    #[test]
    fn recovers_sigma_a_partition_in_the_limit() {
        // population limit: feed the true covariance as S
        let (sigma, truth) = simgen::make_sigma_a();
        let p = defaults();
        let report =
            convex_relax_estimate(&sigma, 3, p.gamma, p.lambda, p.omega, p.max_iter, p.tol)
                .unwrap();
        assert!(
            partition_match(&report.grouping, &truth),
            "got {:?}",
            report.grouping.assignment()
        );
    }

    #[test]
    fn uniform_start_without_penalties_is_stationary() {
        let (sigma, _) = simgen::make_sigma_a();
        let ctx = ConvexContext::new(&sigma, 3, 0.0, 0.0).unwrap();
        let d = DMatrix::from_element(8, 3, 1.0 / 3.0);
        let f0 = ctx.objective(&d).unwrap();
        // the raw gradient is constant within each column, so its component
        // along the simplex (what survives renormalization) vanishes
        for col in 0..3 {
            let g = ctx.gradient_column(&d, col).unwrap();
            let mean = g.sum() / 8.0;
            for j in 0..8 {
                assert_relative_eq!(g[j], mean, epsilon = 1e-9);
            }
        }
        // a symmetric simultaneous step followed by projection goes nowhere
        let mut stepped = d.clone();
        for col in 0..3 {
            let g = ctx.gradient_column(&d, col).unwrap();
            for j in 0..8 {
                stepped[(j, col)] += 0.1 * g[j];
            }
        }
        project_rows(&mut stepped);
        for (a, b) in stepped.iter().zip(d.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        assert_relative_eq!(ctx.objective(&stepped).unwrap(), f0, epsilon = 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::stream(37);
        let a = DMatrix::from_fn(4, 4, |_, _| rng::standard_normal(&mut r));
        let s = &a * a.transpose() + DMatrix::identity(4, 4) * 0.5;
        let ctx = ConvexContext::new(&s, 2, 1.0, 1.0).unwrap();
        let h = 1e-5;
        for _ in 0..5 {
            // random interior feasible point
            let mut d = DMatrix::from_fn(4, 2, |_, _| rng::uniform(&mut r, 0.2, 1.0));
            for j in 0..4 {
                let sum: f64 = d.row(j).iter().sum();
                for c in 0..2 {
                    d[(j, c)] /= sum;
                }
            }
            for col in 0..2 {
                let grad = ctx.gradient_column(&d, col).unwrap();
                for j in 0..4 {
                    let mut plus = d.clone();
                    plus[(j, col)] += h;
                    let mut minus = d.clone();
                    minus[(j, col)] -= h;
                    let fd = (ctx.objective(&plus).unwrap() - ctx.objective(&minus).unwrap())
                        / (2.0 * h);
                    let scale = grad[j].abs().max(1.0);
                    assert!(
                        (fd - grad[j]).abs() <= 1e-4 * scale,
                        "col {col} row {j}: fd {fd} vs analytic {}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn projection_restores_feasibility() {
        let mut d = DMatrix::from_row_slice(2, 3, &[0.9, 0.6, -0.2, 1e-9, 0.5, 0.5]);
        project_rows(&mut d);
        assert!(rows_feasible(&d));
    }

    #[test]
    fn solver_keeps_rows_feasible_and_trace_finite() {
        let (sigma, _) = simgen::make_sigma_b();
        let data = simgen::sample_mvn(&nalgebra::DVector::zeros(8), &sigma, 200, 3).unwrap();
        let s = crate::stats::compute_stats(&data, None).unwrap().cov;
        let p = defaults();
        let relaxed =
            convex_relax_solve(&s, 3, p.gamma, p.lambda, p.omega, p.max_iter, p.tol).unwrap();
        assert!(rows_feasible(&relaxed.d));
        assert!(relaxed.objective_trace.iter().all(|f| f.is_finite()));
        assert!(!relaxed.objective_trace.is_empty());
    }

    #[test]
    fn k1_rounds_to_single_group() {
        let (sigma, _) = simgen::make_sigma_a();
        let p = defaults();
        let report =
            convex_relax_estimate(&sigma, 1, p.gamma, p.lambda, p.omega, 50, p.tol).unwrap();
        assert_eq!(report.grouping.assignment(), &[0; 8]);
    }

    #[test]
    fn invalid_omega_rejected() {
        let (sigma, _) = simgen::make_sigma_a();
        assert!(convex_relax_solve(&sigma, 3, 1.0, 1.0, 0.0, 10, 1e-6).is_err());
    }
}
