//! Sample statistics and Gaussian density primitives.
//!
//! Covariances use the maximum-likelihood divisor N (not N-1) throughout,
//! and the weighted forms reduce to the plain ones under unit weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::ridged_cholesky;

/// An N x p observation matrix with optional row labels and column names.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    row_labels: Option<Vec<String>>,
    col_names: Option<Vec<String>>,
}

impl DataMatrix {
    /// Validate and wrap a dense matrix.
    pub fn new(
        values: DMatrix<f64>,
        row_labels: Option<Vec<String>>,
        col_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyInput(format!(
                "data matrix must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some((i, j)) = values
            .row_iter()
            .enumerate()
            .find_map(|(i, row)| row.iter().position(|v| !v.is_finite()).map(|j| (i, j)))
        {
            return Err(Error::NonFinite(format!("entry at row {i}, column {j}")));
        }
        if let Some(labels) = &row_labels {
            if labels.len() != values.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "{} row labels for {} rows",
                    labels.len(),
                    values.nrows()
                )));
            }
        }
        if let Some(names) = &col_names {
            if names.len() != values.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "{} column names for {} columns",
                    names.len(),
                    values.ncols()
                )));
            }
        }
        Ok(Self {
            values,
            row_labels,
            col_names,
        })
    }

    /// Matrix without labels.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, None, None)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_labels(&self) -> Option<&[String]> {
        self.row_labels.as_deref()
    }

    pub fn col_names(&self) -> Option<&[String]> {
        self.col_names.as_deref()
    }

    /// New matrix restricted to the given columns (in the given order).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.p()) {
            return Err(Error::DimensionMismatch(format!(
                "column index {bad} out of range for p={}",
                self.p()
            )));
        }
        let values = DMatrix::from_fn(self.n(), cols.len(), |i, j| self.values[(i, cols[j])]);
        let col_names = self
            .col_names
            .as_ref()
            .map(|names| cols.iter().map(|&c| names[c].clone()).collect());
        Self::new(values, self.row_labels.clone(), col_names)
    }
}

/// Weighted mean, MLE covariance and correlation of one (sub)sample.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub corr: DMatrix<f64>,
    /// Total weight mass behind the estimate.
    pub n: f64,
}

/// Mean, covariance (divisor = total weight) and correlation.
///
/// Zero-variance columns produce a correlation row/column that is zero off
/// the diagonal and one on it.
pub fn compute_stats(data: &DataMatrix, weights: Option<&[f64]>) -> Result<SampleStats> {
    let x = data.values();
    let (n, p) = (x.nrows(), x.ncols());
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} rows",
                w.len(),
                n
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("weights must be finite and nonnegative".into()));
        }
    }
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }

    let mut mean = DVector::zeros(p);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        for j in 0..p {
            mean[j] += w * x[(i, j)];
        }
    }
    mean /= total;

    let mut cov = DMatrix::zeros(p, p);
    let mut centered = DVector::zeros(p);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        for j in 0..p {
            centered[j] = x[(i, j)] - mean[j];
        }
        for a in 0..p {
            let wa = w * centered[a];
            for b in a..p {
                cov[(a, b)] += wa * centered[b];
            }
        }
    }
    cov /= total;
    for a in 0..p {
        for b in (a + 1)..p {
            cov[(b, a)] = cov[(a, b)];
        }
    }

    let corr = correlation_from_cov(&cov);

    Ok(SampleStats {
        mean,
        cov,
        corr,
        n: total,
    })
}

/// Correlation matrix from a covariance matrix. Zero-variance columns get a
/// zero off-diagonal row/column and a unit diagonal.
pub fn correlation_from_cov(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let p = cov.nrows();
    let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let mut corr = DMatrix::zeros(p, p);
    for a in 0..p {
        corr[(a, a)] = 1.0;
        for b in (a + 1)..p {
            let denom = sd[a] * sd[b];
            let r = if denom > 0.0 { cov[(a, b)] / denom } else { 0.0 };
            corr[(a, b)] = r;
            corr[(b, a)] = r;
        }
    }
    corr
}

/// Log density of a multivariate normal, via Cholesky of `cov`.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let p = mean.len();
    if x.len() != p || cov.nrows() != p || cov.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "x: {}, mean: {}, cov: {}x{}",
            x.len(),
            p,
            cov.nrows(),
            cov.ncols()
        )));
    }
    let fact = ridged_cholesky(cov)?;
    let diff = x - mean;
    // Mahalanobis term through the triangular factor: solve L y = diff.
    let y = fact.chol.l_dirty().solve_lower_triangular(&diff).ok_or_else(|| {
        Error::SingularMatrix("triangular solve failed in gaussian_logpdf".into())
    })?;
    let maha = y.dot(&y);
    Ok(-0.5 * (p as f64) * (std::f64::consts::TAU).ln() - 0.5 * fact.log_det() - 0.5 * maha)
}

/// Center every column to mean zero and scale to unit population variance.
/// Zero-variance columns are centered and left unscaled.
pub fn standardize(data: &DataMatrix) -> DataMatrix {
    let stats = compute_stats(data, None).expect("DataMatrix invariants guarantee valid stats");
    let x = data.values();
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = DMatrix::zeros(n, p);
    for j in 0..p {
        let sd = stats.cov[(j, j)].max(0.0).sqrt();
        for i in 0..n {
            let c = x[(i, j)] - stats.mean[j];
            out[(i, j)] = if sd > 0.0 { c / sd } else { c };
        }
    }
    DataMatrix::new(
        out,
        data.row_labels().map(|l| l.to_vec()),
        data.col_names().map(|c| c.to_vec()),
    )
    .expect("standardized matrix keeps the input shape")
}
