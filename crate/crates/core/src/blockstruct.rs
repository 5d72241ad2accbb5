//! Column groupings and the block-diagonal covariance objective.
//!
//! A grouping partitions the p variables into K groups; projecting a
//! covariance onto it zeroes every entry whose row and column fall in
//! different groups. The log-likelihood of the projected structure
//! decomposes over blocks, which is what every estimator in this crate
//! maximizes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{principal_submatrix, ridged_cholesky};

/// A partition of `p` variable indices into `k` groups.
///
/// Stored as an assignment vector; the equivalent binary indicator matrix is
/// only materialized for I/O and tests. Empty groups are permitted in
/// intermediate states and can be queried with [`ColumnGrouping::empty_groups`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGrouping", into = "RawGrouping")]
pub struct ColumnGrouping {
    assignment: Vec<usize>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrouping {
    k: usize,
    assignment: Vec<usize>,
}

impl TryFrom<RawGrouping> for ColumnGrouping {
    type Error = Error;
    fn try_from(raw: RawGrouping) -> Result<Self> {
        ColumnGrouping::new(raw.assignment, raw.k)
    }
}

impl From<ColumnGrouping> for RawGrouping {
    fn from(g: ColumnGrouping) -> Self {
        RawGrouping {
            k: g.k,
            assignment: g.assignment,
        }
    }
}

impl ColumnGrouping {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::EmptyInput("assignment vector is empty".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&g| g >= k) {
            return Err(Error::InvalidArgument(format!(
                "group id {bad} out of range for k={k}"
            )));
        }
        Ok(Self { assignment, k })
    }

    /// All variables in one group.
    pub fn single_group(p: usize) -> Self {
        Self {
            assignment: vec![0; p],
            k: 1,
        }
    }

    /// Each variable in its own group.
    pub fn finest(p: usize) -> Self {
        Self {
            assignment: (0..p).collect(),
            k: p,
        }
    }

    pub fn p(&self) -> usize {
        self.assignment.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Variable indices per group, in index order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (j, &g) in self.assignment.iter().enumerate() {
            out[g].push(j);
        }
        out
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn empty_groups(&self) -> Vec<usize> {
        self.group_sizes()
            .iter()
            .enumerate()
            .filter_map(|(g, &s)| (s == 0).then_some(g))
            .collect()
    }

    /// Relabel groups by first occurrence, for label-invariant comparison.
    pub fn canonical_assignment(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0usize;
        self.assignment
            .iter()
            .map(|&g| {
                if map[g] == usize::MAX {
                    map[g] = next;
                    next += 1;
                }
                map[g]
            })
            .collect()
    }

    /// Binary indicator matrix D (p x k) with exactly one 1 per row.
    pub fn indicator_matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.p(), self.k);
        for (j, &g) in self.assignment.iter().enumerate() {
            d[(j, g)] = 1.0;
        }
        d
    }
}

/// A covariance matrix stored block-wise along a grouping.
#[derive(Debug, Clone)]
pub struct BlockCovariance {
    grouping: ColumnGrouping,
    /// One (possibly 0x0) symmetric matrix per group, indexed like the groups.
    blocks: Vec<DMatrix<f64>>,
    p: usize,
}

impl BlockCovariance {
    pub fn grouping(&self) -> &ColumnGrouping {
        &self.grouping
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Expand back to the dense p x p matrix (zero across groups).
    pub fn expanded(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.p);
        for (block, members) in self.blocks.iter().zip(self.grouping.groups()) {
            for (bi, &i) in members.iter().enumerate() {
                for (bj, &j) in members.iter().enumerate() {
                    out[(i, j)] = block[(bi, bj)];
                }
            }
        }
        out
    }

    /// Sum of block log-determinants (ridge policy applied per block).
    pub fn log_det(&self) -> Result<f64> {
        let mut acc = 0.0;
        for block in &self.blocks {
            if block.nrows() == 0 {
                continue;
            }
            acc += ridged_cholesky(block)?.log_det();
        }
        Ok(acc)
    }
}

/// Project a symmetric matrix onto the block-diagonal structure of a grouping.
///
/// Entry (i, j) survives iff i and j share a group; the diagonal is
/// preserved exactly.
pub fn project_block_diagonal(
    cov: &DMatrix<f64>,
    grouping: &ColumnGrouping,
) -> Result<BlockCovariance> {
    if cov.nrows() != cov.ncols() || cov.nrows() != grouping.p() {
        return Err(Error::DimensionMismatch(format!(
            "cov is {}x{}, grouping has p={}",
            cov.nrows(),
            cov.ncols(),
            grouping.p()
        )));
    }
    let blocks = grouping
        .groups()
        .iter()
        .map(|members| principal_submatrix(cov, members))
        .collect();
    Ok(BlockCovariance {
        grouping: grouping.clone(),
        blocks,
        p: grouping.p(),
    })
}

/// Profile log-likelihood of the block structure given a sample covariance:
/// -1/2 log|proj(S)| - 1/2 tr[proj(S)^-1 S], evaluated block-wise.
///
/// The projected matrix is block-diagonal, so its inverse never touches
/// cross-group entries of S and the trace reduces to per-block terms;
/// when a block needs no ridge its trace contribution is its size exactly.
pub fn block_loglik(sample_cov: &DMatrix<f64>, grouping: &ColumnGrouping) -> Result<f64> {
    if sample_cov.nrows() != sample_cov.ncols() || sample_cov.nrows() != grouping.p() {
        return Err(Error::DimensionMismatch(format!(
            "S is {}x{}, grouping has p={}",
            sample_cov.nrows(),
            sample_cov.ncols(),
            grouping.p()
        )));
    }
    let mut log_det = 0.0;
    let mut trace = 0.0;
    for members in grouping.groups() {
        if members.is_empty() {
            continue;
        }
        let block = principal_submatrix(sample_cov, &members);
        let fact = ridged_cholesky(&block)?;
        log_det += fact.log_det();
        if fact.ridge == 0.0 {
            trace += members.len() as f64;
        } else {
            trace += fact.solve_matrix(&block).trace();
        }
    }
    Ok(-0.5 * log_det - 0.5 * trace)
}
