//! Clustering and covariance evaluation metrics.

use nalgebra::DMatrix;

use crate::blockstruct::ColumnGrouping;
use crate::error::{Error, Result};

/// Cross-tabulation of two labelings.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn from_labels(labels_a: &[usize], labels_b: &[usize]) -> Result<Self> {
        if labels_a.len() != labels_b.len() {
            return Err(Error::DimensionMismatch(format!(
                "label vectors of length {} and {}",
                labels_a.len(),
                labels_b.len()
            )));
        }
        let r = labels_a.iter().copied().max().map_or(0, |m| m + 1);
        let c = labels_b.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&a, &b) in labels_a.iter().zip(labels_b) {
            counts[a][b] += 1;
        }
        let row_sums: Vec<u64> = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        let n = row_sums.iter().sum();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n,
        })
    }
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Hubert-Arabie adjusted Rand index between two labelings.
///
/// Defined as 1.0 whenever the chance-correction denominator vanishes,
/// which covers the identical-single-cluster case.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(labels_a, labels_b)?;
    let index: f64 = table
        .counts
        .iter()
        .flat_map(|row| row.iter().map(|&c| choose2(c)))
        .sum();
    let sum_a: f64 = table.row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = table.col_sums.iter().map(|&c| choose2(c)).sum();
    let total_pairs = choose2(table.n);
    if total_pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total_pairs;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Maximum fraction of agreeing rows over injective mappings from predicted
/// labels onto truth labels, via optimal assignment on the contingency table.
/// Exhaustive over permutations when at most 8 labels are involved, Hungarian
/// assignment otherwise.
pub fn matched_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(predicted, truth)?;
    if table.n == 0 {
        return Err(Error::EmptyInput("no labels".into()));
    }
    let r = table.counts.len();
    let c = table.counts.first().map_or(0, |row| row.len());
    let side = r.max(c);
    // square matrix padded with zero counts
    let cost: Vec<Vec<i64>> = (0..side)
        .map(|i| {
            (0..side)
                .map(|j| {
                    if i < r && j < c {
                        table.counts[i][j] as i64
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let best = if side <= 8 {
        max_assignment_exhaustive(&cost)
    } else {
        hungarian_max(&cost)
    };
    Ok(best as f64 / table.n as f64)
}

fn max_assignment_exhaustive(cost: &[Vec<i64>]) -> i64 {
    let n = cost.len();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut best = i64::MIN;
    permute(&mut cols, 0, &mut |perm| {
        let total: i64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if total > best {
            best = total;
        }
    });
    best
}

fn permute(items: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// O(n^3) Hungarian algorithm (potentials + augmenting paths), maximizing.
pub(crate) fn hungarian_max(weight: &[Vec<i64>]) -> i64 {
    let n = weight.len();
    if n == 0 {
        return 0;
    }
    // convert to minimization
    let max_w = weight
        .iter()
        .flat_map(|row| row.iter().copied())
        .max()
        .unwrap_or(0);
    let cost = |i: usize, j: usize| max_w - weight[i][j];

    // 1-indexed potentials; p[j] = row matched to column j
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0i64;
    for j in 1..=n {
        if p[j] != 0 {
            total += weight[p[j] - 1][j - 1];
        }
    }
    total
}

/// Mean absolute percentage error between covariance matrices:
/// 100 * sum |t_ij - e_ij| / sum t_ij, with the signed denominator.
pub fn mape(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::DimensionMismatch(format!(
            "truth is {:?}, estimate is {:?}",
            truth.shape(),
            estimate.shape()
        )));
    }
    let denom: f64 = truth.iter().sum();
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "mape denominator (entry sum of the true matrix) is zero".into(),
        ));
    }
    let num: f64 = truth
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| (t - e).abs())
        .sum();
    Ok(100.0 * num / denom)
}

/// True iff the two groupings induce the same set partition.
pub fn partition_match(a: &ColumnGrouping, b: &ColumnGrouping) -> bool {
    a.p() == b.p() && a.canonical_assignment() == b.canonical_assignment()
}

/// Mean silhouette coefficient over points given a distance matrix and
/// labels. Singleton clusters contribute 0, as do points with a = b = 0.
pub fn silhouette_mean(dist: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if dist.nrows() != n || dist.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix {}x{} for {} labels",
            dist.nrows(),
            dist.ncols(),
            n
        )));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two nonempty clusters".into(),
        ));
    }

    let mut acc = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue; // singleton contributes 0
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[(i, j)];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&g| g != own && sizes[g] > 0)
            .map(|g| sums[g] / sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            acc += (b - a) / denom;
        }
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    #[test]
    fn ari_identical_labelings() {
        let a = vec![0, 0, 1, 1, 2];
        assert_relative_eq!(ari(&a, &a).unwrap(), 1.0);
        // label permutation of one side
        let b = vec![2, 2, 0, 0, 1];
        assert_relative_eq!(ari(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ari_constant_vs_all_distinct() {
        let a = vec![0; 6];
        let b = vec![0, 1, 2, 3, 4, 5];
        assert_relative_eq!(ari(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ari_hand_computed_case() {
        let a = vec![0, 0, 0, 1, 1, 1];
        let b = vec![0, 0, 1, 1, 2, 2];
        assert_relative_eq!(ari(&a, &b).unwrap(), 8.0 / 33.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_both_single_cluster() {
        let a = vec![0, 0, 0];
        assert_relative_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ari_symmetric_and_bounded() {
        let mut r = rng::stream(5);
        for _ in 0..50 {
            let n = 12;
            let a: Vec<usize> = (0..n)
                .map(|_| rng::uniform(&mut r, 0.0, 3.0) as usize)
                .collect();
            let b: Vec<usize> = (0..n)
                .map(|_| rng::uniform(&mut r, 0.0, 4.0) as usize)
                .collect();
            let ab = ari(&a, &b).unwrap();
            let ba = ari(&b, &a).unwrap();
            assert_relative_eq!(ab, ba, epsilon = 1e-12);
            assert!(ab <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn accuracy_relabeling_and_complement() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let relabeled = vec![2, 2, 0, 0, 1, 1];
        assert_relative_eq!(matched_accuracy(&truth, &relabeled).unwrap(), 1.0);

        let t2 = vec![0, 1, 0, 1];
        let complement = vec![1, 0, 1, 0];
        assert_relative_eq!(matched_accuracy(&t2, &complement).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_permutation_oracle() {
        let mut r = rng::stream(7);
        for _ in 0..30 {
            let truth: Vec<usize> = (0..12)
                .map(|_| rng::uniform(&mut r, 0.0, 3.0) as usize)
                .collect();
            let pred: Vec<usize> = (0..12)
                .map(|_| rng::uniform(&mut r, 0.0, 3.0) as usize)
                .collect();
            let fast = matched_accuracy(&truth, &pred).unwrap();
            // brute force over all 3! mappings of predicted onto truth labels
            let mut best = 0usize;
            let perms = [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ];
            for perm in perms {
                let hits = truth
                    .iter()
                    .zip(&pred)
                    .filter(|&(&t, &p)| perm[p] == t)
                    .count();
                best = best.max(hits);
            }
            assert_relative_eq!(fast, best as f64 / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        let mut r = rng::stream(11);
        for _ in 0..40 {
            let n = 5;
            let w: Vec<Vec<i64>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| rng::uniform(&mut r, 0.0, 50.0) as i64)
                        .collect()
                })
                .collect();
            assert_eq!(hungarian_max(&w), max_assignment_exhaustive(&w));
        }
    }

    #[test]
    fn accuracy_constant_prediction_lower_bound() {
        let truth = vec![0, 0, 0, 1, 1, 2];
        let pred = vec![0; 6];
        let acc = matched_accuracy(&truth, &pred).unwrap();
        assert_relative_eq!(acc, 0.5); // largest truth share
    }

    #[test]
    fn mape_cases() {
        let t = DMatrix::identity(2, 2);
        assert_relative_eq!(mape(&t, &t).unwrap(), 0.0);

        let mut e = t.clone();
        e[(0, 0)] = 1.1;
        e[(1, 1)] = 1.1;
        assert_relative_eq!(mape(&t, &e).unwrap(), 10.0, epsilon = 1e-12);

        let zero_sum = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(mape(&zero_sum, &t).is_err());
    }

    #[test]
    fn partition_match_cases() {
        let a = ColumnGrouping::new(vec![0, 0, 1, 2], 3).unwrap();
        let same = ColumnGrouping::new(vec![0, 0, 1, 2], 3).unwrap();
        let relabeled = ColumnGrouping::new(vec![2, 2, 0, 1], 3).unwrap();
        let moved = ColumnGrouping::new(vec![0, 1, 1, 2], 3).unwrap();
        assert!(partition_match(&a, &same));
        assert!(partition_match(&a, &relabeled));
        assert!(!partition_match(&a, &moved));
    }

    #[test]
    fn silhouette_two_tight_far_clusters() {
        // points 0,1 near the origin; 2,3 far away
        let pos = [0.0f64, 0.1, 10.0, 10.1];
        let dist = DMatrix::from_fn(4, 4, |i, j| (pos[i] - pos[j]).abs());
        let labels = vec![0, 0, 1, 1];
        let s = silhouette_mean(&dist, &labels).unwrap();
        assert!(s > 0.9, "silhouette {s}");
    }

    #[test]
    fn silhouette_identical_points_is_zero() {
        let dist = DMatrix::zeros(4, 4);
        let labels = vec![0, 0, 1, 1];
        assert_relative_eq!(silhouette_mean(&dist, &labels).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_single_cluster_errors() {
        let dist = DMatrix::zeros(3, 3);
        assert!(silhouette_mean(&dist, &[0, 0, 0]).is_err());
    }

    #[test]
    fn silhouette_random_labels_near_zero_on_uniform_distances() {
        let mut r = rng::stream(23);
        let n = 20;
        let dist = DMatrix::from_element(n, n, 1.0) - DMatrix::identity(n, n);
        let mut acc = 0.0;
        for _ in 0..100 {
            let labels: Vec<usize> = (0..n)
                .map(|_| rng::uniform(&mut r, 0.0, 3.0) as usize)
                .collect();
            if labels.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
                continue;
            }
            acc += silhouette_mean(&dist, &labels).unwrap();
        }
        assert!((acc / 100.0).abs() < 0.1);
    }

    #[test]
    fn silhouette_in_unit_interval() {
        let mut r = rng::stream(29);
        for _ in 0..20 {
            let n = 10;
            let pts: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, 0.0, 5.0)).collect();
            let dist = DMatrix::from_fn(n, n, |i, j| (pts[i] - pts[j]).abs());
            let labels: Vec<usize> = (0..n)
                .map(|_| rng::uniform(&mut r, 0.0, 3.0) as usize)
                .collect();
            if labels.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
                continue;
            }
            let s = silhouette_mean(&dist, &labels).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
