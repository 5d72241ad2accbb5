//! Agglomerative clustering with unweighted average linkage.
//!
//! One linkage run records the full merge sequence, so a dendrogram can be
//! cut at any number of clusters without re-clustering. Ties in the minimum
//! inter-cluster distance are broken by the lexicographically smallest pair
//! of cluster representatives, which keeps the procedure fully deterministic.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One merge step: cluster `b` is absorbed into cluster `a` (a < b, both
/// identified by their smallest original member index).
#[derive(Debug, Clone, Copy)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// The full merge sequence for `n` items (length n - 1).
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Labels after replaying merges until `k` clusters remain.
    /// Group ids are assigned by first occurrence over item index.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::InvalidArgument(format!(
                "cannot cut {} items into {} clusters",
                self.n, k
            )));
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for merge in self.merges.iter().take(self.n - k) {
            let ra = find(&mut parent, merge.a);
            let rb = find(&mut parent, merge.b);
            // root at the smaller representative
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
        let mut label_of_root = vec![usize::MAX; self.n];
        let mut next = 0usize;
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let r = find(&mut parent, i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            labels.push(label_of_root[r]);
        }
        debug_assert_eq!(next, k);
        Ok(labels)
    }
}

/// Run average-linkage clustering to completion on a symmetric distance
/// matrix with zero diagonal.
pub fn average_linkage(dist: &DMatrix<f64>) -> Result<Dendrogram> {
    let n = dist.nrows();
    if n == 0 || dist.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix is {}x{}",
            n,
            dist.ncols()
        )));
    }
    let mut work = dist.clone();
    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for _ in 1..n {
        // smallest inter-cluster distance; ties to the smallest (a, b) pair
        let mut best = f64::INFINITY;
        let mut pair = (usize::MAX, usize::MAX);
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !active[b] {
                    continue;
                }
                let d = work[(a, b)];
                if d < best {
                    best = d;
                    pair = (a, b);
                }
            }
        }
        let (a, b) = pair;
        // UPGMA update: new distances are pair-count-weighted averages
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for h in 0..n {
            if h == a || h == b || !active[h] {
                continue;
            }
            let d = (sa * work[(a, h)] + sb * work[(b, h)]) / (sa + sb);
            work[(a, h)] = d;
            work[(h, a)] = d;
        }
        size[a] += size[b];
        active[b] = false;
        merges.push(Merge {
            a,
            b,
            distance: best,
        });
    }
    Ok(Dendrogram { n, merges })
}

/// Pairwise Euclidean distances between the rows of a matrix.
pub fn row_distance_matrix(features: &DMatrix<f64>) -> DMatrix<f64> {
    let n = features.nrows();
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..features.ncols() {
                let d = features[(i, c)] - features[(j, c)];
                acc += d * d;
            }
            let d = acc.sqrt();
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_obvious_clusters() {
        // 1-d points: {0.0, 0.1} and {9.0, 9.2}
        let pts = [0.0f64, 0.1, 9.0, 9.2];
        let dist = DMatrix::from_fn(4, 4, |i, j| (pts[i] - pts[j]).abs());
        let dendro = average_linkage(&dist).unwrap();
        let labels = dendro.cut(2).unwrap();
        assert_eq!(labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn cut_extremes() {
        let pts = [0.0f64, 1.0, 5.0];
        let dist = DMatrix::from_fn(3, 3, |i, j| (pts[i] - pts[j]).abs());
        let dendro = average_linkage(&dist).unwrap();
        assert_eq!(dendro.cut(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(dendro.cut(1).unwrap(), vec![0, 0, 0]);
        assert!(dendro.cut(0).is_err());
        assert!(dendro.cut(4).is_err());
    }

    #[test]
    fn upgma_average_of_all_pairs() {
        // clusters {0,1} and {2}: distance must average d(0,2) and d(1,2)
        let mut dist = DMatrix::zeros(3, 3);
        let set = |m: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
            m[(i, j)] = v;
            m[(j, i)] = v;
        };
        set(&mut dist, 0, 1, 1.0);
        set(&mut dist, 0, 2, 4.0);
        set(&mut dist, 1, 2, 8.0);
        let dendro = average_linkage(&dist).unwrap();
        assert_eq!(dendro.merges[0].a, 0);
        assert_eq!(dendro.merges[0].b, 1);
        // second merge joins at the UPGMA average (4 + 8) / 2 = 6
        assert_eq!(dendro.merges[1].distance, 6.0);
    }

    #[test]
    fn ties_break_to_smallest_pair() {
        // equilateral configuration: all distances equal
        let dist = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        let dendro = average_linkage(&dist).unwrap();
        assert_eq!(dendro.merges[0].a, 0);
        assert_eq!(dendro.merges[0].b, 1);
    }

    #[test]
    fn deterministic_across_runs() {
        let pts = [0.3f64, 1.4, 0.9, 7.7, 7.1, 3.3];
        let dist = DMatrix::from_fn(6, 6, |i, j| (pts[i] - pts[j]).abs());
        let a = average_linkage(&dist).unwrap().cut(3).unwrap();
        let b = average_linkage(&dist).unwrap().cut(3).unwrap();
        assert_eq!(a, b);
    }
}
