//! Plain Lloyd k-means with k-means++ seeding under squared Euclidean
//! distance. Fully deterministic for a given seed.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × D`
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Mean squared distance of each point to its assigned centroid.
    pub mean_sq_error: f64,
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Cluster the rows of `points`. `order_keys` breaks ties when repairing
/// empty clusters (lowest key wins); pass item ids.
pub fn kmeans(points: &Matrix, order_keys: &[u64], params: KMeansParams) -> Result<KMeans> {
    let n = points.rows;
    let k = params.k;
    if n == 0 {
        bail!(Argument, "k-means needs at least one point");
    }
    if k == 0 {
        bail!(Argument, "k-means needs k >= 1");
    }
    if params.iters == 0 {
        bail!(Argument, "k-means needs at least one iteration");
    }
    assert_eq!(order_keys.len(), n);
    let mut r = rng::seeded(params.seed);
    let mut centroids = seed_plus_plus(points, k, &mut r);

    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for _ in 0..params.iters {
        assign(points, &centroids, &mut assignments, &mut dists);
        update(points, &mut centroids, &mut assignments, &mut dists, order_keys);
    }
    assign(points, &centroids, &mut assignments, &mut dists);
    let mean_sq_error = dists.iter().sum::<f64>() / n as f64;
    Ok(KMeans { centroids, assignments, mean_sq_error })
}

fn seed_plus_plus(points: &Matrix, k: usize, r: &mut rng::SeededRng) -> Matrix {
    let n = points.rows;
    let d = points.cols;
    let mut centroids = Matrix::zeros(k, d);
    let first = rng::index(r, n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(r),
            // every point already coincides with a center
            Err(_) => rng::index(r, n),
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            let nd = sq_dist(points.row(i), centroids.row(c));
            if nd < *slot {
                *slot = nd;
            }
        }
    }
    centroids
}

fn assign(points: &Matrix, centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]) {
    for i in 0..points.rows {
        let (c, d) = nearest(points.row(i), centroids);
        assignments[i] = c;
        dists[i] = d;
    }
}

fn update(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize], dists: &mut [f64], keys: &[u64]) {
    let k = centroids.rows;
    let d = centroids.cols;
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
            continue;
        }
        // Empty cluster: move it onto the point farthest from its centroid.
        // Points already sitting on a centroid are never stolen.
        let mut far: Option<usize> = None;
        for i in 0..points.rows {
            if dists[i] <= 0.0 || counts[assignments[i]] <= 1 {
                continue;
            }
            far = match far {
                None => Some(i),
                Some(j) if dists[i] > dists[j] || (dists[i] == dists[j] && keys[i] < keys[j]) => Some(i),
                keep => keep,
            };
        }
        if let Some(i) = far {
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] = 1;
            dists[i] = 0.0;
            centroids.row_mut(c).copy_from_slice(points.row(i));
        }
    }
}
