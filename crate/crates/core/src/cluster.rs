//! Lloyd's K-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
}

pub(crate) fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let m = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..m)));
    let mut d2: Vec<f64> = points.outer_iter().map(|x| sq_dist(x, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, x) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(c)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Empty clusters keep their previous centroid. Stops early once the
/// assignment no longer changes.
pub fn kmeans<R: Rng + ?Sized>(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, rng: &mut R) -> Result<KMeans> {
    let m = points.nrows();
    if k == 0 {
        return Err(Error::InvalidParameter("k-means needs k >= 1".into()));
    }
    if m < k {
        return Err(Error::InsufficientData(format!("{m} points for {k} clusters")));
    }
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; m];
    let mut inertia_trace = Vec::new();
    let mut inertia = 0.0;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        inertia = 0.0;
        for (i, x) in points.outer_iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia_trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, x) in points.outer_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &x);
            counts[assignments[i]] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / cnt as f64));
            }
        }
    }
    Ok(KMeans { centroids, assignments, inertia, inertia_trace })
}

/// Sorts centroid rows lexicographically (first coordinate first).
pub fn canonical_order(centroids: &Array2<f64>) -> Array2<f64> {
    let mut idx: Vec<usize> = (0..centroids.nrows()).collect();
    idx.sort_by(|&a, &b| {
        centroids
            .row(a)
            .iter()
            .zip(centroids.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    centroids.select(Axis(0), &idx)
}
