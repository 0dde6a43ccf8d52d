//! Two-cluster Lloyd iteration with a deterministic farthest-pair start.

use crate::error::{invalid, Result};
use crate::tensor::squared_distance;

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoClusters {
    /// Cluster (0 or 1) of each input point, in input order.
    pub labels: Vec<usize>,
    /// Set when every point coincides; the split is then `{first}` vs rest.
    pub degenerate: bool,
    pub iterations: usize,
}

impl TwoClusters {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    /// Within-cluster sum of squared distances to each cluster's mean.
    pub fn sse(&self, points: &[Vec<f64>]) -> f64 {
        (0..2)
            .map(|c| {
                let idx = self.members(c);
                if idx.is_empty() {
                    return 0.0;
                }
                let mean = centroid(points, &idx);
                idx.iter().map(|&i| squared_distance(&points[i], &mean)).sum::<f64>()
            })
            .sum()
    }
}

fn centroid(points: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for &i in idx {
        for (a, v) in c.iter_mut().zip(&points[i]) {
            *a += v;
        }
    }
    let n = idx.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Splits `points` into two non-empty clusters.
///
/// Initial centroids are the two points at maximal pairwise distance (first
/// such pair in index order). Assignment ties go to the cluster of the
/// lower-indexed seed point.
pub fn kmeans2(points: &[Vec<f64>]) -> Result<TwoClusters> {
    let n = points.len();
    if n < 2 {
        return invalid(format!("kmeans2 needs at least 2 points, got {n}"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return invalid("kmeans2 points have mixed dimensions");
    }

    let (mut a, mut b, mut best) = (0, 1, -1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&points[i], &points[j]);
            if d > best {
                best = d;
                a = i;
                b = j;
            }
        }
    }
    if best == 0.0 {
        let mut labels = vec![1; n];
        labels[0] = 0;
        return Ok(TwoClusters { labels, degenerate: true, iterations: 0 });
    }

    let mut centroids = [points[a].clone(), points[b].clone()];
    let mut labels = vec![0; n];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            let d0 = squared_distance(p, &centroids[0]);
            let d1 = squared_distance(p, &centroids[1]);
            labels[i] = usize::from(d1 < d0);
        }
        let mut shift = 0.0f64;
        for c in 0..2 {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let next = centroid(points, &idx);
            shift = shift.max(squared_distance(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < SHIFT_TOL {
            break;
        }
    }

    // Lloyd steps from two distinct seeds cannot empty a cluster in exact
    // arithmetic, but guard anyway: move the point farthest from the other centroid.
    for c in 0..2 {
        if !labels.contains(&c) {
            let other = 1 - c;
            let far = (0..n)
                .max_by(|&i, &j| {
                    squared_distance(&points[i], &centroids[other])
                        .total_cmp(&squared_distance(&points[j], &centroids[other]))
                        .then(j.cmp(&i))
                })
                .expect("n >= 2");
            labels[far] = c;
        }
    }
    Ok(TwoClusters { labels, degenerate: false, iterations })
}
