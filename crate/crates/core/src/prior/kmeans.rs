//! K-means with k-means++ seeding.
//!
//! Lloyd iterations run until assignments stop changing (or `max_iters`),
//! then single-point moves are applied while any move lowers the inertia
//! with means recomputed. The result is a local optimum under moving any
//! one point to another cluster, which implies nearest-centroid assignment.

use crate::error::{MgfError, Result};
use crate::numerics::Rng;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Cluster proportions `n_k / n`.
    pub weights: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each update, starting with the first Lloyd step.
    pub inertia_history: Vec<f64>,
}

impl KMeansFit {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            c[a] += 1;
        }
        c
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn validate(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(MgfError::invalid("k-means needs k >= 1"));
    }
    if points.len() < k {
        return Err(MgfError::invalid(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(MgfError::invalid("k-means points must share a positive dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MgfError::NonFinite("k-means input".into()));
    }
    Ok(dim)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            rng.categorical(&d2)
        } else {
            // All remaining points coincide with a centroid.
            rng.below(points.len())
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, c));
        }
    }
    centroids
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Hands each empty cluster the point currently farthest from its own
/// centroid, taken from a cluster with more than one member.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = squared_distance(&points[i], &centroids[assignments[i]]);
                let dj = squared_distance(&points[j], &centroids[assignments[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("n >= k guarantees a donor cluster");
        assignments[far] = empty;
    }
}

pub fn fit_kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansFit> {
    let dim = validate(points, k)?;
    let n = points.len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(points, &centroids, &mut assignments, k);
    let mut history = Vec::new();
    let mut counts;
    (centroids, counts) = means(points, &assignments, k, dim);
    history.push(inertia(points, &centroids, &assignments));

    for _ in 0..max_iters {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &centroids, &mut next, k);
        if next == assignments {
            break;
        }
        assignments = next;
        (centroids, counts) = means(points, &assignments, k, dim);
        history.push(inertia(points, &centroids, &assignments));
    }

    // Single-point refinement.
    loop {
        let mut moved = false;
        for i in 0..n {
            let from = assignments[i];
            if counts[from] <= 1 {
                continue;
            }
            let nf = counts[from] as f64;
            let loss_out = nf / (nf - 1.0) * squared_distance(&points[i], &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&t| t != from) {
                let nt = counts[to] as f64;
                let gain_in = nt / (nt + 1.0) * squared_distance(&points[i], &centroids[to]);
                if gain_in < loss_out * (1.0 - 1e-12) && best.is_none_or(|(_, b)| gain_in < b) {
                    best = Some((to, gain_in));
                }
            }
            if let Some((to, _)) = best {
                let p = &points[i];
                let (nf, nt) = (counts[from] as f64, counts[to] as f64);
                for d in 0..dim {
                    centroids[from][d] = (centroids[from][d] * nf - p[d]) / (nf - 1.0);
                    centroids[to][d] = (centroids[to][d] * nt + p[d]) / (nt + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        // Recompute exactly to shed incremental rounding.
        (centroids, counts) = means(points, &assignments, k, dim);
        history.push(inertia(points, &centroids, &assignments));
    }

    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(KMeansFit {
        inertia: inertia(points, &centroids, &assignments),
        centroids,
        assignments,
        weights,
        inertia_history: history,
    })
}
