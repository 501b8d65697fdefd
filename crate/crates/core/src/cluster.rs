//! K-means grouping of patch embeddings into concept clusters.
//!
//! Initialization is k-means++ driven by a `ChaCha8Rng` seeded with the
//! caller's seed:
//!
//! 1. the first centre is `rng.gen_range(0..n)`;
//! 2. each further centre draws `u = rng.gen::<f64>() * total` and takes the
//!    first point whose cumulative squared distance to its nearest chosen
//!    centre exceeds `u` (if `total == 0` the lowest-index point is taken).
//!
//! Lloyd iterations then alternate mean updates and nearest-centre
//! assignment (ties go to the lowest cluster index) until the assignment is
//! unchanged or `max_iterations` is reached. A cluster that empties is
//! re-seeded to the point farthest from its own centre, lowest index first.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ClusterMask;
use crate::error::{CciError, Result};

pub const DEFAULT_K: usize = 7;
pub const DEFAULT_MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Scale each feature row to unit L2 norm before clustering.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub k: usize,
    pub assignment: Vec<usize>,
    /// `k` rows of `dim` values, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Within-cluster sum of squared distances of the final state.
    pub objective: f64,
    /// Objective after each assignment step, starting with the initial one.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl ClusterSet {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn masks(&self) -> Vec<ClusterMask> {
        cluster_masks(self)
    }
}

/// `masks[k]` flags exactly the patches assigned to cluster `k`.
pub fn cluster_masks(set: &ClusterSet) -> Vec<ClusterMask> {
    (0..set.k)
        .map(|k| ClusterMask::new(set.assignment.iter().map(|a| *a == k).collect()))
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl Points {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn prepare(features: ArrayView2<'_, f32>, normalize: bool) -> Result<Points> {
    let (n, dim) = features.dim();
    let mut data = Vec::with_capacity(n * dim);
    for row in features.rows() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CciError::NonFinite("clustering features"));
        }
        let start = data.len();
        data.extend(row.iter().map(|v| f64::from(*v)));
        if normalize {
            let norm = data[start..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut data[start..] {
                    *v /= norm;
                }
            }
        }
    }
    Ok(Points { data, n, dim })
}

fn kmeans_plus_plus(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * points.dim);
    let first = rng.gen_range(0..points.n);
    centroids.extend_from_slice(points.row(first));
    let mut nearest: Vec<f64> = (0..points.n)
        .map(|i| squared_distance(points.row(i), points.row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut chosen = 0;
        if total > 0.0 {
            let mut cumulative = 0.0;
            chosen = points.n - 1;
            for (i, d) in nearest.iter().enumerate() {
                cumulative += d;
                if cumulative > u {
                    chosen = i;
                    break;
                }
            }
        }
        let centre = points.row(chosen).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), &centre));
        }
        centroids.extend_from_slice(&centre);
    }
    centroids
}

/// Nearest-centre assignment with lowest-index tie-breaking; returns the
/// objective of the assignment against `centroids`.
fn assign(points: &Points, centroids: &[f64], k: usize, assignment: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (i, slot) in assignment.iter_mut().enumerate().take(points.n) {
        let p = points.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = squared_distance(p, &centroids[c * points.dim..(c + 1) * points.dim]);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        *slot = best;
        objective += best_d;
    }
    objective
}

fn update(points: &Points, assignment: &[usize], k: usize, centroids: &mut [f64]) {
    let dim = points.dim;
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    // Distances to the centres the points were assigned against.
    let mut spread: Vec<f64> = (0..points.n)
        .map(|i| {
            let a = assignment[i];
            squared_distance(points.row(i), &centroids[a * dim..(a + 1) * dim])
        })
        .collect();
    for c in 0..k {
        let target = &mut centroids[c * dim..(c + 1) * dim];
        if counts[c] > 0 {
            for (t, s) in target.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *t = s / counts[c] as f64;
            }
        } else {
            let mut far = 0;
            for i in 1..points.n {
                if spread[i] > spread[far] {
                    far = i;
                }
            }
            target.copy_from_slice(points.row(far));
            spread[far] = f64::NEG_INFINITY;
        }
    }
}

/// Clusters the rows of `features` into `k` groups.
pub fn kmeans(features: ArrayView2<'_, f32>, k: usize, seed: u64, config: &KMeansConfig) -> Result<ClusterSet> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(CciError::InvalidArgument(format!(
            "cluster count {k} must be between 1 and the number of points ({n})"
        )));
    }
    let points = prepare(features, config.normalize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut objective = assign(&points, &centroids, k, &mut assignment);
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut next = vec![0usize; n];
    while iterations < config.max_iterations {
        iterations += 1;
        update(&points, &assignment, k, &mut centroids);
        objective = assign(&points, &centroids, k, &mut next);
        history.push(objective);
        if next == assignment {
            break;
        }
        std::mem::swap(&mut assignment, &mut next);
    }

    Ok(ClusterSet {
        k,
        assignment,
        centroids,
        dim: points.dim,
        objective,
        objective_history: history,
        iterations,
        seed,
    })
}

/// Within-cluster sum of squares of an assignment against given centroids,
/// using the same row preparation as [`kmeans`].
pub fn wcss(features: ArrayView2<'_, f32>, set: &ClusterSet, normalize: bool) -> Result<f64> {
    let points = prepare(features, normalize)?;
    Ok((0..points.n)
        .map(|i| squared_distance(points.row(i), set.centroid(set.assignment[i])))
        .sum())
}
