//! Lloyd's k-means with k-means++ seeding, finished by Hartigan
//! single-point moves.
//!
//! The refinement only moves a point when that strictly lowers inertia, and
//! every Hartigan-stable partition is also a Lloyd fixed point, so the
//! result still assigns each point to its nearest centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{squared_euclidean, GeometryError};
use crate::matrix::EmbeddingMatrix;

pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Cluster index per matrix row.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_trace: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

pub fn kmeans(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult, GeometryError> {
    lloyd(matrix.as_flat(), matrix.dimension(), k, seed, max_iters)
}

/// Runs one k-means per seed and keeps the lowest inertia (earliest seed on ties).
pub fn kmeans_best_of(
    matrix: &EmbeddingMatrix,
    k: usize,
    seeds: impl IntoIterator<Item = u64>,
    max_iters: usize,
) -> Result<KMeansResult, GeometryError> {
    let mut best: Option<KMeansResult> = None;
    for seed in seeds {
        let run = kmeans(matrix, k, seed, max_iters)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.ok_or(GeometryError::ZeroIterations)
}

fn lloyd(
    data: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult, GeometryError> {
    let n = data.len() / dim.max(1);
    if k == 0 {
        return Err(GeometryError::ZeroK);
    }
    if k > n {
        return Err(GeometryError::KTooLarge { k, rows: n });
    }
    if max_iters == 0 {
        return Err(GeometryError::ZeroIterations);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut centroids = seed_plus_plus(data, dim, k, seed);
    let mut assignments = assign(data, dim, &centroids);
    let mut trace = vec![inertia(data, dim, &centroids, &assignments)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        centroids = update(data, dim, k, &mut assignments);
        let next = assign(data, dim, &centroids);
        trace.push(inertia(data, dim, &centroids, &next));
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        centroids = update(data, dim, k, &mut assignments);
    }
    if converged && hartigan(data, dim, &mut centroids, &mut assignments) {
        // Lloyd passes again from the refined partition until both agree.
        loop {
            let next = assign(data, dim, &centroids);
            trace.push(inertia(data, dim, &centroids, &next));
            let moved = next != assignments;
            assignments = next;
            centroids = update(data, dim, k, &mut assignments);
            let refined = hartigan(data, dim, &mut centroids, &mut assignments);
            if !moved && !refined {
                break;
            }
        }
        trace.push(inertia(data, dim, &centroids, &assignments));
    }
    let total = inertia(data, dim, &centroids, &assignments);
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia: total,
        iterations,
        inertia_trace: trace,
        converged,
    })
}

fn seed_plus_plus(data: &[f64], dim: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![point(first).to_vec()];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_euclidean(point(i), point(first)))
        .collect();

    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the final sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every remaining point coincides with a centre.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = point(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(squared_euclidean(point(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point; ties go to the lower cluster index.
fn assign(data: &[f64], dim: usize, centroids: &[Vec<f64>]) -> Vec<usize> {
    data.chunks_exact(dim)
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_euclidean(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Cluster means. An empty cluster takes over the point farthest from its
/// own centroid (among clusters that can spare one), and `assignments` is
/// updated to match.
fn update(data: &[f64], dim: usize, k: usize, assignments: &mut [usize]) -> Vec<Vec<f64>> {
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let means = |assignments: &[usize]| {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for (s, &cnt) in sums.iter_mut().zip(&counts) {
            if cnt > 0 {
                s.iter_mut().for_each(|v| *v /= cnt as f64);
            }
        }
        (sums, counts)
    };

    let (mut centroids, mut counts) = means(assignments);
    let mut repaired = false;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &c) in assignments.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = squared_euclidean(point(i), &centroids[c]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        counts[assignments[i]] -= 1;
        counts[empty] = 1;
        assignments[i] = empty;
        centroids[empty] = point(i).to_vec();
        repaired = true;
    }
    if repaired {
        centroids = means(assignments).0;
    }
    centroids
}

/// Moves single points between clusters while that lowers inertia,
/// keeping `centroids` equal to the cluster means. Returns whether anything
/// moved.
fn hartigan(data: &[f64], dim: usize, centroids: &mut [Vec<f64>], assignments: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    let mut any = false;
    loop {
        let mut moved = false;
        for (i, p) in data.chunks_exact(dim).enumerate() {
            let from = assignments[i];
            let n_from = counts[from] as f64;
            if counts[from] < 2 {
                continue;
            }
            let removal_gain = n_from / (n_from - 1.0) * squared_euclidean(p, &centroids[from]);
            let mut best = None;
            let mut best_cost = removal_gain;
            for (to, centroid) in centroids.iter().enumerate() {
                if to == from {
                    continue;
                }
                let n_to = counts[to] as f64;
                let cost = n_to / (n_to + 1.0) * squared_euclidean(p, centroid);
                // Relative margin keeps rounding noise from cycling moves.
                if cost < best_cost - 1e-12 * best_cost.max(1e-300) {
                    best_cost = cost;
                    best = Some(to);
                }
            }
            if let Some(to) = best {
                let n_to = counts[to] as f64;
                for (c, x) in centroids[from].iter_mut().zip(p) {
                    *c = (*c * n_from - x) / (n_from - 1.0);
                }
                for (c, x) in centroids[to].iter_mut().zip(p) {
                    *c = (*c * n_to + x) / (n_to + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                moved = true;
                any = true;
            }
        }
        if !moved {
            break;
        }
    }
    any
}

fn inertia(data: &[f64], dim: usize, centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    data.chunks_exact(dim)
        .zip(assignments)
        .map(|(p, &c)| squared_euclidean(p, &centroids[c]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        EmbeddingMatrix::new(ids, rows, "test", true).unwrap()
    }

    #[test]
    fn two_tight_pairs() {
        let m = matrix(vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ]);
        let r = kmeans(&m, 2, 1, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        // exhaustive optimum: two pairs, each contributes 2 * 0.05^2
        assert!((r.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let m = matrix(vec![vec![0.0], vec![1.0], vec![5.0], vec![2.5]]);
        let r = kmeans(&m, 4, 3, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for (i, &c) in r.assignments.iter().enumerate() {
            assert_eq!(r.centroids[c], m.row(i));
        }
    }

    #[test]
    fn duplicate_points_still_yield_k_clusters() {
        let m = matrix(vec![vec![1.0, 1.0]; 5]);
        let r = kmeans(&m, 3, 0, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.k(), 3);
        for c in 0..3 {
            assert!(r.members(c).count() >= 1);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 1.7).sin(), (i as f64 * 0.3).cos() * 2.0])
            .collect();
        let m = matrix(rows);
        let a = kmeans(&m, 4, 42, DEFAULT_MAX_ITERS).unwrap();
        let b = kmeans(&m, 4, 42, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inertia_trace_non_increasing_and_fixed_point() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.91).sin() * 4.0 + (i % 3) as f64 * 5.0, (t * 1.37).cos() * 3.0]
            })
            .collect();
        let m = matrix(rows);
        for seed in 0..10 {
            let r = kmeans(&m, 5, seed, DEFAULT_MAX_ITERS).unwrap();
            for w in r.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "trace rose: {:?}", r.inertia_trace);
            }
            assert!(r.converged);
            assert_eq!(assign(m.as_flat(), 2, &r.centroids), r.assignments);
        }
    }

    #[test]
    fn errors() {
        let m = matrix(vec![vec![0.0], vec![1.0]]);
        assert_eq!(
            kmeans(&m, 3, 0, 10).unwrap_err(),
            GeometryError::KTooLarge { k: 3, rows: 2 }
        );
        assert_eq!(kmeans(&m, 0, 0, 10).unwrap_err(), GeometryError::ZeroK);
        assert_eq!(kmeans(&m, 1, 0, 0).unwrap_err(), GeometryError::ZeroIterations);
    }

    #[test]
    fn tie_breaks_to_lower_cluster() {
        let cents = vec![vec![0.0], vec![2.0]];
        assert_eq!(assign(&[1.0], 1, &cents), vec![0]);
    }
}
