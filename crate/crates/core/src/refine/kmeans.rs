//! Seeded k-means (k-means++ seeding, Lloyd iterations).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EmbeddingSet;
use crate::error::{Error, Result};

// Below this many points the assignment step stays on the calling thread.
const PARALLEL_MIN_POINTS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major, `k * dim`.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    /// Index of the closest center; ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        nearest_center(&self.centers, self.dim, v)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(centers: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance(v, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Assigns every point to its nearest center; returns the assignments and
/// the inertia.
pub fn assign(data: &EmbeddingSet, centers: &[f64]) -> (Vec<usize>, f64) {
    let dim = data.dim();
    let pairs: Vec<(usize, f64)> = if data.len() >= PARALLEL_MIN_POINTS {
        (0..data.len())
            .into_par_iter()
            .map(|i| nearest_center(centers, dim, data.vector(i)))
            .collect()
    } else {
        (0..data.len())
            .map(|i| nearest_center(centers, dim, data.vector(i)))
            .collect()
    };
    // summed in index order so the result does not depend on thread count
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

/// k-means++ seeding: the first center uniformly, each next one with
/// probability proportional to its squared distance from the chosen set.
pub fn kmeans_plus_plus_init(data: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "k = {k} must be between 1 and the number of vectors ({n})"
        )));
    }
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = data.vector(first).to_vec();
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.vector(i), data.vector(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // every remaining point coincides with a center
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let v = data.vector(pick);
        centers.extend_from_slice(v);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(data.vector(i), v));
        }
    }
    debug_assert_eq!(centers.len(), k * dim);
    Ok(centers)
}

/// Recomputes centers as member means. An empty cluster takes the point
/// farthest from its current center (lowest index on ties) and moves it
/// over, updating `assignments`.
pub fn update_centers(data: &EmbeddingSet, assignments: &mut [usize], centers: &mut [f64]) {
    let dim = data.dim();
    let k = centers.len() / dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(data.vector(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for d in 0..dim {
                centers[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
            }
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &owner) in assignments.iter().enumerate() {
            if counts[owner] < 2 {
                continue;
            }
            let d = squared_distance(data.vector(i), &centers[owner * dim..(owner + 1) * dim]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(p) = far else { break };
        counts[assignments[p]] -= 1;
        assignments[p] = c;
        counts[c] = 1;
        centers[c * dim..(c + 1) * dim].copy_from_slice(data.vector(p));
    }
}

/// Lloyd iterations from `initial` centers until the assignment stops
/// changing or `max_iters` updates have run.
pub fn lloyd(data: &EmbeddingSet, initial: Vec<f64>, max_iters: usize) -> Result<ClusterModel> {
    if max_iters == 0 {
        return Err(Error::Argument("max_iters must be at least 1".into()));
    }
    let dim = data.dim();
    if initial.is_empty() || !initial.len().is_multiple_of(dim) {
        return Err(Error::Argument(format!(
            "initial centers length {} is not a multiple of dim {dim}",
            initial.len()
        )));
    }
    let k = initial.len() / dim;
    let mut centers = initial;
    let (mut assignments, mut inertia) = assign(data, &centers);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut moved = assignments.clone();
        update_centers(data, &mut moved, &mut centers);
        let (next, next_inertia) = assign(data, &centers);
        history.push(next_inertia);
        inertia = next_inertia;
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        dim,
        centers,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Seeded k-means: k-means++ initialisation followed by [`lloyd`].
pub fn kmeans(data: &EmbeddingSet, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    if max_iters == 0 {
        return Err(Error::Argument("max_iters must be at least 1".into()));
    }
    let init = kmeans_plus_plus_init(data, k, seed)?;
    lloyd(data, init, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn set(points: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::new(points.to_vec(), (0..points.len()).collect()).unwrap()
    }

    #[test]
    fn single_cluster_center_is_the_mean() {
        let data = set(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]);
        let m = kmeans(&data, 1, 7, 10).unwrap();
        approx::assert_abs_diff_eq!(m.center(0)[0], 1.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(m.center(0)[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = kmeans(&set(&pts), 6, 3, 10).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn k_larger_than_n_is_an_error() {
        let data = set(&[vec![0.0], vec![1.0]]);
        assert!(matches!(kmeans(&data, 3, 0, 10), Err(Error::Argument(_))));
        assert!(kmeans(&data, 1, 0, 0).is_err());
    }

    #[test]
    fn separated_clouds_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let base = if c == 0 { -5.0 } else { 5.0 };
            pts.push(vec![base + noise.sample(&mut rng), noise.sample(&mut rng)]);
            truth.push(c);
        }
        let m = kmeans(&set(&pts), 2, 1, 50).unwrap();
        let flip = m.assignments[0] != truth[0];
        for (a, t) in m.assignments.iter().zip(&truth) {
            assert_eq!(*a, if flip { 1 - t } else { *t });
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let m = ClusterModel {
            k: 2,
            dim: 1,
            centers: vec![-1.0, 1.0],
            assignments: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
        };
        assert_eq!(m.nearest(&[0.0]).0, 0);
        let m = ClusterModel {
            centers: vec![1.0, -1.0],
            ..m
        };
        assert_eq!(m.nearest(&[0.0]).0, 0);
    }

    #[test]
    fn empty_cluster_takes_farthest_point() {
        let data = set(&[vec![0.0], vec![1.0], vec![10.0]]);
        let mut assignments = vec![0, 0, 0];
        let mut centers = vec![0.0, 100.0];
        update_centers(&data, &mut assignments, &mut centers);
        assert_eq!(assignments, vec![0, 0, 1]);
        assert_eq!(centers[1], 10.0);
    }

    #[test]
    fn duplicate_points_still_seed_k_centers() {
        let data = set(&[vec![1.0], vec![1.0], vec![1.0]]);
        let m = kmeans(&data, 3, 5, 5).unwrap();
        assert_eq!(m.centers.len(), 3);
        assert_eq!(m.inertia, 0.0);
    }

    proptest! {
        #[test]
        fn inertia_never_increases_and_ends_at_fixpoint(
            raw in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let pts: Vec<Vec<f64>> = raw.iter().map(|(x, y)| vec![*x, *y]).collect();
            let k = k.min(pts.len());
            let data = set(&pts);
            let m = kmeans(&data, k, seed, 100).unwrap();
            for w in m.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            let (again, inertia) = assign(&data, &m.centers);
            prop_assert_eq!(&again, &m.assignments);
            prop_assert!((inertia - m.inertia).abs() <= 1e-12 * inertia.max(1.0));
            prop_assert_eq!(m, kmeans(&data, k, seed, 100).unwrap());
        }
    }
}
