//! Lloyd's k-means with k-means++ seeding.
//!
//! Assignment runs in parallel over fixed-size point shards and centroid sums
//! are reduced shard by shard in index order, so the result does not depend
//! on the number of worker threads.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::stage_rng;

const SHARD: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Array2<f64>,
    /// Sum of squared distances of the training points to their nearest centroid.
    pub inertia: f64,
    /// Lloyd iterations performed after seeding.
    pub iterations: usize,
    /// Inertia after seeding and after every iteration; non-increasing.
    pub inertia_history: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid of `x` (ties → smaller id) and its squared distance.
    pub fn nearest(&self, x: ArrayView1<f64>) -> (usize, f64) {
        nearest(self.centroids.view(), x)
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn shards(n: usize) -> usize {
    n.div_ceil(SHARD)
}

fn assign(points: ArrayView2<f64>, centroids: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    let n = points.nrows();
    let parts: Vec<Vec<(usize, f64)>> = (0..shards(n))
        .into_par_iter()
        .map(|s| {
            (s * SHARD..((s + 1) * SHARD).min(n))
                .map(|i| nearest(centroids, points.row(i)))
                .collect()
        })
        .collect();
    parts.into_iter().flatten().unzip()
}

/// Per-cluster sums and counts, reduced over shards in order.
fn cluster_sums(points: ArrayView2<f64>, labels: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let n = points.nrows();
    let d = points.ncols();
    let partials: Vec<(Array2<f64>, Vec<usize>)> = (0..shards(n))
        .into_par_iter()
        .map(|s| {
            let mut sums = Array2::<f64>::zeros((k, d));
            let mut counts = vec![0usize; k];
            for i in s * SHARD..((s + 1) * SHARD).min(n) {
                sums.row_mut(labels[i]).scaled_add(1.0, &points.row(i));
                counts[labels[i]] += 1;
            }
            (sums, counts)
        })
        .collect();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        sums += &s;
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    (sums, counts)
}

fn kmeans_plus_plus<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::<f64>::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && r < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave r just past the last positive weight
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Stops after `max_iters` Lloyd iterations or as soon as an iteration leaves
/// every assignment unchanged. A cluster that loses all its points is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: ArrayView2<f64>, k: usize, max_iters: usize, seed: u64) -> Result<(KMeansModel, Vec<usize>)> {
    kmeans_restarts(points, k, max_iters, seed, 1)
}

/// Runs `restarts` independently seeded k-means and keeps the lowest final
/// inertia, the earliest run on ties.
pub fn kmeans_restarts(
    points: ArrayView2<f64>,
    k: usize,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<(KMeansModel, Vec<usize>)> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::Cardinality(format!("cannot form {k} clusters from {n} points")));
    }
    if restarts == 0 {
        return Err(Error::Parameter("k-means needs at least one restart".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite k-means input".into()));
    }
    let mut rng = stage_rng(seed, "kmeans");
    let mut best = lloyd(points, k, max_iters, &mut rng);
    for _ in 1..restarts {
        let run = lloyd(points, k, max_iters, &mut rng);
        if run.0.inertia < best.0.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd<R: Rng>(points: ArrayView2<f64>, k: usize, max_iters: usize, rng: &mut R) -> (KMeansModel, Vec<usize>) {
    let n = points.nrows();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let (mut labels, mut dists) = assign(points.view(), centroids.view());
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let (sums, counts) = cluster_sums(points, &labels, k);
        for j in 0..k {
            if counts[j] > 0 {
                let row = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&row);
            }
        }
        for (i, d) in dists.iter_mut().enumerate() {
            *d = sq_dist(points.row(i), centroids.row(labels[i]));
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = 0;
            for i in 1..n {
                if dists[i] > dists[far] {
                    far = i;
                }
            }
            centroids.row_mut(j).assign(&points.row(far));
            labels[far] = j;
            dists[far] = 0.0;
        }
        let (new_labels, new_dists) = assign(points, centroids.view());
        let inertia: f64 = new_dists.iter().sum();
        let prev = *history.last().expect("seeded");
        debug_assert!(
            inertia <= prev * (1.0 + 1e-9) + 1e-300,
            "k-means inertia increased from {prev} to {inertia}"
        );
        history.push(inertia);
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if converged {
            break;
        }
    }

    let inertia = *history.last().expect("seeded");
    (
        KMeansModel {
            centroids,
            inertia,
            iterations,
            inertia_history: history,
        },
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = random_points(12, 3, 1);
        let (m, labels) = kmeans(pts.view(), 12, 50, 3).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut seen = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(m.centroids.row(l), pts.row(i));
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = random_points(30, 4, 2);
        let (m, _) = kmeans(pts.view(), 1, 10, 0).unwrap();
        let mean: Array1<f64> = pts.mean_axis(ndarray::Axis(0)).unwrap();
        for d in 0..4 {
            assert!((m.centroids[[0, d]] - mean[d]).abs() < 1e-12);
        }
        let var_total: f64 = pts
            .rows()
            .into_iter()
            .map(|r| (&r - &mean).mapv(|v| v * v).sum())
            .sum();
        assert!((m.inertia - var_total).abs() < 1e-9);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let centers = [[0.0, 0.0], [10.0, 0.0]];
        let mut pts = Array2::<f64>::zeros((40, 2));
        let mut truth = vec![0usize; 40];
        for i in 0..40 {
            let b = i % 2;
            truth[i] = b;
            for d in 0..2 {
                pts[[i, d]] = centers[b][d] + noise.sample(&mut rng);
            }
        }
        let (m, labels) = kmeans(pts.view(), 2, 100, 9).unwrap();
        let map0 = labels[0];
        for i in 0..40 {
            assert_eq!(labels[i] == map0, truth[i] == 0);
        }
        for (i, c) in centers.iter().enumerate() {
            let j = labels[i];
            assert!((m.centroids[[j, 0]] - c[0]).abs() < 0.1 && (m.centroids[[j, 1]] - c[1]).abs() < 0.1);
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(random_points(3, 2, 0).view(), 4, 10, 0),
            Err(Error::Cardinality(_))
        ));
    }

    #[test]
    fn duplicate_points_still_seed() {
        let pts = Array2::from_elem((5, 2), 1.0);
        let (m, _) = kmeans(pts.view(), 3, 10, 0).unwrap();
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let pts = random_points(200, 5, 100 + seed);
            let (m, _) = kmeans(pts.view(), 7, 100, seed).unwrap();
            for w in m.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {w:?}");
            }
        }
    }
}
