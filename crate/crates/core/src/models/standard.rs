//! Standard k-means: Lloyd iterations with seeded k-means++ initialization.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{domain, shape, Result};
use crate::linalg::{argmin, sq_dist, Matrix};
use crate::scalar::{count, Scalar};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StandardModel<T> {
    pub centroids: Matrix<T>,
}

impl<T: Scalar> StandardModel<T> {
    pub fn new(centroids: Matrix<T>) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(domain("a cluster model needs at least two centroids"));
        }
        if !centroids.is_finite() {
            return Err(domain("centroids must be finite"));
        }
        Ok(Self { centroids })
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Squared distances `‖x − μ_k‖²` to every centroid.
    pub fn outlierness(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(shape(format!(
                "point of dimension {} for model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.centroids.rows_iter().map(|m| sq_dist(x, m)).collect())
    }

    /// Nearest centroid, lowest index on ties.
    pub fn assign(&self, x: &[T]) -> Result<usize> {
        Ok(argmin(&self.outlierness(x)?))
    }
}

/// Result of a Lloyd run.
#[derive(Clone, Debug)]
pub struct LloydFit<T> {
    pub model: StandardModel<T>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each update.
    pub objective: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Within-cluster sum of squares for a given assignment and centroid set.
pub fn kmeans_objective<T: Scalar>(data: &Dataset<T>, centroids: &Matrix<T>, assignments: &[usize]) -> T {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &k)| sq_dist(data.point(i), centroids.row(k)))
        .sum()
}

fn means<T: Scalar>(data: &Dataset<T>, assignments: &[usize], k: usize) -> (Matrix<T>, Vec<usize>) {
    let mut sums = Matrix::zeros(k, data.dim());
    let mut sizes = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        sizes[a] += 1;
        for (s, &v) in sums.row_mut(a).iter_mut().zip(data.point(i)) {
            *s = *s + v;
        }
    }
    for (c, &n) in sizes.iter().enumerate() {
        if n > 0 {
            let n = count::<T>(n);
            sums.row_mut(c).iter_mut().for_each(|v| *v = *v / n);
        }
    }
    (sums, sizes)
}

/// Per-class mean rows, with the assignment frozen to the labels.
pub fn centroids_from_labels<T: Scalar>(data: &Dataset<T>) -> Result<StandardModel<T>> {
    let labels = data.require_labels()?;
    let k = data.n_classes().unwrap_or(0);
    let (centroids, sizes) = means(data, labels, k);
    if let Some(empty) = sizes.iter().position(|&n| n == 0) {
        return Err(domain(format!("class {empty} has no points")));
    }
    StandardModel::new(centroids)
}

fn plus_plus_seeds<T: Scalar>(data: &Dataset<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = data.len();
    let mut centroids = Matrix::zeros(k, data.dim());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.point(first));
    let mut nearest: Vec<T> = (0..n).map(|i| sq_dist(data.point(i), centroids.row(0))).collect();
    for c in 1..k {
        let weights: Vec<f64> = nearest.iter().map(|d| d.to_f64().unwrap_or(0.0)).collect();
        // all points coincide with a seed: fall back to the farthest-index rule
        let pick = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            Err(_) => c % n,
        };
        centroids.row_mut(c).copy_from_slice(data.point(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.point(i), centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds; stops when assignments repeat or
/// after [`MAX_LLOYD_ITERATIONS`].
pub fn train_standard<T: Scalar>(data: &Dataset<T>, k: usize, seed: u64) -> Result<LloydFit<T>> {
    if k < 2 {
        return Err(domain("k-means needs k >= 2"));
    }
    if k > data.len() {
        return Err(domain(format!("k = {k} exceeds the {} available points", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus_seeds(data, k, &mut rng);
    lloyd_from(data, seeds)
}

/// Lloyd iterations from explicit initial centroids.
pub fn lloyd_from<T: Scalar>(data: &Dataset<T>, init: Matrix<T>) -> Result<LloydFit<T>> {
    let k = init.nrows();
    if init.ncols() != data.dim() {
        return Err(shape("initial centroids do not match data dimension"));
    }
    let mut centroids = init;
    let mut assignments = vec![usize::MAX; data.len()];
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = (0..data.len())
            .map(|i| {
                let d: Vec<T> = centroids.rows_iter().map(|m| sq_dist(data.point(i), m)).collect();
                argmin(&d)
            })
            .collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        repair_empty(data, &mut centroids, &mut assignments);
        let (updated, _) = means(data, &assignments, k);
        centroids = updated;
        objective.push(kmeans_objective(data, &centroids, &assignments));
    }

    Ok(LloydFit {
        model: StandardModel::new(centroids)?,
        assignments,
        objective,
        iterations,
        converged,
    })
}

/// Moves the worst-fitting point into each empty cluster.
fn repair_empty<T: Scalar>(data: &Dataset<T>, centroids: &mut Matrix<T>, assignments: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        let Some(empty) = sizes.iter().position(|&n| n == 0) else {
            return;
        };
        let worst = (0..data.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(data.point(i), centroids.row(assignments[i]));
                let dj = sq_dist(data.point(j), centroids.row(assignments[j]));
                di.partial_cmp(&dj).unwrap_or(std::cmp::Ordering::Equal).then(j.cmp(&i))
            });
        let Some(worst) = worst else { return };
        assignments[worst] = empty;
        centroids.row_mut(empty).copy_from_slice(data.point(worst));
    }
}
