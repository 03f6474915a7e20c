use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{domain, shape, Result};
use crate::linalg::{sq_norm, Matrix};
use crate::scalar::{lit, Scalar};

/// N×D points with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    points: Matrix<T>,
    labels: Option<Vec<usize>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(points: Matrix<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(domain("dataset must have at least one point and one feature"));
        }
        if !points.is_finite() {
            return Err(domain("dataset contains non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(shape(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.nrows()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R], labels: Option<Vec<usize>>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, labels)
    }

    pub fn points(&self) -> &Matrix<T> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[T] {
        self.points.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Number of distinct label values, i.e. `max(label) + 1`.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub(crate) fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| domain("operation requires a labeled dataset"))
    }

    /// Indices of the points carrying each label.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.require_labels()?;
        let k = self.n_classes().unwrap_or(0);
        let mut groups = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            groups[y].push(i);
        }
        Ok(groups)
    }

    /// Rescales every point to unit Euclidean norm; zero rows are left as is.
    pub fn unit_norm(&self) -> Self {
        let mut points = self.points.clone();
        for i in 0..points.nrows() {
            let row = points.row_mut(i);
            let n = sq_norm(row).sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            }
        }
        Self {
            points,
            labels: self.labels.clone(),
        }
    }
}

/// Default blob centers: evenly spaced on a circle in the first two
/// coordinates (a line when `dim == 1`), neighbours at least 4 apart.
pub fn blob_centers(k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut centers = vec![vec![0.0; dim]; k];
    if dim == 1 {
        for (i, c) in centers.iter_mut().enumerate() {
            c[0] = 4.0 * (i as f64 - (k as f64 - 1.0) / 2.0);
        }
        return centers;
    }
    let radius = if k > 1 {
        (2.0 / (std::f64::consts::PI / k as f64).sin()).max(4.0)
    } else {
        0.0
    };
    for (i, c) in centers.iter_mut().enumerate() {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        c[0] = radius * theta.cos();
        c[1] = radius * theta.sin();
    }
    centers
}

/// Isotropic Gaussian blobs around [`blob_centers`], labeled by blob.
pub fn make_blobs<T: Scalar>(
    n_per_cluster: usize,
    k: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    make_blobs_at(&blob_centers(k, dim), n_per_cluster, spread, seed)
}

/// Isotropic Gaussian blobs around explicit centers.
pub fn make_blobs_at<T: Scalar>(
    centers: &[Vec<f64>],
    n_per_cluster: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if centers.is_empty() || n_per_cluster == 0 {
        return Err(domain("blobs need at least one center and one point per center"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(domain(format!("spread must be non-negative, got {spread}")));
    }
    let dim = centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(centers.len() * n_per_cluster);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (label, c) in centers.iter().enumerate() {
        if c.len() != dim {
            return Err(shape("blob centers differ in dimension"));
        }
        for _ in 0..n_per_cluster {
            let row: Vec<T> = c
                .iter()
                .map(|&m| lit::<T>(m + spread * normal.sample(&mut rng)))
                .collect();
            rows.push(row);
            labels.push(label);
        }
    }
    Dataset::from_rows(&rows, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_input() {
        assert!(Dataset::<f64>::from_rows(&[[f64::NAN]], None).is_err());
        assert!(Dataset::<f64>::from_rows(&[[1.0], [2.0]], Some(vec![0])).is_err());
        assert!(Dataset::new(Matrix::<f64>::zeros(0, 2), None).is_err());
    }

    #[test]
    fn zero_spread_repeats_centers() {
        let d: Dataset<f64> = make_blobs(3, 2, 2, 0.0, 1).unwrap();
        let centers = blob_centers(2, 2);
        for i in 0..d.len() {
            let y = d.labels().unwrap()[i];
            assert_eq!(d.point(i), centers[y].as_slice());
        }
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        let a: Dataset<f64> = make_blobs(10, 3, 4, 0.7, 42).unwrap();
        let b: Dataset<f64> = make_blobs(10, 3, 4, 0.7, 42).unwrap();
        let c: Dataset<f64> = make_blobs(10, 3, 4, 0.7, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn blob_means_near_centers() {
        let n = 400;
        let spread = 0.5;
        let d: Dataset<f64> = make_blobs(n, 3, 2, spread, 7).unwrap();
        let centers = blob_centers(3, 2);
        let groups = d.class_indices().unwrap();
        for (k, idx) in groups.iter().enumerate() {
            for f in 0..2 {
                let mean: f64 = idx.iter().map(|&i| d.point(i)[f]).sum::<f64>() / n as f64;
                assert!((mean - centers[k][f]).abs() < 3.0 * spread / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn unit_norm_rows() {
        let d = Dataset::from_rows(&[[3.0, 4.0], [0.0, 0.0]], None).unwrap();
        let u = d.unit_norm();
        assert_eq!(u.point(0), &[0.6, 0.8]);
        assert_eq!(u.point(1), &[0.0, 0.0]);
    }
}
