//! Gaussian-kernel k-means with unit-norm feature-space centroids.
//!
//! A cluster is represented by its members `C_k` among the support points
//! and the normalizer `Z_k = (Σ_{j,j'∈C_k} κ(x_j, x_j'))^½`, so that the
//! centroid `Z_k⁻¹ Σ_{j∈C_k} Φ(x_j)` has unit norm.

use serde::{Deserialize, Serialize};

use super::standard::train_standard;
use super::Dataset;
use crate::error::{domain, shape, Error, Result};
use crate::linalg::{argmax, sq_dist, Matrix};
use crate::pooling::{soft_min_unchecked, Stiffness};
use crate::scalar::Scalar;

/// Largest support set for which the full kernel matrix is materialized.
pub const DEFAULT_MAX_KERNEL_POINTS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KernelModel<T> {
    pub support: Matrix<T>,
    /// Cluster index of every support point.
    pub membership: Vec<usize>,
    pub gamma: Stiffness<T>,
    /// `Z_k` for every cluster.
    pub normalizers: Vec<T>,
}

impl<T: Scalar> KernelModel<T> {
    /// Builds the model and computes the normalizers from the memberships.
    pub fn new(support: Matrix<T>, membership: Vec<usize>, n_clusters: usize, gamma: Stiffness<T>) -> Result<Self> {
        let g = finite_gamma(gamma)?;
        if membership.len() != support.nrows() {
            return Err(shape(format!(
                "{} memberships for {} support points",
                membership.len(),
                support.nrows()
            )));
        }
        if n_clusters < 2 {
            return Err(domain("a cluster model needs at least two clusters"));
        }
        if !support.is_finite() {
            return Err(domain("support points must be finite"));
        }
        let groups = group(&membership, n_clusters)?;
        let normalizers = groups
            .iter()
            .map(|members| {
                let mut q = T::zero();
                for &a in members {
                    for &b in members {
                        q = q + (-g * sq_dist(support.row(a), support.row(b))).exp();
                    }
                }
                q.sqrt()
            })
            .collect();
        Ok(Self {
            support,
            membership,
            gamma,
            normalizers,
        })
    }

    /// Checks the invariants of a deserialized model, including that the
    /// stored normalizers match the memberships.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(
            self.support.clone(),
            self.membership.clone(),
            self.normalizers.len(),
            self.gamma,
        )?;
        for (a, b) in rebuilt.normalizers.iter().zip(&self.normalizers) {
            if (*a - *b).abs() > T::epsilon().sqrt() * a.abs() {
                return Err(domain("stored normalizers disagree with cluster memberships"));
            }
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.normalizers.len()
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    pub fn gamma_value(&self) -> T {
        self.gamma.value().expect("kernel models carry a finite gamma")
    }

    /// Support indices of every cluster, in support order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        group(&self.membership, self.n_clusters()).expect("validated memberships")
    }

    /// Per-cluster offsets `b_k = −γ⁻¹ log Z_k⁻¹` of the distance pooling.
    pub fn biases(&self) -> Vec<T> {
        let g = self.gamma_value();
        self.normalizers.iter().map(|z| z.ln() / g).collect()
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(shape(format!(
                "point of dimension {} for model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Parzen-window inlierness `Z_k⁻¹ Σ_{j∈C_k} exp(−γ‖x − x_j‖²)`.
    pub fn inlierness(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let g = self.gamma_value();
        let mut sums = vec![T::zero(); self.n_clusters()];
        for (j, &k) in self.membership.iter().enumerate() {
            sums[k] = sums[k] + (-g * sq_dist(x, self.support.row(j))).exp();
        }
        Ok(sums.iter().zip(&self.normalizers).map(|(&s, &z)| s / z).collect())
    }

    /// Outlierness `o_k = min^γ_{j∈C_k} (‖x − x_j‖² + b_k)`, computed as a
    /// soft-min so it stays finite far from the support.
    pub fn outlierness(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let biases = self.biases();
        Ok(self
            .clusters()
            .iter()
            .zip(&biases)
            .map(|(members, &b)| {
                let d: Vec<T> = members
                    .iter()
                    .map(|&j| sq_dist(x, self.support.row(j)) + b)
                    .collect();
                soft_min_unchecked(&d, self.gamma)
            })
            .collect())
    }

    /// Outlierness through the inverse kernel, `−γ⁻¹ log 𝕚_k(x)`.
    pub fn outlierness_from_inlierness(&self, x: &[T]) -> Result<Vec<T>> {
        let g = self.gamma_value();
        Ok(self.inlierness(x)?.iter().map(|i| -i.ln() / g).collect())
    }

    /// Power assignment `𝕚_c^{β/γ} / Σ_k 𝕚_k^{β/γ}`.
    pub fn power_assignment(&self, x: &[T], beta: Stiffness<T>) -> Result<Vec<T>> {
        let inl = self.inlierness(x)?;
        let top = inl.iter().copied().fold(T::zero(), T::max);
        if top <= T::zero() {
            return Err(domain("inlierness underflows for every cluster"));
        }
        let w: Vec<T> = match beta {
            Stiffness::Infinite => inl.iter().map(|&i| if i == top { T::one() } else { T::zero() }).collect(),
            Stiffness::Finite(b) => {
                let r = b / self.gamma_value();
                inl.iter().map(|&i| (i / top).powf(r)).collect()
            }
        };
        let s: T = w.iter().copied().sum();
        Ok(w.into_iter().map(|v| v / s).collect())
    }
}

fn finite_gamma<T: Scalar>(gamma: Stiffness<T>) -> Result<T> {
    gamma.validate()?;
    gamma
        .value()
        .ok_or_else(|| domain("kernel bandwidth gamma must be finite"))
}

fn group(membership: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); k];
    for (j, &c) in membership.iter().enumerate() {
        if c >= k {
            return Err(domain(format!("membership {c} out of range for {k} clusters")));
        }
        groups[c].push(j);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(domain(format!("cluster {empty} has no members")));
    }
    Ok(groups)
}

/// Dense Gaussian kernel matrix `exp(−γ‖x_i − x_j‖²)`.
pub fn kernel_matrix<T: Scalar>(points: &Matrix<T>, gamma: T) -> Matrix<T> {
    let n = points.nrows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, T::one());
        for j in 0..i {
            let v = (-gamma * sq_dist(points.row(i), points.row(j))).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Leave-one-out affinity of every point to every cluster:
/// `α_k^{(−ℓ)} Σ_{j∈C_k∖{ℓ}} κ(x_ℓ, x_j)`, or `−∞` when `C_k∖{ℓ}` is empty.
pub fn leave_one_out_scores<T: Scalar>(kernel: &Matrix<T>, assignments: &[usize], k: usize) -> Vec<Vec<T>> {
    let n = assignments.len();
    let mut pair_sums = vec![T::zero(); k];
    let mut sizes = vec![0usize; k];
    for i in 0..n {
        sizes[assignments[i]] += 1;
        for j in 0..n {
            if assignments[i] == assignments[j] {
                pair_sums[assignments[i]] = pair_sums[assignments[i]] + kernel.get(i, j);
            }
        }
    }
    (0..n)
        .map(|l| {
            let mut s = vec![T::zero(); k];
            for j in 0..n {
                if j != l {
                    s[assignments[j]] = s[assignments[j]] + kernel.get(l, j);
                }
            }
            (0..k)
                .map(|c| {
                    let own = assignments[l] == c;
                    if own && sizes[c] == 1 {
                        return T::neg_infinity();
                    }
                    let q = if own {
                        pair_sums[c] - (s[c] + s[c]) - kernel.get(l, l)
                    } else {
                        pair_sums[c]
                    };
                    s[c] / q.sqrt()
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct KernelEmOptions<T> {
    pub gamma: Stiffness<T>,
    pub max_iter: usize,
    /// Cap on the number of points whose kernel matrix is materialized.
    pub max_points: usize,
}

impl<T: Scalar> KernelEmOptions<T> {
    pub fn new(gamma: Stiffness<T>, max_iter: usize) -> Self {
        Self {
            gamma,
            max_iter,
            max_points: DEFAULT_MAX_KERNEL_POINTS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KernelEmFit<T> {
    pub model: KernelModel<T>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Leave-one-out EM for kernel k-means.
///
/// Each sweep scores every point against the leave-one-out centroid of every
/// cluster and moves it to the best one; sweeps repeat until no assignment
/// changes or `max_iter` is reached. The final model uses full memberships.
pub fn train_kernel_em<T: Scalar>(
    data: &Dataset<T>,
    k: usize,
    init: &[usize],
    opts: &KernelEmOptions<T>,
) -> Result<KernelEmFit<T>> {
    let gamma = finite_gamma(opts.gamma)?;
    if init.len() != data.len() {
        return Err(shape(format!("{} initial assignments for {} points", init.len(), data.len())));
    }
    group(init, k)?;
    if data.len() > opts.max_points {
        return Err(Error::Resource(format!(
            "kernel matrix for {} points exceeds the cap of {}",
            data.len(),
            opts.max_points
        )));
    }
    let kernel = kernel_matrix(data.points(), gamma);
    let mut assignments = init.to_vec();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let scores = leave_one_out_scores(&kernel, &assignments, k);
        let mut next: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        repair_empty(&scores, &mut next, k);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    let model = KernelModel::new(data.points().clone(), assignments.clone(), k, opts.gamma)?;
    Ok(KernelEmFit {
        model,
        assignments,
        iterations,
        converged,
    })
}

/// Fills each empty cluster with the point whose best affinity is lowest.
fn repair_empty<T: Scalar>(scores: &[Vec<T>], assignments: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        let Some(empty) = sizes.iter().position(|&n| n == 0) else {
            return;
        };
        let worst = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .min_by(|&i, &j| {
                let si = scores[i][assignments[i]];
                let sj = scores[j][assignments[j]];
                si.partial_cmp(&sj).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
            });
        let Some(worst) = worst else { return };
        assignments[worst] = empty;
    }
}

/// Replaces every class by `per_class` k-means centroids ("support
/// vectors"), labeled by class. Classes with at most `per_class` points are
/// kept as they are.
pub fn reduce_support<T: Scalar>(data: &Dataset<T>, per_class: usize, seed: u64) -> Result<Dataset<T>> {
    if per_class == 0 {
        return Err(domain("per_class must be at least 1"));
    }
    let classes = data.class_indices()?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut labels = Vec::new();
    for (y, idx) in classes.iter().enumerate() {
        if idx.is_empty() {
            return Err(domain(format!("class {y} has no points")));
        }
        let sub: Vec<&[T]> = idx.iter().map(|&i| data.point(i)).collect();
        let centers: Vec<Vec<T>> = if idx.len() <= per_class {
            sub.iter().map(|r| r.to_vec()).collect()
        } else if per_class == 1 {
            let mut mean = vec![T::zero(); data.dim()];
            for r in &sub {
                for (m, &v) in mean.iter_mut().zip(r.iter()) {
                    *m = *m + v;
                }
            }
            let n = crate::scalar::count::<T>(sub.len());
            vec![mean.into_iter().map(|m| m / n).collect()]
        } else {
            let class_data = Dataset::from_rows(&sub, None)?;
            train_standard(&class_data, per_class, seed.wrapping_add(y as u64))?
                .model
                .centroids
                .to_rows()
        };
        for c in centers {
            rows.push(c);
            labels.push(y);
        }
    }
    Dataset::from_rows(&rows, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::make_blobs_at;
    use crate::pooling::soft_assignment;

    fn g(x: f64) -> Stiffness<f64> {
        Stiffness::new(x).unwrap()
    }

    fn small_model() -> KernelModel<f64> {
        let support = Matrix::from_rows(&[[0.0, 0.0], [0.5, 0.2], [3.0, 1.0], [2.5, 1.5], [2.8, 0.7]]).unwrap();
        KernelModel::new(support, vec![0, 0, 1, 1, 1], 2, g(0.8)).unwrap()
    }

    #[test]
    fn singleton_cluster_has_unit_normalizer() {
        let support = Matrix::from_rows(&[[1.0, 2.0], [5.0, 5.0]]).unwrap();
        let m = KernelModel::new(support, vec![0, 1], 2, g(0.3)).unwrap();
        assert_eq!(m.normalizers, vec![1.0, 1.0]);
        assert_eq!(m.biases(), vec![0.0, 0.0]);
        let i = m.inlierness(&[1.0, 2.0]).unwrap();
        assert_eq!(i[0], 1.0);
        // one member at distance d: o = d²
        let o = m.outlierness(&[1.0, 4.0]).unwrap();
        assert!((o[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn far_point_has_vanishing_inlierness() {
        let m = small_model();
        let i = m.inlierness(&[1e3, 1e3]).unwrap();
        assert!(i.iter().all(|&v| v == 0.0));
        assert!(m.outlierness(&[1e3, 1e3]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inlierness_matches_kernel_sum() {
        let m = small_model();
        let x = [1.0, 0.4];
        let i = m.inlierness(&x).unwrap();
        let z0 = (2.0 + 2.0 * (-0.8f64 * (0.25 + 0.04)).exp()).sqrt();
        let s0 = (-0.8f64 * (1.0 + 0.16)).exp() + (-0.8f64 * (0.25 + 0.04)).exp();
        assert!((i[0] - s0 / z0).abs() < 1e-14);
        assert!(i[0] <= 2.0 / z0);
    }

    #[test]
    fn unit_norm_centroids() {
        let m = small_model();
        let clusters = m.clusters();
        for (c, members) in clusters.iter().enumerate() {
            let mut q = 0.0;
            for &a in members {
                for &b in members {
                    q += (-0.8 * sq_dist(m.support.row(a), m.support.row(b))).exp();
                }
            }
            assert!((q / m.normalizers[c].powi(2) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn outlierness_routes_agree() {
        let m = small_model();
        for x in [[1.0, 0.4], [-2.0, 3.0], [2.7, 1.1]] {
            let a = m.outlierness(&x).unwrap();
            let b = m.outlierness_from_inlierness(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_members_shift_by_normalizer_ratio() {
        let m = small_model();
        let rows = m.support.to_rows();
        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let mut membership = m.membership.clone();
        membership.extend(m.membership.iter());
        let d = KernelModel::new(Matrix::from_rows(&doubled).unwrap(), membership, 2, g(0.8)).unwrap();
        let x = [1.2, 0.1];
        let o = m.outlierness(&x).unwrap();
        let od = d.outlierness(&x).unwrap();
        for k in 0..2 {
            // Σκ doubles; Z changes by the recomputed ratio
            let shift = -(2.0f64).ln() / 0.8 + (d.normalizers[k] / m.normalizers[k]).ln() / 0.8;
            assert!((od[k] - o[k] - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn power_assignment_examples() {
        let m = small_model();
        let x = [1.0, 0.5];
        let p = m.power_assignment(&x, g(0.8)).unwrap();
        let i = m.inlierness(&x).unwrap();
        let s: f64 = i.iter().sum();
        for k in 0..2 {
            assert!((p[k] - i[k] / s).abs() < 1e-14);
        }
        let q = soft_assignment(&m.outlierness(&x).unwrap(), g(2.5)).unwrap();
        let p = m.power_assignment(&x, g(2.5)).unwrap();
        for k in 0..2 {
            assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_inlierness_splits_evenly() {
        let support = Matrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        let m = KernelModel::new(support, vec![0, 1], 2, g(1.0)).unwrap();
        assert_eq!(m.power_assignment(&[0.0], g(3.0)).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_empty_cluster_and_infinite_gamma() {
        let support = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(KernelModel::new(support.clone(), vec![0, 0], 2, g(1.0)).is_err());
        assert!(KernelModel::new(support, vec![0, 1], 2, Stiffness::Infinite).is_err());
    }

    #[test]
    fn three_point_reassignment_by_hand() {
        // x0 = 0, x1 = 1, x2 = 3 with γ = 1; start with {x0}, {x1, x2}
        let d = Dataset::from_rows(&[[0.0], [1.0], [3.0]], None).unwrap();
        let kern = kernel_matrix(d.points(), 1.0);
        let scores = leave_one_out_scores(&kern, &[0, 1, 1], 2);
        let e1 = (-1.0f64).exp();
        let e4 = (-4.0f64).exp();
        let e9 = (-9.0f64).exp();
        // x0: own cluster is a singleton, the other cluster {x1, x2}
        assert_eq!(scores[0][0], f64::NEG_INFINITY);
        let z12 = (2.0 + 2.0 * e4).sqrt();
        assert!((scores[0][1] - (e1 + e9) / z12).abs() < 1e-15);
        // x1: cluster 0 = {x0}, own cluster without x1 = {x2}
        assert!((scores[1][0] - e1).abs() < 1e-15);
        assert!((scores[1][1] - e4).abs() < 1e-15);
        // x2: cluster 0 = {x0}, own cluster without x2 = {x1}
        assert!((scores[2][0] - e9).abs() < 1e-15);
        assert!((scores[2][1] - e4).abs() < 1e-15);

        let opts = KernelEmOptions::new(g(1.0), 1);
        let fit = train_kernel_em(&d, 2, &[0, 1, 1], &opts).unwrap();
        // x0 leaves its singleton, x1 moves towards x0
        assert_eq!(fit.assignments, vec![1, 0, 1]);
    }

    fn two_blobs(seed: u64) -> Dataset<f64> {
        make_blobs_at(&[vec![0.0, 0.0], vec![10.0, 0.0]], 30, 1.0, seed).unwrap()
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let d = two_blobs(3);
        let labels = d.labels().unwrap().to_vec();
        let fit = train_kernel_em(&d, 2, &labels, &KernelEmOptions::new(g(0.5), 10)).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.converged);
        assert_eq!(fit.assignments, labels);
        let kern = kernel_matrix(d.points(), 0.5);
        let scores = leave_one_out_scores(&kern, &labels, 2);
        assert!(scores.iter().zip(&labels).all(|(s, &y)| argmax(s) == y));
    }

    #[test]
    fn random_init_separates_blobs() {
        use rand::{Rng, SeedableRng};
        let d = two_blobs(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let init: Vec<usize> = (0..d.len()).map(|_| rng.random_range(0..2)).collect();
        let fit = train_kernel_em(&d, 2, &init, &KernelEmOptions::new(g(0.5), 20)).unwrap();
        assert!(fit.converged);
        let labels = d.labels().unwrap();
        let agree = fit.assignments.iter().zip(labels).filter(|(a, b)| a == b).count();
        assert!(agree == d.len() || agree == 0);
    }

    #[test]
    fn kernel_cap_enforced() {
        let d = two_blobs(1);
        let labels = d.labels().unwrap().to_vec();
        let mut opts = KernelEmOptions::new(g(0.5), 5);
        opts.max_points = 10;
        assert!(matches!(train_kernel_em(&d, 2, &labels, &opts), Err(Error::Resource(_))));
        let mut bad = labels.clone();
        bad.iter_mut().for_each(|a| *a = 0);
        assert!(train_kernel_em(&d, 2, &bad, &KernelEmOptions::new(g(0.5), 5)).is_err());
    }

    #[test]
    fn support_reduction() {
        let d: Dataset<f64> = make_blobs_at(&[vec![0.0, 0.0], vec![5.0, 5.0]], 8, 0.3, 2).unwrap();
        let one = reduce_support(&d, 1, 0).unwrap();
        let means = crate::models::centroids_from_labels(&d).unwrap();
        assert_eq!(one.labels().unwrap(), &[0, 1]);
        for k in 0..2 {
            for f in 0..2 {
                assert!((one.point(k)[f] - means.centroids.get(k, f)).abs() < 1e-12);
            }
        }
        let all = reduce_support(&d, 8, 0).unwrap();
        assert_eq!(all, d);

        // class made of two tight sub-blobs
        let d: Dataset<f64> = make_blobs_at(&[vec![0.0, 0.0], vec![0.0, 6.0]], 10, 0.1, 4).unwrap();
        let relabeled = Dataset::new(d.points().clone(), Some(vec![0; 20])).unwrap();
        let r = reduce_support(&relabeled, 2, 1).unwrap();
        let mut ys: Vec<f64> = (0..2).map(|i| r.point(i)[1]).collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lower: f64 = (0..10).map(|i| d.point(i)[1]).sum::<f64>() / 10.0;
        let upper: f64 = (10..20).map(|i| d.point(i)[1]).sum::<f64>() / 10.0;
        assert!((ys[0] - lower).abs() < 1e-12 && (ys[1] - upper).abs() < 1e-12);
    }
}
