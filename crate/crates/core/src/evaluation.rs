//! Pixel-flipping curves, cluster purity and the β / γ calibration
//! heuristics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, shape, Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::models::{ClusterModel, Dataset};
use crate::neuralize::LayeredNetwork;
use crate::pooling::{soft_assignment, Stiffness};
use crate::scalar::{count, lit, Scalar};

/// Mean logit as a function of the fraction of flipped (point, feature)
/// pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FlipCurve<T> {
    pub fractions: Vec<T>,
    pub mean_logit: Vec<T>,
    pub method: String,
}

impl<T: Scalar> FlipCurve<T> {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> T {
        self.fractions
            .windows(2)
            .zip(self.mean_logit.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / lit(2.0))
            .sum()
    }
}

/// Inputs shared by every flipping run: one network and one root per point.
pub struct FlipSetup<'a, T> {
    pub nets: &'a [&'a LayeredNetwork<T>],
    pub points: &'a Matrix<T>,
    pub roots: &'a Matrix<T>,
    /// Pairs flipped between two recorded curve points.
    pub batch: usize,
}

impl<T: Scalar> FlipSetup<'_, T> {
    fn check(&self) -> Result<()> {
        let n = self.points.nrows();
        if self.nets.len() != n || self.roots.nrows() != n || self.roots.ncols() != self.points.ncols() {
            return Err(shape(format!(
                "{} points, {} networks and {}x{} roots",
                n,
                self.nets.len(),
                self.roots.nrows(),
                self.roots.ncols()
            )));
        }
        if n == 0 || self.points.ncols() == 0 {
            return Err(domain("nothing to flip"));
        }
        if self.batch == 0 {
            return Err(domain("flip batch must be positive"));
        }
        Ok(())
    }

    /// Default batch: 1% of all pairs, at least one.
    pub fn default_batch(points: &Matrix<T>) -> usize {
        (points.nrows() * points.ncols()).div_ceil(100).max(1)
    }

    /// Flips pairs `(point, feature)` in the given order.
    pub fn run(&self, order: &[(usize, usize)], method: &str) -> Result<FlipCurve<T>> {
        self.check()?;
        let (n, d) = (self.points.nrows(), self.points.ncols());
        let total = n * d;
        if order.len() != total {
            return Err(shape("flip order must list every (point, feature) pair once"));
        }
        let mut x = self.points.clone();
        let mut f: Vec<T> = (0..n)
            .map(|i| self.nets[i].evaluate(x.row(i)))
            .collect::<Result<_>>()?;
        let nn = count::<T>(n);
        let mean = |f: &[T]| f.iter().copied().sum::<T>() / nn;
        let mut fractions = vec![T::zero()];
        let mut mean_logit = vec![mean(&f)];
        let mut touched = vec![false; n];
        for (b, chunk) in order.chunks(self.batch).enumerate() {
            for &(i, j) in chunk {
                x.set(i, j, self.roots.get(i, j));
                touched[i] = true;
            }
            for i in 0..n {
                if std::mem::take(&mut touched[i]) {
                    f[i] = self.nets[i].evaluate(x.row(i))?;
                }
            }
            let done = (b * self.batch + chunk.len()).min(total);
            fractions.push(count::<T>(done) / count::<T>(total));
            mean_logit.push(mean(&f));
        }
        Ok(FlipCurve {
            fractions,
            mean_logit,
            method: method.to_string(),
        })
    }
}

/// Global ordering over all points: descending relevance, ties by
/// (point, feature).
pub fn global_order<T: Scalar>(explanations: &Matrix<T>) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..explanations.nrows())
        .flat_map(|i| (0..explanations.ncols()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(i1, j1), &(i2, j2)| {
        explanations
            .get(i2, j2)
            .partial_cmp(&explanations.get(i1, j1))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((i1, j1).cmp(&(i2, j2)))
    });
    order
}

/// Flips features in the order given by `explanations` (one row per point).
pub fn pixel_flip<T: Scalar>(setup: &FlipSetup<'_, T>, explanations: &Matrix<T>, method: &str) -> Result<FlipCurve<T>> {
    if explanations.nrows() != setup.points.nrows() || explanations.ncols() != setup.points.ncols() {
        return Err(shape("one explanation per point, one score per feature"));
    }
    if !explanations.is_finite() {
        return Err(domain("explanations must be finite"));
    }
    setup.run(&global_order(explanations), method)
}

/// Average curve over `orders` uniformly random orderings.
pub fn random_flip_curve<T: Scalar>(setup: &FlipSetup<'_, T>, orders: usize, seed: u64) -> Result<FlipCurve<T>> {
    if orders == 0 {
        return Err(domain("need at least one random order"));
    }
    let (n, d) = (setup.points.nrows(), setup.points.ncols());
    let mut order: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Option<FlipCurve<T>> = None;
    for _ in 0..orders {
        order.shuffle(&mut rng);
        let c = setup.run(&order, "random")?;
        acc = Some(match acc {
            None => c,
            Some(mut a) => {
                a.mean_logit.iter_mut().zip(&c.mean_logit).for_each(|(s, &v)| *s = *s + v);
                a
            }
        });
    }
    let mut curve = acc.unwrap();
    let k = count::<T>(orders);
    curve.mean_logit.iter_mut().for_each(|v| *v = *v / k);
    Ok(curve)
}

/// `Σ_k max_y |C_k ∩ Y_y| / N`.
pub fn purity<T: Scalar>(predicted: &[usize], labels: &[usize]) -> Result<T> {
    if predicted.len() != labels.len() {
        return Err(shape("predicted and true labels differ in length"));
    }
    if predicted.is_empty() {
        return Err(domain("purity of an empty set"));
    }
    let k = predicted.iter().max().unwrap() + 1;
    let y = labels.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; y]; k];
    for (&p, &l) in predicted.iter().zip(labels) {
        table[p][l] += 1;
    }
    let hits: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(count::<T>(hits) / count::<T>(predicted.len()))
}

const BRACKET_LOW: f64 = 1e-6;
const BRACKET_HIGH: f64 = 1e6;

/// Finds `s` with `|stat(s) − target| ≤ tol` for a statistic non-decreasing
/// in `s`; brackets by doubling/halving from 1, then bisects on `log s`.
fn calibrate_monotone<T: Scalar>(stat: impl Fn(T) -> T, target: T, tol: T) -> Result<T> {
    let (low, high) = (lit::<T>(BRACKET_LOW), lit::<T>(BRACKET_HIGH));
    let unreachable = |lo: T, hi: T| Error::Unreachable {
        target: target.to_f64().unwrap_or(f64::NAN),
        low: lo.to_f64().unwrap_or(f64::NAN),
        high: hi.to_f64().unwrap_or(f64::NAN),
    };
    let mut s = T::one();
    let v = stat(s);
    if (v - target).abs() <= tol {
        return Ok(s);
    }
    let two = lit::<T>(2.0);
    let (mut lo, mut hi);
    if v < target {
        lo = s;
        loop {
            s = s * two;
            if s > high {
                return Err(unreachable(stat(low), stat(high)));
            }
            let v = stat(s);
            if (v - target).abs() <= tol {
                return Ok(s);
            }
            if v > target {
                hi = s;
                break;
            }
            lo = s;
        }
    } else {
        hi = s;
        loop {
            s = s / two;
            if s < low {
                return Err(unreachable(stat(low), stat(high)));
            }
            let v = stat(s);
            if (v - target).abs() <= tol {
                return Ok(s);
            }
            if v < target {
                lo = s;
                break;
            }
            hi = s;
        }
    }
    for _ in 0..200 {
        let mid = ((lo.ln() + hi.ln()) / two).exp();
        let v = stat(mid);
        if (v - target).abs() <= tol {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(unreachable(stat(lo), stat(hi)))
}

/// Mean over points of the largest soft-assignment probability.
pub fn mean_top_probability<T: Scalar>(scores: &[Vec<T>], beta: Stiffness<T>) -> Result<T> {
    let mut s = T::zero();
    for o in scores {
        let p = soft_assignment(o, beta)?;
        s = s + p.into_iter().fold(T::zero(), T::max);
    }
    Ok(s / count::<T>(scores.len()))
}

/// β such that the mean top assignment probability over `data` is
/// `target ± tol`.
pub fn calibrate_beta<T: Scalar>(model: &ClusterModel<T>, data: &Dataset<T>, target: T, tol: T) -> Result<Stiffness<T>> {
    if !(target > T::zero() && target < T::one()) {
        return Err(domain("target probability must lie in (0, 1)"));
    }
    let scores: Vec<Vec<T>> = (0..data.len())
        .map(|i| model.outlierness(data.point(i)))
        .collect::<Result<_>>()?;
    let beta = calibrate_monotone(
        |b| mean_top_probability(&scores, Stiffness::Finite(b)).unwrap_or(T::nan()),
        target,
        tol,
    )?;
    Stiffness::new(beta)
}

/// `Σ_i κ(x_i, x_i) / Σ_ij κ(x_i, x_j)` for the Gaussian kernel.
pub fn self_similarity_ratio<T: Scalar>(support: &Matrix<T>, gamma: T) -> T {
    let m = support.nrows();
    let mut total = T::zero();
    for i in 0..m {
        for j in 0..m {
            total = total + (-gamma * sq_dist(support.row(i), support.row(j))).exp();
        }
    }
    count::<T>(m) / total
}

/// γ such that self-similarities make up `target` of all pairwise
/// similarities among the support points, within 1e−4.
pub fn calibrate_gamma_self_similarity<T: Scalar>(support: &Matrix<T>, target: T) -> Result<Stiffness<T>> {
    let m = support.nrows();
    if m < 2 {
        return Err(domain("need at least two support points"));
    }
    if !(target > T::one() / count::<T>(m) && target < T::one()) {
        return Err(domain(format!("target must lie in (1/{m}, 1)")));
    }
    let g = calibrate_monotone(|g| self_similarity_ratio(support, g), target, lit(1e-4))?;
    Stiffness::new(g)
}

/// Squared distances from each point to all others, ascending.
fn sorted_neighbor_distances<T: Scalar>(points: &Matrix<T>) -> Vec<Vec<T>> {
    let n = points.nrows();
    (0..n)
        .map(|i| {
            let mut d: Vec<T> = (0..n).filter(|&j| j != i).map(|j| sq_dist(points.row(i), points.row(j))).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            d
        })
        .collect()
}

fn knn_mass<T: Scalar>(sorted: &[Vec<T>], k: usize, gamma: T) -> T {
    let mut acc = T::zero();
    for d in sorted {
        // shifted by the nearest distance so large γ does not underflow
        let w: Vec<T> = d.iter().map(|&v| (-gamma * (v - d[0])).exp()).collect();
        let near: T = w[..k].iter().copied().sum();
        let all: T = w.iter().copied().sum();
        acc = acc + near / all;
    }
    acc / count::<T>(sorted.len())
}

/// Mean share of each point's off-diagonal similarity mass that falls on
/// its `k` nearest neighbours.
pub fn knn_mass_ratio<T: Scalar>(data: &Dataset<T>, k: usize, gamma: T) -> Result<T> {
    check_knn(data, k)?;
    Ok(knn_mass(&sorted_neighbor_distances(data.points()), k, gamma))
}

fn check_knn<T: Scalar>(data: &Dataset<T>, k: usize) -> Result<()> {
    if data.len() < 2 {
        return Err(domain("need at least two points"));
    }
    if k == 0 || k > data.len() - 1 {
        return Err(domain(format!("k must lie in [1, {}]", data.len() - 1)));
    }
    Ok(())
}

/// γ such that `k` nearest neighbours carry `target` of the similarity
/// mass on average, within 1e−3.
pub fn calibrate_gamma_knn_mass<T: Scalar>(data: &Dataset<T>, k: usize, target: T) -> Result<Stiffness<T>> {
    check_knn(data, k)?;
    if !(target > T::zero() && target <= T::one()) {
        return Err(domain("target must lie in (0, 1]"));
    }
    let sorted = sorted_neighbor_distances(data.points());
    let g = calibrate_monotone(|g| knn_mass(&sorted, k, g), target, lit(1e-3))?;
    Stiffness::new(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{find_root, RootOptions};
    use crate::models::{centroids_from_labels, make_blobs, StandardModel};
    use crate::neuralize::build_standard;
    use rand::Rng;

    fn b(x: f64) -> Stiffness<f64> {
        Stiffness::new(x).unwrap()
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity::<f64>(&[0, 1, 1, 2], &[2, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(purity::<f64>(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let l: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
        let mut hits = 0;
        for k in 0..3 {
            hits += (0..4)
                .map(|y| (0..50).filter(|&i| p[i] == k && l[i] == y).count())
                .max()
                .unwrap();
        }
        assert_eq!(purity::<f64>(&p, &l).unwrap(), hits as f64 / 50.0);
        assert!(purity::<f64>(&[0], &[0, 1]).is_err());
    }

    fn two_cluster_setup() -> (StandardModel<f64>, Matrix<f64>) {
        let m = StandardModel::new(Matrix::from_rows(&[[0.0, 0.0, 0.0], [3.0, 2.0, 1.0]]).unwrap()).unwrap();
        let pts = Matrix::from_rows(&vec![[0.4, -0.3, 0.2]; 6]).unwrap();
        (m, pts)
    }

    #[test]
    fn flip_endpoints() {
        let (m, pts) = two_cluster_setup();
        let net = build_standard(&m, 0, b(1.0)).unwrap();
        let root = find_root(&net, pts.row(0), &RootOptions::default()).unwrap();
        let roots = Matrix::from_rows(&vec![root.point.clone(); 6]).unwrap();
        let nets = vec![&net; 6];
        let setup = FlipSetup { nets: &nets, points: &pts, roots: &roots, batch: 4 };
        let expl = Matrix::from_rows(&vec![[0.1, 0.3, 0.2]; 6]).unwrap();
        let c = pixel_flip(&setup, &expl, "x").unwrap();
        assert_eq!(c.fractions[0], 0.0);
        assert_eq!(*c.fractions.last().unwrap(), 1.0);
        assert_eq!(c.mean_logit[0], net.evaluate(pts.row(0)).unwrap());
        assert!((c.mean_logit.last().unwrap() - root.achieved_f).abs() < 1e-12);
        assert_eq!(c.fractions.len(), 1 + 18usize.div_ceil(4));
    }

    #[test]
    fn flat_explanation_matches_random_expectation() {
        // identical points and a linear logit: with batches of whole points
        // the deterministic curve is the expected random curve
        let (m, pts) = two_cluster_setup();
        let net = build_standard(&m, 0, b(1.0)).unwrap();
        let root = find_root(&net, pts.row(0), &RootOptions::default()).unwrap();
        let roots = Matrix::from_rows(&vec![root.point.clone(); 6]).unwrap();
        let nets = vec![&net; 6];
        let setup = FlipSetup { nets: &nets, points: &pts, roots: &roots, batch: 3 };
        let flat = pixel_flip(&setup, &Matrix::from_rows(&vec![[1.0; 3]; 6]).unwrap(), "flat").unwrap();
        let random = random_flip_curve(&setup, 100, 9).unwrap();
        let scale = flat.mean_logit[0] - flat.mean_logit.last().unwrap();
        for (a, r) in flat.mean_logit.iter().zip(&random.mean_logit) {
            assert!((a - r).abs() < 0.05 * scale);
        }
    }

    #[test]
    fn oracle_order_beats_random() {
        let d: Dataset<f64> = make_blobs(20, 3, 2, 0.8, 4).unwrap();
        let m = centroids_from_labels(&d).unwrap();
        let labels = d.labels().unwrap();
        let nets: Vec<_> = (0..3).map(|c| build_standard(&m, c, b(1.0)).unwrap()).collect();
        let per_point: Vec<&LayeredNetwork<f64>> = labels.iter().map(|&l| &nets[l]).collect();
        let mut roots = Vec::new();
        let mut expl = Vec::new();
        for i in 0..d.len() {
            let net = per_point[i];
            let x = d.point(i);
            let r = find_root(net, x, &RootOptions::default()).unwrap().point;
            let f = net.evaluate(x).unwrap();
            expl.push(
                (0..2)
                    .map(|j| {
                        let mut y = x.to_vec();
                        y[j] = r[j];
                        f - net.evaluate(&y).unwrap()
                    })
                    .collect::<Vec<_>>(),
            );
            roots.push(r);
        }
        let roots = Matrix::from_rows(&roots).unwrap();
        let setup = FlipSetup {
            nets: &per_point,
            points: d.points(),
            roots: &roots,
            batch: 2,
        };
        let oracle = pixel_flip(&setup, &Matrix::from_rows(&expl).unwrap(), "oracle").unwrap();
        let random = random_flip_curve(&setup, 100, 1).unwrap();
        for (o, r) in oracle.mean_logit.iter().zip(&random.mean_logit) {
            assert!(*o <= r + 1e-9);
        }
        assert!(oracle.area() < random.area());
    }

    #[test]
    fn ordering_ties_break_by_index() {
        let e = Matrix::from_rows(&[[1.0, 2.0], [2.0, 0.0]]).unwrap();
        assert_eq!(global_order(&e), vec![(0, 1), (1, 0), (0, 0), (1, 1)]);
    }

    #[test]
    fn area_of_a_line() {
        let c = FlipCurve { fractions: vec![0.0, 0.5, 1.0], mean_logit: vec![2.0, 1.0, 0.0], method: "m".into() };
        assert_eq!(c.area(), 1.0);
    }

    #[test]
    fn beta_calibration_reproduces_target() {
        let d: Dataset<f64> = make_blobs(30, 3, 2, 1.0, 2).unwrap();
        let m = ClusterModel::Standard(centroids_from_labels(&d).unwrap());
        let beta = calibrate_beta(&m, &d, 0.9, 1e-3).unwrap();
        let scores: Vec<Vec<f64>> = (0..d.len()).map(|i| m.outlierness(d.point(i)).unwrap()).collect();
        assert!((mean_top_probability(&scores, beta).unwrap() - 0.9).abs() <= 1e-3);
    }

    #[test]
    fn beta_closed_form_two_points() {
        let m = StandardModel::new(Matrix::from_rows(&[[0.0], [3.0]]).unwrap()).unwrap();
        let d = Dataset::from_rows(&[[1.0], [2.0]], None).unwrap();
        // both points: o_other − o_own = 4 − 1 = 3
        let want = (0.9f64 / 0.1).ln() / 3.0;
        let got = calibrate_beta(&ClusterModel::Standard(m), &d, 0.9, 1e-10).unwrap();
        assert!((got.value().unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn unreachable_beta_target() {
        let m = ClusterModel::Standard(StandardModel::new(Matrix::from_rows(&[[0.0], [3.0]]).unwrap()).unwrap());
        let d = Dataset::from_rows(&[[1.5]], None).unwrap();
        assert!(matches!(calibrate_beta(&m, &d, 0.9, 1e-3), Err(Error::Unreachable { .. })));
    }

    #[test]
    fn self_similarity_calibration() {
        let s = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let t = 0.9f64;
        let want = -(1.0 / t - 1.0).ln();
        let g = calibrate_gamma_self_similarity(&s, t).unwrap().value().unwrap();
        assert!((self_similarity_ratio(&s, g) - t).abs() <= 1e-4);
        assert!((g - want).abs() < 1e-3);
        assert!((self_similarity_ratio(&s, 1e6) - 1.0).abs() < 1e-12);
        assert!((self_similarity_ratio(&s, 1e-12) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn knn_mass_calibration() {
        let d: Dataset<f64> = make_blobs(10, 3, 2, 1.0, 3).unwrap();
        assert!((knn_mass_ratio(&d, d.len() - 1, 0.7).unwrap() - 1.0).abs() < 1e-12);
        let lo = knn_mass_ratio(&d, 5, 0.1).unwrap();
        let hi = knn_mass_ratio(&d, 5, 1.0).unwrap();
        assert!(hi > lo);
        let g = calibrate_gamma_knn_mass(&d, 5, 0.5).unwrap().value().unwrap();
        assert!((knn_mass_ratio(&d, 5, g).unwrap() - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn knn_mass_small_exhaustive() {
        let d = Dataset::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]], None).unwrap();
        let g = 0.4f64;
        let mut want = 0.0;
        for i in 0..4 {
            let mut w: Vec<f64> = (0..4).filter(|&j| j != i).map(|j| (-g * sq_dist(d.point(i), d.point(j))).exp()).collect();
            w.sort_by(|a, b| b.partial_cmp(a).unwrap());
            want += w[0] / w.iter().sum::<f64>();
        }
        assert!((knn_mass_ratio(&d, 1, g).unwrap() - want / 4.0).abs() < 1e-12);
    }
}
