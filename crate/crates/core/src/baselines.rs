//! Structure-agnostic explanations of `f_c`: sensitivity (SA),
//! gradient × input (GI), simple root-based Taylor (SR) and integrated
//! gradients (IG), plus the root point search shared by SR, IG and pixel
//! flipping.

use crate::error::{domain, shape, Error, Result};
use crate::linalg::{dot, sq_dist, sq_norm};
use crate::neuralize::{ForwardTrace, Layer, LayeredNetwork};
use crate::pooling::{softmax_weights, softmin_weights};
use crate::propagate::conserve;
use crate::scalar::{count, lit, Scalar};

/// `∇f_c(x)` by reverse accumulation over a trace.
pub fn gradient_from_trace<T: Scalar>(net: &LayeredNetwork<T>, trace: &ForwardTrace<T>) -> Vec<T> {
    let mut g = vec![T::one()];
    for (layer, a) in net.layers.iter().zip(&trace.activations).rev() {
        g = match layer {
            Layer::Linear { weights, .. } => weights.matvec_t(&g),
            Layer::SquaredDistance { centers, .. } => {
                let two = lit::<T>(2.0);
                let mut out = vec![T::zero(); a.len()];
                for (c, &gj) in centers.rows_iter().zip(&g) {
                    for ((o, &ai), &ci) in out.iter_mut().zip(a).zip(c) {
                        *o = *o + two * gj * (ai - ci);
                    }
                }
                out
            }
            Layer::SoftMinPool { beta, groups, scale, .. } => {
                let mut out = vec![T::zero(); a.len()];
                for (grp, &gk) in groups.iter().zip(&g) {
                    let v: Vec<T> = grp.iter().map(|&j| a[j]).collect();
                    for (&j, w) in grp.iter().zip(softmin_weights(&v, *beta)) {
                        out[j] = *scale * w * gk;
                    }
                }
                out
            }
            Layer::SoftMaxPool { beta, groups, .. } => {
                let mut out = vec![T::zero(); a.len()];
                for (grp, &gk) in groups.iter().zip(&g) {
                    let v: Vec<T> = grp.iter().map(|&j| a[j]).collect();
                    for (&j, w) in grp.iter().zip(softmax_weights(&v, *beta)) {
                        out[j] = w * gk;
                    }
                }
                out
            }
            Layer::Elementwise { activation, .. } => {
                a.iter().zip(&g).map(|(&ai, &gi)| activation.derivative(ai) * gi).collect()
            }
        };
    }
    g
}

pub fn value_and_gradient<T: Scalar>(net: &LayeredNetwork<T>, x: &[T]) -> Result<(T, Vec<T>)> {
    let trace = net.forward(x)?;
    Ok((trace.output(), gradient_from_trace(net, &trace)))
}

pub fn gradient<T: Scalar>(net: &LayeredNetwork<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(value_and_gradient(net, x)?.1)
}

/// Sensitivity analysis: `(∂f/∂x_i)²`.
pub fn explain_sa<T: Scalar>(net: &LayeredNetwork<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(gradient(net, x)?.into_iter().map(|g| g * g).collect())
}

/// Gradient × input.
pub fn explain_gi<T: Scalar>(net: &LayeredNetwork<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(gradient(net, x)?.into_iter().zip(x).map(|(g, &xi)| g * xi).collect())
}

/// Nearest point found with `f_c ≤ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RootPoint<T> {
    pub point: Vec<T>,
    pub achieved_f: T,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootOptions {
    pub max_iter: usize,
    /// Starting penalty weight, relative to `1/‖∇f(x)‖²`.
    pub initial_penalty: f64,
    /// Factor applied to the penalty when progress stalls.
    pub penalty_growth: f64,
    /// Largest accepted `f` at the returned point.
    pub feasibility: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            initial_penalty: 1.0,
            penalty_growth: 2.0,
            feasibility: 1e-6,
        }
    }
}

/// Newton steps along the gradient until `f ≤ 0`.
fn restore<T: Scalar>(net: &LayeredNetwork<T>, start: &[T]) -> Result<(Vec<T>, T)> {
    let mut y = start.to_vec();
    let (mut f, mut g) = value_and_gradient(net, &y)?;
    for _ in 0..50 {
        if f <= T::zero() {
            break;
        }
        let gg = sq_norm(&g);
        if gg <= T::zero() {
            break;
        }
        let step = (f + f.abs() * lit(1e-9) + lit(1e-14)) / gg;
        y.iter_mut().zip(&g).for_each(|(y, &gi)| *y = *y - step * gi);
        (f, g) = value_and_gradient(net, &y)?;
    }
    Ok((y, f))
}

/// `argmin ‖x − ξ‖²` subject to `f_c(ξ) ≤ 0`, by minimizing the penalty
/// `‖x − ξ‖² + λ·max(0, f(ξ))²` with Gauss-Newton steps and doubling `λ`
/// whenever progress stalls. Once `f` is nearly zero the iterate is pushed
/// onto `f ≤ 0` with Newton steps along the gradient.
pub fn find_root<T: Scalar>(net: &LayeredNetwork<T>, x: &[T], opts: &RootOptions) -> Result<RootPoint<T>> {
    let (f0, g0) = value_and_gradient(net, x)?;
    if f0 <= T::zero() {
        return Ok(RootPoint {
            point: x.to_vec(),
            achieved_f: f0,
            iterations: 0,
        });
    }
    let feasible = lit::<T>(opts.feasibility);
    let restore_below = lit::<T>(1e-7) * f0.max(T::one());
    let growth = lit::<T>(opts.penalty_growth);
    let mut lambda = lit::<T>(opts.initial_penalty) / sq_norm(&g0).max(lit(1e-12));
    let penalty = |xi: &[T], f: T, lambda: T| sq_dist(xi, x) + lambda * f.max(T::zero()).powi(2);

    let mut xi = x.to_vec();
    let (mut f, mut g) = (f0, g0);
    let mut best = (xi.clone(), f);
    for it in 1..=opts.max_iter {
        if f <= restore_below {
            let (y, fy) = restore(net, &xi)?;
            if fy <= feasible {
                return Ok(RootPoint {
                    point: y,
                    achieved_f: fy,
                    iterations: it,
                });
            }
        }
        // (I + λ g gᵀ) δ = −v, solved with Sherman–Morrison
        let fp = f.max(T::zero());
        let v: Vec<T> = xi.iter().zip(x).zip(&g).map(|((&a, &b), &gi)| a - b + lambda * fp * gi).collect();
        let k = lambda * dot(&g, &v) / (T::one() + lambda * sq_norm(&g));
        let delta: Vec<T> = v.iter().zip(&g).map(|(&vi, &gi)| -(vi - k * gi)).collect();

        let phi = penalty(&xi, f, lambda);
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<T> = xi.iter().zip(&delta).map(|(&a, &d)| a + t * d).collect();
            let (fc, gc) = value_and_gradient(net, &cand)?;
            if penalty(&cand, fc, lambda) < phi {
                accepted = Some((cand, fc, gc));
                break;
            }
            t = t / lit(2.0);
        }
        let stalled = match accepted {
            Some((cand, fc, gc)) => {
                let moved = sq_dist(&cand, &xi).sqrt();
                let scale = T::one() + sq_norm(&xi).sqrt();
                xi = cand;
                f = fc;
                g = gc;
                moved <= lit::<T>(1e-10) * scale
            }
            None => true,
        };
        if f < best.1 {
            best = (xi.clone(), f);
        }
        if stalled {
            lambda = lambda * growth;
        }
    }
    let (y, fy) = restore(net, &best.0)?;
    if fy <= feasible {
        return Ok(RootPoint {
            point: y,
            achieved_f: fy,
            iterations: opts.max_iter,
        });
    }
    Err(Error::Infeasible {
        best_point: best.0.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        best_f: best.1.to_f64().unwrap_or(f64::NAN),
        iterations: opts.max_iter,
    })
}

/// Simple Taylor with the root as reference:
/// `R_i = (x_i − x̃_i)² / ‖x − x̃‖² · f_c(x)`, summing exactly to `f_c(x)`.
pub fn explain_sr<T: Scalar>(net: &LayeredNetwork<T>, x: &[T], root: &RootPoint<T>) -> Result<Vec<T>> {
    if root.point.len() != x.len() {
        return Err(shape("root point and input differ in dimension"));
    }
    let n = sq_dist(x, &root.point);
    if n <= T::zero() {
        return Err(domain("input coincides with its root point"));
    }
    let f = net.evaluate(x)?;
    let mut r: Vec<T> = x
        .iter()
        .zip(&root.point)
        .map(|(&a, &b)| (a - b) * (a - b) / n * f)
        .collect();
    conserve(&mut r, f);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult<T> {
    pub heatmap: Vec<T>,
    /// `|Σ R − (f(x) − f(x̃))|`.
    pub completeness_gap: T,
}

/// Integrated gradients along the segment from the root to `x`, midpoint
/// rule with `steps` gradient evaluations.
pub fn explain_ig<T: Scalar>(net: &LayeredNetwork<T>, x: &[T], root: &RootPoint<T>, steps: usize) -> Result<IgResult<T>> {
    if steps == 0 {
        return Err(domain("integrated gradients needs at least one step"));
    }
    if root.point.len() != x.len() {
        return Err(shape("root point and input differ in dimension"));
    }
    let d: Vec<T> = x.iter().zip(&root.point).map(|(&a, &b)| a - b).collect();
    let n = count::<T>(steps);
    let mut acc = vec![T::zero(); x.len()];
    let mut xi = vec![T::zero(); x.len()];
    for s in 0..steps {
        let t = (count::<T>(s) + lit(0.5)) / n;
        for ((p, &r), &di) in xi.iter_mut().zip(&root.point).zip(&d) {
            *p = r + t * di;
        }
        for (a, gi) in acc.iter_mut().zip(gradient(net, &xi)?) {
            *a = *a + gi;
        }
    }
    let heatmap: Vec<T> = acc.iter().zip(&d).map(|(&a, &di)| a * di / n).collect();
    let total: T = heatmap.iter().copied().sum();
    let gap = (total - (net.evaluate(x)? - net.evaluate(&root.point)?)).abs();
    Ok(IgResult {
        heatmap,
        completeness_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::models::{init_deep, one_hot_centroids, Activation, KernelModel, StandardModel};
    use crate::neuralize::{build_deep, build_kernel_improved, build_kernel_naive, build_standard};
    use crate::pooling::Stiffness;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64) -> Stiffness<f64> {
        Stiffness::new(x).unwrap()
    }

    fn std_net(rows: &[[f64; 2]], c: usize, beta: f64) -> LayeredNetwork<f64> {
        build_standard(&StandardModel::new(Matrix::from_rows(rows).unwrap()).unwrap(), c, b(beta)).unwrap()
    }

    fn fd_gradient(net: &LayeredNetwork<f64>, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (net.evaluate(&p).unwrap() - net.evaluate(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        num / den.max(1e-12)
    }

    #[test]
    fn two_cluster_gradient_is_the_weight_row() {
        let net = std_net(&[[0.0, 0.0], [4.0, 0.0]], 0, 1.5);
        // one competitor: f = β(w·x + b)
        assert_eq!(gradient(&net, &[1.0, 2.0]).unwrap(), vec![-12.0, 0.0]);
        let g = gradient(&net, &[2.0, 7.0]).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let km = KernelModel::new(Matrix::from_rows(&rows).unwrap(), (0..7).map(|j| j % 3).collect(), 3, b(0.6)).unwrap();
        let mut deep = init_deep(2, one_hot_centroids(3, 3, 1.0).unwrap(), &[5, 3], Activation::ModifiedRelu, 4).unwrap();
        let mut p = deep.parameters();
        p.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0);
        deep.set_parameters(&p);
        let nets = [
            std_net(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 2.0]], 1, 0.9),
            build_kernel_naive(&km, 0, b(1.2)).unwrap(),
            build_kernel_improved(&km, 1, b(1.2)).unwrap(),
            build_deep(&deep, 2, b(1.0)).unwrap(),
        ];
        for net in &nets {
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                assert!(rel_err(&gradient(net, &x).unwrap(), &fd_gradient(net, &x)) < 1e-4);
            }
        }
    }

    #[test]
    fn sa_and_gi() {
        let net = std_net(&[[0.0, 0.0], [4.0, 0.0]], 0, 1.0);
        let sa = explain_sa(&net, &[1.0, 1.0]).unwrap();
        assert_eq!(sa, vec![64.0, 0.0]);
        assert_eq!(explain_gi(&net, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        // linear f: GI sums to f − bias term
        let x = [1.3, -0.2];
        let gi: f64 = explain_gi(&net, &x).unwrap().iter().sum();
        assert!((gi - (net.evaluate(&x).unwrap() - 16.0)).abs() < 1e-12);
        let one_d = build_standard(&StandardModel::new(Matrix::from_rows(&[[0.0], [2.0]]).unwrap()).unwrap(), 0, b(1.0)).unwrap();
        assert_eq!(explain_sa(&one_d, &[0.5]).unwrap(), vec![16.0]);
    }

    #[test]
    fn root_of_feasible_point_is_itself() {
        let net = std_net(&[[0.0, 0.0], [4.0, 0.0]], 0, 1.0);
        let r = find_root(&net, &[3.0, 1.0], &RootOptions::default()).unwrap();
        assert_eq!(r.point, vec![3.0, 1.0]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn root_is_the_halfspace_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m: Vec<[f64; 2]> = (0..2).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let net = std_net(&m, 0, rng.random_range(0.5..3.0));
            let x = [m[0][0] + rng.random_range(-0.5..0.5), m[0][1] + rng.random_range(-0.5..0.5)];
            let f = net.evaluate(&x).unwrap();
            if f <= 0.0 {
                continue;
            }
            let g = gradient(&net, &x).unwrap();
            let gg = g[0] * g[0] + g[1] * g[1];
            let want = [x[0] - f / gg * g[0], x[1] - f / gg * g[1]];
            let r = find_root(&net, &x, &RootOptions::default()).unwrap();
            assert!(r.achieved_f <= 1e-6);
            assert!(sq_dist(&r.point, &want).sqrt() < 1e-4);
        }
    }

    #[test]
    fn kernel_root_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let km = KernelModel::new(Matrix::from_rows(&rows).unwrap(), vec![0, 0, 0, 1, 1, 1], 2, b(0.8)).unwrap();
            let net = build_kernel_improved(&km, 0, b(1.0)).unwrap();
            let x = rows[0].clone();
            if net.evaluate(&x).unwrap() <= 0.0 {
                continue;
            }
            let r = find_root(&net, &x, &RootOptions::default()).unwrap();
            assert!(r.achieved_f <= 1e-6);
            let mut grid_best = f64::INFINITY;
            for i in 0..=300 {
                for j in 0..=300 {
                    let p = [-6.0 + 12.0 * i as f64 / 300.0, -6.0 + 12.0 * j as f64 / 300.0];
                    if net.evaluate(&p).unwrap() <= 0.0 {
                        grid_best = grid_best.min(sq_dist(&p, &x).sqrt());
                    }
                }
            }
            assert!(sq_dist(&r.point, &x).sqrt() <= grid_best + 1e-9);
        }
    }

    #[test]
    fn sr_sums_to_f() {
        let net = std_net(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 2.0]], 1, 1.3);
        let x = [2.2, 0.7];
        let root = find_root(&net, &x, &RootOptions::default()).unwrap();
        let sr = explain_sr(&net, &x, &root).unwrap();
        assert_eq!(sr.iter().sum::<f64>(), net.evaluate(&x).unwrap());
        assert!(sr.iter().all(|&v| v >= 0.0));
        assert!(explain_sr(&net, &root.point, &root).is_err());
        let one_d = build_standard(&StandardModel::new(Matrix::from_rows(&[[0.0], [2.0]]).unwrap()).unwrap(), 0, b(1.0)).unwrap();
        let r1 = find_root(&one_d, &[0.2], &RootOptions::default()).unwrap();
        assert_eq!(explain_sr(&one_d, &[0.2], &r1).unwrap(), vec![one_d.evaluate(&[0.2]).unwrap()]);
    }

    #[test]
    fn ig_completeness_improves_with_steps() {
        let net = std_net(&[[0.0, 0.0], [2.0, 1.0], [-1.0, 2.0]], 0, 2.0);
        let x = [-0.3, 0.4];
        let root = find_root(&net, &x, &RootOptions::default()).unwrap();
        let gaps: Vec<f64> = [64, 256, 1024]
            .iter()
            .map(|&s| explain_ig(&net, &x, &root, s).unwrap().completeness_gap)
            .collect();
        assert!(gaps[2] <= 1e-3 * net.evaluate(&x).unwrap().abs());
        assert!(gaps[1] <= gaps[0] && gaps[2] <= gaps[1]);
        let same = RootPoint { point: x.to_vec(), achieved_f: 0.0, iterations: 0 };
        assert_eq!(explain_ig(&net, &x, &same, 8).unwrap().heatmap, vec![0.0, 0.0]);
        // linear f: exact with one step
        let lin = std_net(&[[0.0, 0.0], [4.0, 0.0]], 0, 1.0);
        let rl = find_root(&lin, &[1.0, 0.0], &RootOptions::default()).unwrap();
        assert!(explain_ig(&lin, &[1.0, 0.0], &rl, 1).unwrap().completeness_gap < 1e-9);
    }
}
