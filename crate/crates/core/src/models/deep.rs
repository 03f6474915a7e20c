//! Deep k-means: an explicit feature map `Φ = Φ_L ∘ … ∘ Φ_1` of dense layers,
//! trained by full-batch gradient descent with the assignment frozen to the
//! labels and the feature-space centroids held constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{domain, shape, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::scalar::{count, lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// `max(0, x) − 0.75·max(0, x − 1)`
    ModifiedRelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Identity => x,
            Self::ModifiedRelu => modified_relu(x),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Identity => T::one(),
            Self::ModifiedRelu => modified_relu_derivative(x),
        }
    }
}

pub fn modified_relu<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    x.max(zero) - lit::<T>(0.75) * (x - T::one()).max(zero)
}

/// Right derivative of [`modified_relu`]: 0 below 0, 1 on `[0, 1)`, 0.25 from 1.
pub fn modified_relu_derivative<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        T::zero()
    } else if x < T::one() {
        T::one()
    } else {
        lit(0.25)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenseLayer<T> {
    /// `out × in`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn pre_activation(&self, a: &[T]) -> Vec<T> {
        let mut z = self.weights.matvec(a);
        z.iter_mut().zip(&self.bias).for_each(|(z, &b)| *z = *z + b);
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DeepModel<T> {
    pub feature_map: Vec<DenseLayer<T>>,
    /// `K × H`, in feature space.
    pub centroids: Matrix<T>,
}

impl<T: Scalar> DeepModel<T> {
    pub fn new(feature_map: Vec<DenseLayer<T>>, centroids: Matrix<T>) -> Result<Self> {
        let m = Self { feature_map, centroids };
        m.validate()?;
        Ok(m)
    }

    /// Single identity layer: `Φ(x) = x`.
    pub fn identity(dim: usize, centroids: Matrix<T>) -> Result<Self> {
        let layer = DenseLayer {
            weights: Matrix::identity(dim),
            bias: vec![T::zero(); dim],
            activation: Activation::Identity,
        };
        Self::new(vec![layer], centroids)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_map.is_empty() {
            return Err(domain("feature map needs at least one layer"));
        }
        if self.centroids.nrows() < 2 {
            return Err(domain("a cluster model needs at least two centroids"));
        }
        for (l, pair) in self.feature_map.windows(2).enumerate() {
            if pair[0].weights.nrows() != pair[1].weights.ncols() {
                return Err(shape(format!("layer {l} output does not feed layer {}", l + 1)));
            }
        }
        for (l, layer) in self.feature_map.iter().enumerate() {
            if layer.bias.len() != layer.weights.nrows() {
                return Err(shape(format!("layer {l} bias length mismatch")));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(domain(format!("layer {l} has non-finite parameters")));
            }
        }
        if self.feature_dim() != self.centroids.ncols() {
            return Err(shape(format!(
                "feature map outputs {} values but centroids have width {}",
                self.feature_dim(),
                self.centroids.ncols()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature_map[0].weights.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_map.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn features(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(shape(format!(
                "point of dimension {} for model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut a = x.to_vec();
        for layer in &self.feature_map {
            a = layer
                .pre_activation(&a)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(a)
    }

    /// `‖Φ(x) − μ_k‖²` for every cluster.
    pub fn outlierness(&self, x: &[T]) -> Result<Vec<T>> {
        let phi = self.features(x)?;
        Ok(self.centroids.rows_iter().map(|m| sq_dist(&phi, m)).collect())
    }

    fn n_params(&self) -> usize {
        self.feature_map
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer (weights then bias).
    pub fn parameters(&self) -> Vec<T> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.feature_map {
            p.extend_from_slice(l.weights.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[T]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.feature_map {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&p[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }
}

/// `K × H` matrix with `scale` on the diagonal.
pub fn one_hot_centroids<T: Scalar>(k: usize, width: usize, scale: T) -> Result<Matrix<T>> {
    if width < k {
        return Err(shape(format!("{k} one-hot centroids need width >= {k}, got {width}")));
    }
    let mut m = Matrix::zeros(k, width);
    for i in 0..k {
        m.set(i, i, scale);
    }
    Ok(m)
}

fn check_training_data<T: Scalar>(model: &DeepModel<T>, data: &Dataset<T>) -> Result<()> {
    let labels = data.require_labels()?;
    if data.dim() != model.dim() {
        return Err(shape("data dimension does not match the feature map input"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.n_clusters()) {
        return Err(domain(format!("label {bad} has no centroid")));
    }
    Ok(())
}

/// Frozen-assignment loss `N⁻¹ Σ_i ‖Φ(x_i) − μ_{y_i}‖²` and its gradient with
/// respect to [`DeepModel::parameters`].
pub fn loss_and_gradient<T: Scalar>(model: &DeepModel<T>, data: &Dataset<T>) -> Result<(T, Vec<T>)> {
    check_training_data(model, data)?;
    let labels = data.require_labels()?;
    let n = count::<T>(data.len());
    let layers = &model.feature_map;
    let mut grads: Vec<(Matrix<T>, Vec<T>)> = layers
        .iter()
        .map(|l| (Matrix::zeros(l.weights.nrows(), l.weights.ncols()), vec![T::zero(); l.bias.len()]))
        .collect();
    let mut loss = T::zero();

    for (i, &y) in labels.iter().enumerate() {
        // forward, keeping inputs and pre-activations
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut a = data.point(i).to_vec();
        for l in layers {
            let z = l.pre_activation(&a);
            let next: Vec<T> = z.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let mu = model.centroids.row(y);
        loss = loss + sq_dist(&a, mu);
        let two = lit::<T>(2.0);
        let mut delta: Vec<T> = a.iter().zip(mu).map(|(&p, &m)| two * (p - m) / n).collect();

        for (li, l) in layers.iter().enumerate().rev() {
            let dz: Vec<T> = delta
                .iter()
                .zip(&pre[li])
                .map(|(&d, &z)| d * l.activation.derivative(z))
                .collect();
            let (gw, gb) = &mut grads[li];
            for (r, &d) in dz.iter().enumerate() {
                gb[r] = gb[r] + d;
                for (g, &x) in gw.row_mut(r).iter_mut().zip(&inputs[li]) {
                    *g = *g + d * x;
                }
            }
            delta = l.weights.matvec_t(&dz);
        }
    }

    let mut flat = Vec::with_capacity(model.n_params());
    for (gw, gb) in grads {
        flat.extend_from_slice(gw.as_slice());
        flat.extend_from_slice(&gb);
    }
    Ok((loss / n, flat))
}

#[derive(Clone, Debug)]
pub struct DeepTrainOptions {
    /// Output width of every layer; the last entry is the feature width.
    pub architecture: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DeepFit<T> {
    pub model: DeepModel<T>,
    /// Loss before training followed by the loss after every epoch.
    pub loss_history: Vec<T>,
}

/// Randomly initialized feature map (Glorot-uniform weights, zero biases).
pub fn init_deep<T: Scalar>(
    dim: usize,
    centroids: Matrix<T>,
    architecture: &[usize],
    activation: Activation,
    seed: u64,
) -> Result<DeepModel<T>> {
    if architecture.is_empty() || architecture.contains(&0) {
        return Err(domain("architecture needs at least one non-empty layer"));
    }
    if *architecture.last().unwrap() != centroids.ncols() {
        return Err(shape(format!(
            "architecture outputs {} features but centroids have width {}",
            architecture.last().unwrap(),
            centroids.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = dim;
    let mut layers = Vec::with_capacity(architecture.len());
    for &out in architecture {
        let limit = (6.0 / (fan_in + out) as f64).sqrt();
        let w: Vec<T> = (0..out * fan_in)
            .map(|_| lit(rng.random_range(-limit..limit)))
            .collect();
        layers.push(DenseLayer {
            weights: Matrix::from_vec(out, fan_in, w)?,
            bias: vec![T::zero(); out],
            activation,
        });
        fan_in = out;
    }
    DeepModel::new(layers, centroids)
}

/// Trains a freshly initialized feature map towards fixed centroids.
pub fn train_deep<T: Scalar>(data: &Dataset<T>, centroids: Matrix<T>, opts: &DeepTrainOptions) -> Result<DeepFit<T>> {
    let rows: Vec<Vec<T>> = centroids.to_rows();
    for i in 0..rows.len() {
        for j in 0..i {
            if rows[i] == rows[j] {
                return Err(domain(format!("centroids {j} and {i} coincide")));
            }
        }
    }
    let model = init_deep(data.dim(), centroids, &opts.architecture, opts.activation, opts.seed)?;
    train_deep_from(data, model, opts.epochs, lit(opts.step))
}

/// Plain full-batch gradient descent from a given model.
pub fn train_deep_from<T: Scalar>(data: &Dataset<T>, mut model: DeepModel<T>, epochs: usize, step: T) -> Result<DeepFit<T>> {
    if !(step >= T::zero() && step.is_finite()) {
        return Err(domain(format!("step size must be non-negative, got {step}")));
    }
    let mut loss_history = Vec::with_capacity(epochs + 1);
    let mut params = model.parameters();
    for _ in 0..epochs {
        let (loss, grad) = loss_and_gradient(&model, data)?;
        loss_history.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p = *p - step * *g;
        }
        model.set_parameters(&params);
    }
    let (loss, _) = loss_and_gradient(&model, data)?;
    loss_history.push(loss);
    Ok(DeepFit { model, loss_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{centroids_from_labels, kmeans_objective, make_blobs, StandardModel};

    #[test]
    fn modified_relu_values() {
        assert_eq!(modified_relu(-1.0), 0.0);
        assert_eq!(modified_relu(0.5), 0.5);
        assert_eq!(modified_relu(2.0), 1.25);
        assert_eq!(modified_relu_derivative(-0.1), 0.0);
        assert_eq!(modified_relu_derivative(0.0), 1.0);
        assert_eq!(modified_relu_derivative(0.5), 1.0);
        assert_eq!(modified_relu_derivative(1.0), 0.25);
        assert_eq!(modified_relu_derivative(3.0), 0.25);
    }

    #[test]
    fn identity_map_matches_standard() {
        let d: Dataset<f64> = make_blobs(12, 3, 2, 0.8, 3).unwrap();
        let means = centroids_from_labels(&d).unwrap();
        let deep = DeepModel::identity(2, means.centroids.clone()).unwrap();
        let std = StandardModel::new(means.centroids.clone()).unwrap();
        for i in 0..d.len() {
            assert_eq!(deep.outlierness(d.point(i)).unwrap(), std.outlierness(d.point(i)).unwrap());
        }
        // epoch-0 loss is the within-class variance
        let (loss, _) = loss_and_gradient(&deep, &d).unwrap();
        let wcss = kmeans_objective(&d, &means.centroids, d.labels().unwrap()) / d.len() as f64;
        assert!((loss - wcss).abs() < 1e-12);
    }

    #[test]
    fn feature_point_on_centroid() {
        let c = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let deep = DeepModel::identity(2, c).unwrap();
        assert_eq!(deep.outlierness(&[1.0, 0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn outlierness_matches_composed_oracle() {
        let c = one_hot_centroids(3, 4, 1.0).unwrap();
        let m = init_deep(3, c, &[5, 4], Activation::ModifiedRelu, 9).unwrap();
        let x = [0.4, -1.2, 2.0];
        // hand-composed forward pass
        let mut a = x.to_vec();
        for l in &m.feature_map {
            a = (0..l.weights.nrows())
                .map(|r| {
                    let z: f64 = (0..l.weights.ncols()).map(|c| l.weights.get(r, c) * a[c]).sum::<f64>() + l.bias[r];
                    z.max(0.0) - 0.75 * (z - 1.0).max(0.0)
                })
                .collect();
        }
        let o = m.outlierness(&x).unwrap();
        for k in 0..3 {
            let want: f64 = (0..4).map(|h| (a[h] - m.centroids.get(k, h)).powi(2)).sum();
            assert!((o[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d: Dataset<f64> = make_blobs(5, 3, 3, 1.0, 2).unwrap();
        let c = one_hot_centroids(3, 3, 1.0).unwrap();
        let mut m = init_deep(3, c, &[4, 3], Activation::ModifiedRelu, 5).unwrap();
        // nonzero biases keep pre-activations off the kinks
        let mut p = m.parameters();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
        }
        m.set_parameters(&p);
        let (_, grad) = loss_and_gradient(&m, &d).unwrap();
        let p0 = m.parameters();
        let h = 1e-5;
        let mut probe = m.clone();
        for (i, &g) in grad.iter().enumerate() {
            let mut p = p0.clone();
            p[i] += h;
            probe.set_parameters(&p);
            let up = loss_and_gradient(&probe, &d).unwrap().0;
            p[i] -= 2.0 * h;
            probe.set_parameters(&p);
            let down = loss_and_gradient(&probe, &d).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - g).abs() < 1e-9, "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn zero_step_leaves_parameters() {
        let d: Dataset<f64> = make_blobs(5, 2, 2, 1.0, 2).unwrap();
        let c = one_hot_centroids(2, 2, 1.0).unwrap();
        let m = init_deep(2, c, &[3, 2], Activation::ModifiedRelu, 1).unwrap();
        let fit = train_deep_from(&d, m.clone(), 5, 0.0).unwrap();
        assert_eq!(fit.model, m);
    }

    #[test]
    fn width_mismatch_and_duplicate_centroids_rejected() {
        let d: Dataset<f64> = make_blobs(5, 2, 2, 1.0, 2).unwrap();
        let opts = DeepTrainOptions {
            architecture: vec![4, 3],
            activation: Activation::ModifiedRelu,
            epochs: 1,
            step: 0.01,
            seed: 0,
        };
        let c = one_hot_centroids(2, 2, 1.0).unwrap();
        assert!(train_deep(&d, c, &opts).is_err());
        let dup = Matrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(train_deep(&d, dup, &opts).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let d: Dataset<f64> = make_blobs(20, 3, 2, 0.7, 8).unwrap();
        let opts = DeepTrainOptions {
            architecture: vec![8, 3],
            activation: Activation::ModifiedRelu,
            epochs: 50,
            step: 1e-2,
            seed: 3,
        };
        let fit = train_deep(&d, one_hot_centroids(3, 3, 1.0).unwrap(), &opts).unwrap();
        assert_eq!(fit.loss_history.len(), 51);
        for w in fit.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        assert!(fit.loss_history[50] < fit.loss_history[0]);
    }
}
