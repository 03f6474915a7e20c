//! Rewrites a trained cluster model and a target cluster `c` as a network of
//! detection (linear) and pooling layers whose output is the assignment
//! logit `f_c`.
//!
//! | model           | layers                                                   |
//! |-----------------|----------------------------------------------------------|
//! | standard        | linear `2(μ_c − μ_k)` → soft-min over `k ≠ c` (× β)      |
//! | kernel, naive   | distances → soft-min per cluster (γ) → `o_k − o_c` → soft-min (× β) |
//! | kernel, improved| linear `2(x_i − x_j)` → soft-max over `i ∈ C_c` (γ) → soft-min over `j ∈ C_k` (γ) → soft-min (× β) |
//! | deep            | feature map → linear → soft-min (× β)                    |

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::linalg::{sq_dist, sq_norm, Matrix};
use crate::models::{Activation, ClusterModel, DeepModel, KernelModel, StandardModel};
use crate::pooling::{soft_max_unchecked, soft_min_unchecked, Stiffness};
use crate::scalar::{lit, Scalar};

/// Default cap on the first-layer width of the improved kernel network.
pub const DEFAULT_MAX_IMPROVED_UNITS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Layer<T> {
    /// `a_k = w_k·a + b_k`; `weights` is `out × in`.
    Linear { weights: Matrix<T>, biases: Vec<T> },
    /// `d_j = ‖a − center_j‖² + b_j`. Not a detection layer: no linear
    /// propagation rule applies to it.
    SquaredDistance { centers: Matrix<T>, biases: Vec<T> },
    /// `scale · min^β` over each group of inputs.
    SoftMinPool {
        beta: Stiffness<T>,
        groups: Vec<Vec<usize>>,
        scale: T,
        input_width: usize,
    },
    /// `max^β` over each group of inputs.
    SoftMaxPool {
        beta: Stiffness<T>,
        groups: Vec<Vec<usize>>,
        input_width: usize,
    },
    Elementwise { activation: Activation, width: usize },
}

impl<T: Scalar> Layer<T> {
    pub fn input_width(&self) -> usize {
        match self {
            Self::Linear { weights, .. } => weights.ncols(),
            Self::SquaredDistance { centers, .. } => centers.ncols(),
            Self::SoftMinPool { input_width, .. } | Self::SoftMaxPool { input_width, .. } => *input_width,
            Self::Elementwise { width, .. } => *width,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Self::Linear { weights, .. } => weights.nrows(),
            Self::SquaredDistance { centers, .. } => centers.nrows(),
            Self::SoftMinPool { groups, .. } | Self::SoftMaxPool { groups, .. } => groups.len(),
            Self::Elementwise { width, .. } => *width,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::SquaredDistance { .. } => "squared_distance",
            Self::SoftMinPool { .. } => "soft_min_pool",
            Self::SoftMaxPool { .. } => "soft_max_pool",
            Self::Elementwise { .. } => "elementwise",
        }
    }

    pub fn is_pooling(&self) -> bool {
        matches!(self, Self::SoftMinPool { .. } | Self::SoftMaxPool { .. })
    }

    pub fn forward(&self, a: &[T]) -> Vec<T> {
        match self {
            Self::Linear { weights, biases } => {
                let mut z = weights.matvec(a);
                z.iter_mut().zip(biases).for_each(|(z, &b)| *z = *z + b);
                z
            }
            Self::SquaredDistance { centers, biases } => centers
                .rows_iter()
                .zip(biases)
                .map(|(c, &b)| sq_dist(a, c) + b)
                .collect(),
            Self::SoftMinPool { beta, groups, scale, .. } => groups
                .iter()
                .map(|g| {
                    let v: Vec<T> = g.iter().map(|&j| a[j]).collect();
                    *scale * soft_min_unchecked(&v, *beta)
                })
                .collect(),
            Self::SoftMaxPool { beta, groups, .. } => groups
                .iter()
                .map(|g| {
                    let v: Vec<T> = g.iter().map(|&j| a[j]).collect();
                    soft_max_unchecked(&v, *beta)
                })
                .collect(),
            Self::Elementwise { activation, .. } => a.iter().map(|&v| activation.apply(v)).collect(),
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |m: String| Err(shape(format!("layer {index}: {m}")));
        match self {
            Self::Linear { weights, biases } | Self::SquaredDistance { centers: weights, biases } => {
                if biases.len() != weights.nrows() {
                    return bad(format!("{} biases for {} outputs", biases.len(), weights.nrows()));
                }
                if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
                    return Err(domain(format!("layer {index}: non-finite parameters")));
                }
            }
            Self::SoftMinPool { beta, groups, input_width, scale } => {
                beta.validate()?;
                if !(scale.is_finite() && *scale > T::zero()) {
                    return Err(domain(format!("layer {index}: pooling scale must be positive")));
                }
                check_partition(groups, *input_width).or_else(bad)?;
            }
            Self::SoftMaxPool { beta, groups, input_width } => {
                beta.validate()?;
                check_partition(groups, *input_width).or_else(bad)?;
            }
            Self::Elementwise { .. } => {}
        }
        Ok(())
    }
}

pub(crate) fn check_partition(groups: &[Vec<usize>], width: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; width];
    for g in groups {
        if g.is_empty() {
            return Err("empty pooling group".into());
        }
        for &j in g {
            if j >= width {
                return Err(format!("pooling index {j} outside input width {width}"));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(format!("pooling index {j} appears twice"));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err("pooling groups do not cover every input".into());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Standard,
    KernelNaive,
    KernelImproved,
    Deep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelVariant {
    Naive,
    #[default]
    Improved,
}

/// Network computing the logit `f_c` of one target cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayeredNetwork<T> {
    pub layers: Vec<Layer<T>>,
    pub target_cluster: usize,
    pub model_tag: ModelTag,
    /// Cluster index behind each input of the top pooling layer.
    pub competitors: Vec<usize>,
}

/// Activations of every layer, input first; `layers + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub activations: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn input(&self) -> &[T] {
        &self.activations[0]
    }

    pub fn output(&self) -> T {
        self.activations.last().expect("non-empty trace")[0]
    }
}

impl<T: Scalar> LayeredNetwork<T> {
    pub fn new(layers: Vec<Layer<T>>, target_cluster: usize, model_tag: ModelTag, competitors: Vec<usize>) -> Result<Self> {
        let net = Self {
            layers,
            target_cluster,
            model_tag,
            competitors,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(domain("network has no layers"));
        };
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(shape(format!(
                    "layer {i} outputs {} values, layer {} expects {}",
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        if last.output_width() != 1 {
            return Err(shape("final layer must output a scalar"));
        }
        if !matches!(last, Layer::SoftMinPool { .. }) {
            return Err(domain("final layer must be a soft-min pool"));
        }
        if last.input_width() != self.competitors.len() {
            return Err(shape("competitor list does not match the top pooling width"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        if x.len() != self.input_width() {
            return Err(shape(format!(
                "input of width {} for network expecting {}",
                x.len(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for l in &self.layers {
            let next = l.forward(activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// `f_c(x)`.
    pub fn evaluate(&self, x: &[T]) -> Result<T> {
        Ok(self.forward(x)?.output())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let n: Self = serde_json::from_str(s)?;
        n.validate()?;
        Ok(n)
    }
}

fn check_target(c: usize, k: usize) -> Result<()> {
    if c >= k {
        return Err(domain(format!("target cluster {c} out of range for {k} clusters")));
    }
    Ok(())
}

fn top_pool<T: Scalar>(width: usize, beta: Stiffness<T>) -> Layer<T> {
    Layer::SoftMinPool {
        beta,
        groups: vec![(0..width).collect()],
        scale: beta.logit_scale(),
        input_width: width,
    }
}

/// Rows `2(μ_c − μ_k)` and biases `‖μ_k‖² − ‖μ_c‖²` for every `k ≠ c`.
fn centroid_differences<T: Scalar>(centroids: &Matrix<T>, c: usize) -> (Layer<T>, Vec<usize>) {
    let two = lit::<T>(2.0);
    let mu_c = centroids.row(c);
    let norm_c = sq_norm(mu_c);
    let competitors: Vec<usize> = (0..centroids.nrows()).filter(|&k| k != c).collect();
    let mut weights = Matrix::zeros(competitors.len(), centroids.ncols());
    let mut biases = Vec::with_capacity(competitors.len());
    for (r, &k) in competitors.iter().enumerate() {
        let mu_k = centroids.row(k);
        for (w, (&a, &b)) in weights.row_mut(r).iter_mut().zip(mu_c.iter().zip(mu_k)) {
            *w = two * (a - b);
        }
        biases.push(sq_norm(mu_k) - norm_c);
    }
    (Layer::Linear { weights, biases }, competitors)
}

pub fn build_standard<T: Scalar>(model: &StandardModel<T>, c: usize, beta: Stiffness<T>) -> Result<LayeredNetwork<T>> {
    check_target(c, model.n_clusters())?;
    let (linear, competitors) = centroid_differences(&model.centroids, c);
    let top = top_pool(competitors.len(), beta);
    LayeredNetwork::new(vec![linear, top], c, ModelTag::Standard, competitors)
}

pub fn build_kernel_naive<T: Scalar>(model: &KernelModel<T>, c: usize, beta: Stiffness<T>) -> Result<LayeredNetwork<T>> {
    let k = model.n_clusters();
    check_target(c, k)?;
    let biases = model.biases();
    let clusters = model.clusters();
    let distance = Layer::SquaredDistance {
        centers: model.support.clone(),
        biases: model.membership.iter().map(|&m| biases[m]).collect(),
    };
    let per_cluster = Layer::SoftMinPool {
        beta: model.gamma,
        groups: clusters,
        scale: T::one(),
        input_width: model.support.nrows(),
    };
    let competitors: Vec<usize> = (0..k).filter(|&m| m != c).collect();
    let mut diff = Matrix::zeros(competitors.len(), k);
    for (r, &m) in competitors.iter().enumerate() {
        diff.set(r, m, T::one());
        diff.set(r, c, -T::one());
    }
    let subtract = Layer::Linear {
        weights: diff,
        biases: vec![T::zero(); competitors.len()],
    };
    let top = top_pool(competitors.len(), beta);
    LayeredNetwork::new(vec![distance, per_cluster, subtract, top], c, ModelTag::KernelNaive, competitors)
}

pub fn build_kernel_improved<T: Scalar>(model: &KernelModel<T>, c: usize, beta: Stiffness<T>) -> Result<LayeredNetwork<T>> {
    build_kernel_improved_capped(model, c, beta, DEFAULT_MAX_IMPROVED_UNITS)
}

/// Improved kernel network; units of the first layer are ordered by
/// competitor `k`, then member `j ∈ C_k`, then member `i ∈ C_c`.
pub fn build_kernel_improved_capped<T: Scalar>(
    model: &KernelModel<T>,
    c: usize,
    beta: Stiffness<T>,
    max_units: usize,
) -> Result<LayeredNetwork<T>> {
    let k = model.n_clusters();
    check_target(c, k)?;
    let clusters = model.clusters();
    let own = &clusters[c];
    let competitors: Vec<usize> = (0..k).filter(|&m| m != c).collect();
    let others: usize = competitors.iter().map(|&m| clusters[m].len()).sum();
    let units = own.len() * others;
    if units > max_units {
        return Err(Error::Resource(format!(
            "improved kernel network needs {} x {} = {units} first-layer units, cap is {max_units}",
            own.len(),
            others
        )));
    }
    let b = model.biases();
    let two = lit::<T>(2.0);
    let dim = model.dim();
    let norms: Vec<T> = model.support.rows_iter().map(sq_norm).collect();

    let mut weights = Matrix::zeros(units, dim);
    let mut biases = Vec::with_capacity(units);
    let mut max_groups = Vec::with_capacity(others);
    let mut min_groups = Vec::with_capacity(competitors.len());
    let mut unit = 0;
    for &m in &competitors {
        let mut min_group = Vec::with_capacity(clusters[m].len());
        for &j in &clusters[m] {
            min_group.push(max_groups.len());
            let start = unit;
            for &i in own {
                let (xi, xj) = (model.support.row(i), model.support.row(j));
                for (w, (&a, &bb)) in weights.row_mut(unit).iter_mut().zip(xi.iter().zip(xj)) {
                    *w = two * (a - bb);
                }
                biases.push(norms[j] - norms[i] + b[m] - b[c]);
                unit += 1;
            }
            max_groups.push((start..unit).collect());
        }
        min_groups.push(min_group);
    }
    let n_max = max_groups.len();
    let layers = vec![
        Layer::Linear { weights, biases },
        Layer::SoftMaxPool {
            beta: model.gamma,
            groups: max_groups,
            input_width: units,
        },
        Layer::SoftMinPool {
            beta: model.gamma,
            groups: min_groups,
            scale: T::one(),
            input_width: n_max,
        },
        top_pool(competitors.len(), beta),
    ];
    LayeredNetwork::new(layers, c, ModelTag::KernelImproved, competitors)
}

pub fn build_deep<T: Scalar>(model: &DeepModel<T>, c: usize, beta: Stiffness<T>) -> Result<LayeredNetwork<T>> {
    check_target(c, model.n_clusters())?;
    let mut layers = Vec::with_capacity(2 * model.feature_map.len() + 2);
    for l in &model.feature_map {
        layers.push(Layer::Linear {
            weights: l.weights.clone(),
            biases: l.bias.clone(),
        });
        if l.activation != Activation::Identity {
            layers.push(Layer::Elementwise {
                activation: l.activation,
                width: l.weights.nrows(),
            });
        }
    }
    let (linear, competitors) = centroid_differences(&model.centroids, c);
    layers.push(linear);
    layers.push(top_pool(competitors.len(), beta));
    LayeredNetwork::new(layers, c, ModelTag::Deep, competitors)
}

/// Dispatches to the builder of the model's family.
pub fn neuralize<T: Scalar>(
    model: &ClusterModel<T>,
    c: usize,
    beta: Stiffness<T>,
    variant: KernelVariant,
) -> Result<LayeredNetwork<T>> {
    match model {
        ClusterModel::Standard(m) => build_standard(m, c, beta),
        ClusterModel::Kernel(m) => match variant {
            KernelVariant::Naive => build_kernel_naive(m, c, beta),
            KernelVariant::Improved => build_kernel_improved(m, c, beta),
        },
        ClusterModel::Deep(m) => build_deep(m, c, beta),
    }
}
