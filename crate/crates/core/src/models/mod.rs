//! The three cluster model families and their outlierness functions.

mod dataset;
mod deep;
mod kernel;
mod standard;

use serde::{Deserialize, Serialize};

pub use dataset::{blob_centers, make_blobs, make_blobs_at, Dataset};
pub use deep::{
    init_deep, loss_and_gradient, modified_relu, modified_relu_derivative, one_hot_centroids, train_deep,
    train_deep_from, Activation, DeepFit, DeepModel, DeepTrainOptions, DenseLayer,
};
pub use kernel::{
    kernel_matrix, leave_one_out_scores, reduce_support, train_kernel_em, KernelEmFit, KernelEmOptions,
    KernelModel, DEFAULT_MAX_KERNEL_POINTS,
};
pub use standard::{
    centroids_from_labels, kmeans_objective, lloyd_from, train_standard, LloydFit, StandardModel,
    MAX_LLOYD_ITERATIONS,
};

use crate::error::Result;
use crate::linalg::argmin;
use crate::scalar::Scalar;

/// Any trained cluster model. Serialized with a `model_type` discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case", bound = "T: Scalar")]
pub enum ClusterModel<T> {
    Standard(StandardModel<T>),
    Kernel(KernelModel<T>),
    Deep(DeepModel<T>),
}

impl<T: Scalar> ClusterModel<T> {
    pub fn outlierness(&self, x: &[T]) -> Result<Vec<T>> {
        match self {
            Self::Standard(m) => m.outlierness(x),
            Self::Kernel(m) => m.outlierness(x),
            Self::Deep(m) => m.outlierness(x),
        }
    }

    pub fn n_clusters(&self) -> usize {
        match self {
            Self::Standard(m) => m.n_clusters(),
            Self::Kernel(m) => m.n_clusters(),
            Self::Deep(m) => m.n_clusters(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Standard(m) => m.dim(),
            Self::Kernel(m) => m.dim(),
            Self::Deep(m) => m.dim(),
        }
    }

    /// Hard assignment: cluster of smallest outlierness.
    pub fn assign(&self, x: &[T]) -> Result<usize> {
        Ok(argmin(&self.outlierness(x)?))
    }

    pub fn assign_all(&self, data: &Dataset<T>) -> Result<Vec<usize>> {
        (0..data.len()).map(|i| self.assign(data.point(i))).collect()
    }

    /// Checks structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Standard(m) => StandardModel::new(m.centroids.clone()).map(|_| ()),
            Self::Kernel(m) => m.validate(),
            Self::Deep(m) => m.validate(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}
