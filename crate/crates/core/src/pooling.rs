//! Soft-min / soft-max pooling (reversed log-sum-exp) and the soft cluster
//! assignment built on top of it.
//!
//! Every log-sum-exp subtracts the extremum before exponentiating, so large
//! stiffness values and large scores stay finite.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{domain, Result};
use crate::scalar::{count, Scalar};

/// Inverse temperature of a soft pooling operation.
///
/// `Infinite` is the hard limit: exact min/max, one-hot weights with ties
/// split equally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stiffness<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> Stiffness<T> {
    pub fn new(beta: T) -> Result<Self> {
        if beta.is_infinite() && beta > T::zero() {
            return Ok(Self::Infinite);
        }
        if !(beta.is_finite() && beta > T::zero()) {
            return Err(domain(format!("stiffness must be positive, got {beta}")));
        }
        Ok(Self::Finite(beta))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    /// Finite value, or `None` for the hard limit.
    pub fn value(&self) -> Option<T> {
        match *self {
            Self::Finite(b) => Some(b),
            Self::Infinite => None,
        }
    }

    /// Factor applied to the top pooling output to turn a soft-min into a
    /// logit. In the hard limit the logit diverges, so the margin itself
    /// (scale 1) is reported instead; its sign is the logit's sign.
    pub fn logit_scale(&self) -> T {
        self.value().unwrap_or_else(T::one)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            Self::Finite(b) if !(b.is_finite() && b > T::zero()) => {
                Err(domain(format!("stiffness must be positive, got {b}")))
            }
            _ => Ok(()),
        }
    }
}

impl<T: Scalar> Serialize for Stiffness<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(b) => b.serialize(serializer),
            Self::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Stiffness<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct StiffnessVisitor<T>(std::marker::PhantomData<T>);

        impl<T: Scalar> Visitor<'_> for StiffnessVisitor<T> {
            type Value = Stiffness<T>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                let b = T::from_f64(v).ok_or_else(|| E::custom("stiffness out of range"))?;
                Stiffness::new(b).map_err(E::custom)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                match v {
                    "inf" | "infinite" | "Infinity" => Ok(Stiffness::Infinite),
                    _ => Err(E::custom(format!("unknown stiffness {v:?}"))),
                }
            }
        }

        deserializer.deserialize_any(StiffnessVisitor(std::marker::PhantomData))
    }
}

fn check_scores<T: Scalar>(values: &[T]) -> Result<()> {
    if values.is_empty() {
        return Err(domain("pooling over an empty set"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(domain(format!("non-finite score {v}")));
    }
    Ok(())
}

fn min_of<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().fold(T::infinity(), T::min)
}

fn max_of<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `−β⁻¹ log Σ_j exp(−β v_j)`; exact minimum when `beta` is infinite.
pub fn soft_min<T: Scalar>(values: &[T], beta: Stiffness<T>) -> Result<T> {
    check_scores(values)?;
    beta.validate()?;
    Ok(soft_min_unchecked(values, beta))
}

/// `β⁻¹ log Σ_j exp(β v_j)`; exact maximum when `beta` is infinite.
pub fn soft_max<T: Scalar>(values: &[T], beta: Stiffness<T>) -> Result<T> {
    check_scores(values)?;
    beta.validate()?;
    Ok(soft_max_unchecked(values, beta))
}

pub(crate) fn soft_min_unchecked<T: Scalar>(values: &[T], beta: Stiffness<T>) -> T {
    let m = min_of(values);
    match beta {
        Stiffness::Infinite => m,
        Stiffness::Finite(b) => {
            let s: T = values.iter().map(|&v| (-b * (v - m)).exp()).sum();
            m - s.ln() / b
        }
    }
}

pub(crate) fn soft_max_unchecked<T: Scalar>(values: &[T], beta: Stiffness<T>) -> T {
    let m = max_of(values);
    match beta {
        Stiffness::Infinite => m,
        Stiffness::Finite(b) => {
            let s: T = values.iter().map(|&v| (b * (v - m)).exp()).sum();
            m + s.ln() / b
        }
    }
}

/// Normalized `exp(−β v_j)` weights. Shared by the soft assignment and the
/// min-take-most relevance rule.
pub(crate) fn softmin_weights<T: Scalar>(values: &[T], beta: Stiffness<T>) -> Vec<T> {
    let m = min_of(values);
    match beta {
        Stiffness::Infinite => split_ties(values, m),
        Stiffness::Finite(b) => normalize(values.iter().map(|&v| (-b * (v - m)).exp()).collect()),
    }
}

/// Normalized `exp(+β v_j)` weights.
pub(crate) fn softmax_weights<T: Scalar>(values: &[T], beta: Stiffness<T>) -> Vec<T> {
    let m = max_of(values);
    match beta {
        Stiffness::Infinite => split_ties(values, m),
        Stiffness::Finite(b) => normalize(values.iter().map(|&v| (b * (v - m)).exp()).collect()),
    }
}

fn split_ties<T: Scalar>(values: &[T], extremum: T) -> Vec<T> {
    let hits = values.iter().filter(|&&v| v == extremum).count();
    let share = T::one() / count::<T>(hits);
    values
        .iter()
        .map(|&v| if v == extremum { share } else { T::zero() })
        .collect()
}

fn normalize<T: Scalar>(mut w: Vec<T>) -> Vec<T> {
    let s: T = w.iter().copied().sum();
    for x in &mut w {
        *x = *x / s;
    }
    w
}

/// Soft cluster assignment `P(ω_c | x) = exp(−β o_c) / Σ_k exp(−β o_k)`.
pub fn soft_assignment<T: Scalar>(outlier_scores: &[T], beta: Stiffness<T>) -> Result<Vec<T>> {
    check_scores(outlier_scores)?;
    beta.validate()?;
    Ok(softmin_weights(outlier_scores, beta))
}

/// Assignment logit of `cluster` as a soft-min over competitor differences,
/// `β · min^β_{k≠c} (o_k − o_c)`.
///
/// With infinite stiffness the hard margin `min_{k≠c}(o_k − o_c)` is
/// returned (see [`Stiffness::logit_scale`]).
pub fn logit<T: Scalar>(outlier_scores: &[T], cluster: usize, beta: Stiffness<T>) -> Result<T> {
    check_scores(outlier_scores)?;
    beta.validate()?;
    if outlier_scores.len() < 2 {
        return Err(domain("logit needs at least one competing cluster"));
    }
    if cluster >= outlier_scores.len() {
        return Err(domain(format!(
            "cluster {cluster} out of range for {} clusters",
            outlier_scores.len()
        )));
    }
    let oc = outlier_scores[cluster];
    let diffs: Vec<T> = outlier_scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != cluster)
        .map(|(_, &o)| o - oc)
        .collect();
    Ok(beta.logit_scale() * soft_min_unchecked(&diffs, beta))
}
