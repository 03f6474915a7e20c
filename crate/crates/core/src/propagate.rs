//! Backward relevance propagation over a [`ForwardTrace`].
//!
//! Pooling layers redistribute with min-/max-take-most weights, linear layers
//! with the z-family. Rules are linear in the incoming relevance, which is
//! what makes per-competitor isolation additive.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::linalg::Matrix;
use crate::neuralize::{check_partition, ForwardTrace, Layer, LayeredNetwork};
use crate::pooling::{softmax_weights, softmin_weights, Stiffness};
use crate::scalar::{lit, tiny, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Rule<T> {
    MinTakeMost,
    MaxTakeMost,
    Z,
    ZPlus,
    ZB { lower: Vec<T>, upper: Vec<T> },
    Hybrid { gamma_mix: T },
}

impl<T: Scalar> Rule<T> {
    fn is_pooling_rule(&self) -> bool {
        matches!(self, Self::MinTakeMost | Self::MaxTakeMost)
    }

    fn name(&self) -> &'static str {
        match self {
            Self::MinTakeMost => "min_take_most",
            Self::MaxTakeMost => "max_take_most",
            Self::Z => "z",
            Self::ZPlus => "z_plus",
            Self::ZB { .. } => "z_b",
            Self::Hybrid { .. } => "hybrid",
        }
    }
}

/// One rule per network layer, bottom layer first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RuleSpec<T> {
    pub rules: Vec<Rule<T>>,
}

impl<T: Scalar> RuleSpec<T> {
    /// Take-most rules on pooling layers, `Z` elsewhere, `ZB` on the input
    /// layer when a box is given.
    pub fn default_for(net: &LayeredNetwork<T>, bounds: Option<(Vec<T>, Vec<T>)>) -> Self {
        let mut rules: Vec<Rule<T>> = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::SoftMinPool { .. } => Rule::MinTakeMost,
                Layer::SoftMaxPool { .. } => Rule::MaxTakeMost,
                _ => Rule::Z,
            })
            .collect();
        if let (Some((lower, upper)), Some(Layer::Linear { .. })) = (bounds, net.layers.first()) {
            rules[0] = Rule::ZB { lower, upper };
        }
        Self { rules }
    }

    /// Same as [`RuleSpec::default_for`] but with `rule` on every linear layer.
    pub fn uniform_linear(net: &LayeredNetwork<T>, rule: Rule<T>) -> Self {
        let mut spec = Self::default_for(net, None);
        for (r, l) in spec.rules.iter_mut().zip(&net.layers) {
            if matches!(l, Layer::Linear { .. }) {
                *r = rule.clone();
            }
        }
        spec
    }

    pub fn check(&self, net: &LayeredNetwork<T>) -> Result<()> {
        if self.rules.len() != net.layers.len() {
            return Err(Error::Config(format!(
                "{} rules for a network of {} layers",
                self.rules.len(),
                net.layers.len()
            )));
        }
        for (i, (r, l)) in self.rules.iter().zip(&net.layers).enumerate() {
            let ok = match l {
                Layer::SoftMinPool { .. } => matches!(r, Rule::MinTakeMost),
                Layer::SoftMaxPool { .. } => matches!(r, Rule::MaxTakeMost),
                Layer::Linear { .. } | Layer::Elementwise { .. } => !r.is_pooling_rule(),
                Layer::SquaredDistance { .. } => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "rule {} cannot be applied to layer {i} ({})",
                    r.name(),
                    l.kind_name()
                )));
            }
            match r {
                Rule::ZB { lower, upper } => {
                    let w = l.input_width();
                    if lower.len() != w || upper.len() != w {
                        return Err(Error::Config(format!("box bounds for layer {i} must have width {w}")));
                    }
                    if lower.iter().zip(upper).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
                        return Err(Error::Config("box bounds must be finite with lower <= upper".into()));
                    }
                }
                Rule::Hybrid { gamma_mix } if !(gamma_mix.is_finite() && *gamma_mix >= T::zero()) => {
                    return Err(Error::Config("gamma_mix must be finite and nonnegative".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Relevance of every layer, aligned with the trace (input first).
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceState<T> {
    pub relevances: Vec<Vec<T>>,
    /// Relevance absorbed by biases and denominator stabilizers.
    pub bias_leakage: T,
}

impl<T: Scalar> RelevanceState<T> {
    pub fn heatmap(&self) -> &[T] {
        &self.relevances[0]
    }

    pub fn total(&self) -> T {
        self.heatmap().iter().copied().sum()
    }
}

/// Input relevance of a linear rule plus what it leaked.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMessages<T> {
    pub relevance: Vec<T>,
    pub leakage: T,
}

/// Nudges messages until they add up to `total` in floating point (summed
/// in index order). The rounded sum is monotone in every entry, so each
/// entry is bisected in turn, smallest first since its grid is finest.
pub(crate) fn conserve<T: Scalar>(messages: &mut [T], total: T) {
    let sum = |m: &[T]| m.iter().copied().sum::<T>();
    let s = sum(messages);
    if s == total || messages.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..messages.len()).collect();
    order.sort_by(|&a, &b| {
        messages[a]
            .abs()
            .partial_cmp(&messages[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let width = (total.abs() + s.abs()) * T::epsilon() * lit(8.0);
    for j in order {
        let original = messages[j];
        let centre = original + (total - s);
        let (mut lo, mut hi) = (centre - width, centre + width);
        for _ in 0..200 {
            let mid = lo + (hi - lo) / lit(2.0);
            messages[j] = mid;
            let t = sum(messages);
            if t == total {
                return;
            }
            if t < total {
                lo = mid;
            } else {
                hi = mid;
            }
            if !(lo < hi) {
                break;
            }
        }
        messages[j] = original;
    }
}

fn take_most<T: Scalar>(weights: Vec<T>, r: T) -> Vec<T> {
    let mut m: Vec<T> = weights.into_iter().map(|w| w * r).collect();
    conserve(&mut m, r);
    m
}

/// `R_{j←k} = softmin_j(β a) · R_k`.
pub fn rule_min_take_most<T: Scalar>(inputs: &[T], beta: Stiffness<T>, r: T) -> Result<Vec<T>> {
    check_inputs(inputs)?;
    beta.validate()?;
    Ok(take_most(softmin_weights(inputs, beta), r))
}

/// `R_{j←k} = softmax_j(β a) · R_k`.
pub fn rule_max_take_most<T: Scalar>(inputs: &[T], beta: Stiffness<T>, r: T) -> Result<Vec<T>> {
    check_inputs(inputs)?;
    beta.validate()?;
    Ok(take_most(softmax_weights(inputs, beta), r))
}

fn check_inputs<T: Scalar>(inputs: &[T]) -> Result<()> {
    if inputs.is_empty() {
        return Err(domain("pooling over an empty group"));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(domain("pooling inputs must be finite"));
    }
    Ok(())
}

/// Redistributes `r_out` given a contribution function and the bias term
/// added to each denominator.
fn linear_rule<T: Scalar>(
    n_in: usize,
    r_out: &[T],
    contribution: impl Fn(usize, usize) -> T,
    bias: impl Fn(usize) -> T,
) -> LinearMessages<T> {
    let eps = lit::<T>(1e-12);
    let mut relevance = vec![T::zero(); n_in];
    let mut leakage = T::zero();
    let mut z = vec![T::zero(); n_in];
    for (k, &rk) in r_out.iter().enumerate() {
        if rk == T::zero() {
            continue;
        }
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = contribution(j, k);
        }
        let b = bias(k);
        let d = z.iter().copied().sum::<T>() + b;
        if d.abs() < tiny::<T>() {
            leakage = leakage + rk;
            continue;
        }
        let stab = if d >= T::zero() { eps } else { -eps };
        let den = d + stab;
        let scale = rk / den;
        for (r, &zj) in relevance.iter_mut().zip(&z) {
            *r = *r + zj * scale;
        }
        leakage = leakage + (b + stab) * scale;
    }
    LinearMessages { relevance, leakage }
}

fn check_linear<T: Scalar>(a: &[T], weights: &Matrix<T>, r_out: &[T]) -> Result<()> {
    if a.len() != weights.ncols() || r_out.len() != weights.nrows() {
        return Err(shape(format!(
            "linear rule: {} inputs and {} outputs for a {}x{} weight matrix",
            a.len(),
            r_out.len(),
            weights.nrows(),
            weights.ncols()
        )));
    }
    Ok(())
}

/// z-rule: contributions `a_j w_jk`, bias in the denominator.
pub fn rule_z<T: Scalar>(a: &[T], weights: &Matrix<T>, biases: &[T], r_out: &[T]) -> Result<LinearMessages<T>> {
    check_linear(a, weights, r_out)?;
    Ok(linear_rule(a.len(), r_out, |j, k| a[j] * weights.get(k, j), |k| biases[k]))
}

/// z⁺-rule: contributions `a_j w_jk⁺`, no bias term.
pub fn rule_z_plus<T: Scalar>(a: &[T], weights: &Matrix<T>, r_out: &[T]) -> Result<LinearMessages<T>> {
    check_linear(a, weights, r_out)?;
    Ok(linear_rule(
        a.len(),
        r_out,
        |j, k| a[j] * weights.get(k, j).max(T::zero()),
        |_| T::zero(),
    ))
}

/// zB-rule: contributions `x_j w_jk − l_j w_jk⁺ − h_j w_jk⁻`, no bias term.
pub fn rule_zb<T: Scalar>(
    x: &[T],
    weights: &Matrix<T>,
    lower: &[T],
    upper: &[T],
    r_out: &[T],
) -> Result<LinearMessages<T>> {
    check_linear(x, weights, r_out)?;
    if lower.len() != x.len() || upper.len() != x.len() {
        return Err(shape("box bounds do not match input width"));
    }
    Ok(linear_rule(
        x.len(),
        r_out,
        |j, k| {
            let w = weights.get(k, j);
            x[j] * w - lower[j] * w.max(T::zero()) - upper[j] * w.min(T::zero())
        },
        |_| T::zero(),
    ))
}

/// Hybrid rule: contributions `a_j (w_jk + γ w_jk⁺)`, bias in the denominator.
pub fn rule_hybrid<T: Scalar>(
    a: &[T],
    weights: &Matrix<T>,
    biases: &[T],
    gamma_mix: T,
    r_out: &[T],
) -> Result<LinearMessages<T>> {
    check_linear(a, weights, r_out)?;
    Ok(linear_rule(
        a.len(),
        r_out,
        |j, k| {
            let w = weights.get(k, j);
            a[j] * (w + gamma_mix * w.max(T::zero()))
        },
        |k| biases[k],
    ))
}

fn pool_backward<T: Scalar>(
    a: &[T],
    groups: &[Vec<usize>],
    beta: Stiffness<T>,
    r_out: &[T],
    min: bool,
) -> Vec<T> {
    let mut r_in = vec![T::zero(); a.len()];
    for (g, &rk) in groups.iter().zip(r_out) {
        let v: Vec<T> = g.iter().map(|&j| a[j]).collect();
        let w = if min { softmin_weights(&v, beta) } else { softmax_weights(&v, beta) };
        for (&j, m) in g.iter().zip(take_most(w, rk)) {
            r_in[j] = m;
        }
    }
    r_in
}

fn check_trace<T: Scalar>(net: &LayeredNetwork<T>, trace: &ForwardTrace<T>) -> Result<()> {
    let ok = trace.activations.len() == net.layers.len() + 1
        && trace
            .activations
            .iter()
            .zip(net.layers.iter().map(|l| l.input_width()).chain([1]))
            .all(|(a, w)| a.len() == w);
    if !ok {
        return Err(shape("trace was not produced by this network"));
    }
    Ok(())
}

fn run<T: Scalar>(
    net: &LayeredNetwork<T>,
    trace: &ForwardTrace<T>,
    rules: &RuleSpec<T>,
    only: Option<usize>,
) -> Result<RelevanceState<T>> {
    check_trace(net, trace)?;
    rules.check(net)?;
    let n = net.layers.len();
    let mut relevances = vec![Vec::new(); n + 1];
    relevances[n] = vec![trace.output()];
    let mut leakage = T::zero();
    for i in (0..n).rev() {
        let a = &trace.activations[i];
        let r_out = &relevances[i + 1];
        let mut r_in = match (&net.layers[i], &rules.rules[i]) {
            (Layer::SoftMinPool { beta, groups, .. }, _) => pool_backward(a, groups, *beta, r_out, true),
            (Layer::SoftMaxPool { beta, groups, .. }, _) => pool_backward(a, groups, *beta, r_out, false),
            (Layer::Elementwise { .. }, _) => r_out.clone(),
            (Layer::Linear { weights, biases }, rule) => {
                let m = match rule {
                    Rule::Z => rule_z(a, weights, biases, r_out)?,
                    Rule::ZPlus => rule_z_plus(a, weights, r_out)?,
                    Rule::ZB { lower, upper } => rule_zb(a, weights, lower, upper, r_out)?,
                    Rule::Hybrid { gamma_mix } => rule_hybrid(a, weights, biases, *gamma_mix, r_out)?,
                    _ => unreachable!("checked by RuleSpec::check"),
                };
                leakage = leakage + m.leakage;
                m.relevance
            }
            (Layer::SquaredDistance { .. }, _) => unreachable!("checked by RuleSpec::check"),
        };
        if i == n - 1 {
            if let Some(keep) = only {
                r_in.iter_mut().enumerate().filter(|&(j, _)| j != keep).for_each(|(_, r)| *r = T::zero());
            }
        }
        relevances[i] = r_in;
    }
    Ok(RelevanceState {
        relevances,
        bias_leakage: leakage,
    })
}

/// Propagates `f_c` from the top of the trace down to the input features.
pub fn propagate<T: Scalar>(net: &LayeredNetwork<T>, trace: &ForwardTrace<T>, rules: &RuleSpec<T>) -> Result<RelevanceState<T>> {
    run(net, trace, rules, None)
}

/// Relevance that flows through the top-layer neuron of `competitor`
/// (a cluster index, not a position).
pub fn isolate_competitor<T: Scalar>(
    net: &LayeredNetwork<T>,
    trace: &ForwardTrace<T>,
    rules: &RuleSpec<T>,
    competitor: usize,
) -> Result<RelevanceState<T>> {
    let pos = net.competitors.iter().position(|&k| k == competitor).ok_or_else(|| {
        domain(format!(
            "cluster {competitor} is not a competitor of target {}",
            net.target_cluster
        ))
    })?;
    run(net, trace, rules, Some(pos))
}

/// Sums relevance over each group of a partition of the features.
pub fn pool_relevance<T: Scalar>(relevance: &[T], groups: &[Vec<usize>]) -> Result<Vec<T>> {
    check_partition(groups, relevance.len()).map_err(shape)?;
    Ok(groups.iter().map(|g| g.iter().map(|&j| relevance[j]).sum()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate<T> {
    pub heatmap: Vec<T>,
    /// Points whose heatmap entered the sum.
    pub used: usize,
}

/// Sums input heatmaps over `points`; with `nonneg_filter`, points with
/// `f_c < 0` are skipped.
pub fn aggregate_explanations<T: Scalar>(
    net: &LayeredNetwork<T>,
    points: &Matrix<T>,
    rules: &RuleSpec<T>,
    nonneg_filter: bool,
) -> Result<Aggregate<T>> {
    let mut heatmap = vec![T::zero(); net.input_width()];
    let mut used = 0;
    for x in points.rows_iter() {
        let trace = net.forward(x)?;
        if nonneg_filter && trace.output() < T::zero() {
            continue;
        }
        let state = propagate(net, &trace, rules)?;
        heatmap.iter_mut().zip(state.heatmap()).for_each(|(h, &r)| *h = *h + r);
        used += 1;
    }
    Ok(Aggregate { heatmap, used })
}
