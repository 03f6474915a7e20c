//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use neon_core::Stiffness;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Standard,
    Kernel,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Naive,
    Improved,
}

/// Rule for the linear layers of an explained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LinearRule {
    Z,
    ZPlus,
    Hybrid,
    /// zB on the input layer with the data's bounding box, z elsewhere.
    Zb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GammaMethod {
    SelfSimilarity,
    KnnMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Neon,
    Sa,
    Gi,
    Sr,
    Ig,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Neon => "neon",
            Self::Sa => "sa",
            Self::Gi => "gi",
            Self::Sr => "sr",
            Self::Ig => "ig",
            Self::Random => "random",
        }
    }
}

fn parse_stiffness(s: &str) -> std::result::Result<Stiffness, String> {
    let v: f64 = match s {
        "inf" | "infinity" => f64::INFINITY,
        _ => s.parse().map_err(|_| format!("not a number: {s}"))?,
    };
    Stiffness::new(v).map_err(|e| e.to_string())
}

/// Every setting a subcommand may read. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Data CSV (headered; a `label` column holds class labels).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Trained model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Neuralized network JSON; `explain` uses it instead of a model.
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model_family: Option<Family>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use class means (standard) instead of Lloyd iterations.
    #[arg(long)]
    pub from_labels: Option<bool>,
    /// Assignment stiffness β, a positive number or `inf`.
    #[arg(long, value_parser = parse_stiffness)]
    pub beta: Option<Stiffness>,
    /// Calibrate β so the mean top assignment probability hits this value.
    #[arg(long)]
    pub beta_target: Option<f64>,
    /// Kernel stiffness γ.
    #[arg(long, value_parser = parse_stiffness)]
    pub gamma: Option<Stiffness>,
    /// Calibrate γ towards this statistic.
    #[arg(long)]
    pub gamma_target: Option<f64>,
    #[arg(long, value_enum)]
    pub gamma_method: Option<GammaMethod>,
    /// Support points per class for kernel models (needs labels).
    #[arg(long)]
    pub support_per_class: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Feature-map layer widths for deep models, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub architecture: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, value_enum)]
    pub kernel_variant: Option<Variant>,
    /// Target cluster for `neuralize`.
    #[arg(long)]
    pub cluster: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<LinearRule>,
    #[arg(long)]
    pub gamma_mix: Option<f64>,
    /// Width of PGM heatmaps; defaults to the data dimension.
    #[arg(long)]
    pub image_width: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Pairs flipped per curve point; defaults to 1% of all pairs.
    #[arg(long)]
    pub flip_batch: Option<usize>,
    #[arg(long)]
    pub random_orders: Option<usize>,
    #[arg(long)]
    pub ig_steps: Option<usize>,
    #[arg(long)]
    pub n_per_cluster: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),* $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags win over file values.
    pub fn merged(mut self, flags: RunConfig) -> Self {
        // A fixed value and a calibration target exclude each other.
        if flags.beta.is_some() || flags.beta_target.is_some() {
            (self.beta, self.beta_target) = (None, None);
        }
        if flags.gamma.is_some() || flags.gamma_target.is_some() {
            (self.gamma, self.gamma_target) = (None, None);
        }
        overlay!(self, flags; input, output, model, network, model_family, k, seed, from_labels, beta, beta_target,
            gamma, gamma_target, gamma_method, support_per_class, max_iter, architecture, epochs, step,
            kernel_variant, cluster, rule, gamma_mix, image_width, methods, flip_batch, random_orders,
            ig_steps, n_per_cluster, dim, spread);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: Option<usize>| -> Result<()> {
            if v == Some(0) {
                bail!("{name} must be positive");
            }
            Ok(())
        };
        positive("k", self.k)?;
        positive("support_per_class", self.support_per_class)?;
        positive("max_iter", self.max_iter)?;
        positive("image_width", self.image_width)?;
        positive("flip_batch", self.flip_batch)?;
        positive("random_orders", self.random_orders)?;
        positive("ig_steps", self.ig_steps)?;
        positive("n_per_cluster", self.n_per_cluster)?;
        positive("dim", self.dim)?;
        if matches!(self.k, Some(1)) {
            bail!("k must be at least 2");
        }
        for (name, t) in [("beta_target", self.beta_target), ("gamma_target", self.gamma_target)] {
            if let Some(t) = t {
                if !(t > 0.0 && t < 1.0) {
                    bail!("{name} must lie in (0, 1), got {t}");
                }
            }
        }
        if self.beta.is_some() && self.beta_target.is_some() {
            bail!("give either beta or beta_target, not both");
        }
        if self.gamma.is_some() && self.gamma_target.is_some() {
            bail!("give either gamma or gamma_target, not both");
        }
        if let Some(s) = self.step {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("step must be a non-negative number");
            }
        }
        if let Some(s) = self.spread {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("spread must be a non-negative number");
            }
        }
        if let Some(g) = self.gamma_mix {
            if !(g >= 0.0 && g.is_finite()) {
                bail!("gamma_mix must be a non-negative number");
            }
        }
        if let Some(a) = &self.architecture {
            if a.is_empty() || a.contains(&0) {
                bail!("architecture needs non-empty layers");
            }
        }
        if let Some(m) = &self.methods {
            if m.is_empty() {
                bail!("methods must not be empty");
            }
        }
        Ok(())
    }

    pub fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field.as_ref().with_context(|| format!("missing setting `{name}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"k": 3, "betta": 2}"#).unwrap_err();
        assert!(err.to_string().contains("betta"));
    }

    #[test]
    fn flags_win() {
        let file: RunConfig = serde_json::from_str(r#"{"k": 3, "seed": 1, "beta": "inf"}"#).unwrap();
        assert!(file.beta.unwrap().is_infinite());
        let flags = RunConfig { k: Some(5), ..Default::default() };
        let m = file.merged(flags);
        assert_eq!((m.k, m.seed), (Some(5), Some(1)));
        let flags = RunConfig { beta_target: Some(0.8), ..Default::default() };
        let m = m.merged(flags);
        assert!(m.beta.is_none() && m.validate().is_ok());
    }

    #[test]
    fn validation() {
        let bad = |s: &str| serde_json::from_str::<RunConfig>(s).unwrap().validate().is_err();
        assert!(bad(r#"{"k": 1}"#));
        assert!(bad(r#"{"beta_target": 1.5}"#));
        assert!(bad(r#"{"beta": 2.0, "beta_target": 0.9}"#));
        assert!(bad(r#"{"architecture": []}"#));
        assert!(!bad(r#"{"k": 3, "methods": ["neon", "random"], "rule": "z_plus"}"#));
    }

    #[test]
    fn stiffness_flag() {
        assert!(parse_stiffness("inf").unwrap().is_infinite());
        assert_eq!(parse_stiffness("2.5").unwrap().value(), Some(2.5));
        assert!(parse_stiffness("-1").is_err());
    }
}
