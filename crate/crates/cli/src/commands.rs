//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use neon_core::baselines::{explain_gi, explain_ig, explain_sa, explain_sr, find_root, RootOptions};
use neon_core::evaluation::{
    calibrate_beta, calibrate_gamma_knn_mass, calibrate_gamma_self_similarity, pixel_flip, purity, random_flip_curve,
    FlipSetup,
};
use neon_core::export::heatmap_pgm;
use neon_core::models::{
    centroids_from_labels, make_blobs, one_hot_centroids, reduce_support, train_deep, train_kernel_em, train_standard,
    Activation, DeepTrainOptions, KernelEmOptions,
};
use neon_core::neuralize::{neuralize, KernelVariant};
use neon_core::propagate::propagate;
use neon_core::{ClusterModel, Dataset, FlipCurve, KernelModel, Matrix, Network, RootPoint, Rule, RuleSpec, Stiffness};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Family, GammaMethod, LinearRule, Method, RunConfig, Variant};
use crate::io::{curves_csv, dataset_csv, ingest_csv, write_atomic};

const DEFAULT_BETA_TARGET: f64 = 0.9;
const DEFAULT_GAMMA_TARGET: f64 = 0.9;
const CALIBRATION_TOL: f64 = 1e-4;
const DEFAULT_GAMMA_MIX: f64 = 0.25;
const KNN_NEIGHBOURS: usize = 10;

fn require<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    RunConfig::require(v, name)
}

fn output(cfg: &RunConfig) -> Result<&PathBuf> {
    require(&cfg.output, "output")
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = require(&cfg.input, "input")?;
    let data = ingest_csv(path)?;
    eprintln!("read {} rows of dimension {} from {}", data.len(), data.dim(), path.display());
    Ok(data)
}

fn load_model(cfg: &RunConfig) -> Result<ClusterModel> {
    let path = require(&cfg.model, "model")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ClusterModel::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Network::from_json(&text).with_context(|| format!("loading network {}", path.display()))
}

fn check_dim(model_dim: usize, data: &Dataset) -> Result<()> {
    ensure!(
        model_dim == data.dim(),
        "data has dimension {} but the model expects {model_dim}",
        data.dim()
    );
    Ok(())
}

fn resolve_beta(cfg: &RunConfig, model: &ClusterModel, data: Option<&Dataset>) -> Result<Stiffness> {
    if let Some(b) = cfg.beta {
        return Ok(b);
    }
    let target = cfg.beta_target.unwrap_or(DEFAULT_BETA_TARGET);
    let data = data.context("calibrating beta needs `input` data (or give `beta`)")?;
    let beta = calibrate_beta(model, data, target, CALIBRATION_TOL)?;
    eprintln!("calibrated beta = {:?}", beta.value());
    Ok(beta)
}

fn variant(cfg: &RunConfig) -> KernelVariant {
    match cfg.kernel_variant {
        Some(Variant::Naive) => KernelVariant::Naive,
        _ => KernelVariant::Improved,
    }
}

/// Per-feature bounding box of the data.
fn bounds(points: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = points.ncols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in points.rows_iter() {
        for j in 0..d {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    (lo, hi)
}

fn rule_spec(cfg: &RunConfig, net: &Network, points: &Matrix) -> Result<RuleSpec> {
    let spec = match cfg.rule.unwrap_or(LinearRule::Z) {
        LinearRule::Z => RuleSpec::uniform_linear(net, Rule::Z),
        LinearRule::ZPlus => RuleSpec::uniform_linear(net, Rule::ZPlus),
        LinearRule::Hybrid => RuleSpec::uniform_linear(
            net,
            Rule::Hybrid {
                gamma_mix: cfg.gamma_mix.unwrap_or(DEFAULT_GAMMA_MIX),
            },
        ),
        LinearRule::Zb => RuleSpec::default_for(net, Some(bounds(points))),
    };
    spec.check(net)?;
    Ok(spec)
}

/// One network per cluster, built for assigned points only.
fn networks(model: &ClusterModel, beta: Stiffness, variant: KernelVariant) -> Result<Vec<Network>> {
    (0..model.n_clusters())
        .map(|c| Ok(neuralize(model, c, beta, variant)?))
        .collect()
}

pub fn blobs(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?;
    let data: Dataset = make_blobs(
        cfg.n_per_cluster.unwrap_or(50),
        cfg.k.unwrap_or(3),
        cfg.dim.unwrap_or(2),
        cfg.spread.unwrap_or(1.0),
        cfg.seed.unwrap_or(0),
    )?;
    write_atomic(out, &dataset_csv(&data)?)
}

fn calibrated_gamma(cfg: &RunConfig, data: &Dataset, support: &Matrix) -> Result<Stiffness> {
    if let Some(g) = cfg.gamma {
        return Ok(g);
    }
    let target = cfg.gamma_target.unwrap_or(DEFAULT_GAMMA_TARGET);
    let g = match cfg.gamma_method.unwrap_or(GammaMethod::SelfSimilarity) {
        GammaMethod::SelfSimilarity => calibrate_gamma_self_similarity(support, target)?,
        GammaMethod::KnnMass => {
            ensure!(data.len() > KNN_NEIGHBOURS, "knn calibration needs more than {KNN_NEIGHBOURS} points");
            calibrate_gamma_knn_mass(data, KNN_NEIGHBOURS, target)?
        }
    };
    eprintln!("calibrated gamma = {:?}", g.value());
    Ok(g)
}

pub fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<ClusterModel> {
    let seed = cfg.seed.unwrap_or(0);
    let k = match (cfg.k, data.n_classes()) {
        (Some(k), _) => k,
        (None, Some(k)) => k,
        (None, None) => bail!("missing setting `k` (no label column to infer it from)"),
    };
    ensure!(k >= 2 && k <= data.len(), "k = {k} needs between 2 and {} points", data.len());
    let family = cfg.model_family.unwrap_or(Family::Standard);
    let model = match family {
        Family::Standard => {
            if cfg.from_labels.unwrap_or(false) {
                ClusterModel::Standard(centroids_from_labels(data)?)
            } else {
                ClusterModel::Standard(train_standard(data, k, seed)?.model)
            }
        }
        Family::Kernel => {
            if let Some(per_class) = cfg.support_per_class {
                let support = reduce_support(data, per_class, seed)?;
                let gamma = calibrated_gamma(cfg, data, support.points())?;
                let labels = support.labels().context("support has no labels")?.to_vec();
                let n = support.n_classes().unwrap_or(k);
                ClusterModel::Kernel(KernelModel::new(support.points().clone(), labels, n, gamma)?)
            } else {
                let gamma = calibrated_gamma(cfg, data, data.points())?;
                let init = train_standard(data, k, seed)?.assignments;
                let fit = train_kernel_em(data, k, &init, &KernelEmOptions::new(gamma, cfg.max_iter.unwrap_or(100)))?;
                eprintln!("kernel EM: {} sweeps, converged = {}", fit.iterations, fit.converged);
                ClusterModel::Kernel(fit.model)
            }
        }
        Family::Deep => {
            let architecture = cfg.architecture.clone().unwrap_or_else(|| vec![8, k]);
            let width = *architecture.last().unwrap();
            let labeled = match data.labels() {
                Some(_) => data.clone(),
                None => Dataset::new(data.points().clone(), Some(train_standard(data, k, seed)?.assignments))?,
            };
            let opts = DeepTrainOptions {
                architecture,
                activation: Activation::ModifiedRelu,
                epochs: cfg.epochs.unwrap_or(200),
                step: cfg.step.unwrap_or(1e-2),
                seed,
            };
            let fit = train_deep(&labeled, one_hot_centroids(k, width, 1.0)?, &opts)?;
            if let (Some(a), Some(b)) = (fit.loss_history.first(), fit.loss_history.last()) {
                eprintln!("deep loss {a:.6} -> {b:.6}");
            }
            ClusterModel::Deep(fit.model)
        }
    };
    Ok(model)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?;
    let data = load_data(cfg)?;
    let model = train_model(cfg, &data)?;
    write_atomic(out, model.to_json()?.as_bytes())
}

pub fn neuralize_cmd(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?;
    let c = *require(&cfg.cluster, "cluster")?;
    let model = load_model(cfg)?;
    ensure!(c < model.n_clusters(), "cluster {c} out of range for {} clusters", model.n_clusters());
    let data = match &cfg.input {
        Some(_) => Some(load_data(cfg)?),
        None => None,
    };
    if let Some(d) = &data {
        check_dim(model.dim(), d)?;
    }
    let beta = resolve_beta(cfg, &model, data.as_ref())?;
    let net = neuralize(&model, c, beta, variant(cfg))?;
    write_atomic(out, net.to_json()?.as_bytes())
}

/// Networks explaining each point: its assigned cluster's network, or the
/// given network for every point.
struct Explainer {
    nets: Vec<Network>,
    which: Vec<usize>,
}

impl Explainer {
    fn from_config(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        if let Some(path) = &cfg.network {
            let net = load_network(path)?;
            ensure!(
                net.input_width() == data.dim(),
                "data has dimension {} but the network expects {}",
                data.dim(),
                net.input_width()
            );
            return Ok(Self {
                nets: vec![net],
                which: vec![0; data.len()],
            });
        }
        let model = load_model(cfg)?;
        check_dim(model.dim(), data)?;
        let beta = resolve_beta(cfg, &model, Some(data))?;
        let nets = networks(&model, beta, variant(cfg))?;
        let which = model.assign_all(data)?;
        Ok(Self { nets, which })
    }

    fn net(&self, i: usize) -> &Network {
        &self.nets[self.which[i]]
    }

    fn refs(&self) -> Vec<&Network> {
        (0..self.which.len()).map(|i| self.net(i)).collect()
    }
}

struct PointExplanation {
    cluster: usize,
    f: f64,
    heatmap: Vec<f64>,
    leakage: f64,
}

fn explain_points(ex: &Explainer, specs: &[RuleSpec], data: &Dataset) -> Result<Vec<PointExplanation>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let net = ex.net(i);
            let trace = net.forward(data.point(i))?;
            let state = propagate(net, &trace, &specs[ex.which[i]])?;
            Ok(PointExplanation {
                cluster: net.target_cluster,
                f: trace.output(),
                heatmap: state.heatmap().to_vec(),
                leakage: state.bias_leakage,
            })
        })
        .collect()
}

fn image_shape(cfg: &RunConfig, dim: usize) -> Result<(usize, usize)> {
    let w = cfg.image_width.unwrap_or(dim);
    ensure!(dim.is_multiple_of(w), "image_width {w} does not divide the dimension {dim}");
    Ok((w, dim / w))
}

pub fn explain(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?.clone();
    let data = load_data(cfg)?;
    let (w, h) = image_shape(cfg, data.dim())?;
    let ex = Explainer::from_config(cfg, &data)?;
    let specs = ex
        .nets
        .iter()
        .map(|n| rule_spec(cfg, n, data.points()))
        .collect::<Result<Vec<_>>>()?;
    let results = explain_points(&ex, &specs, &data)?;

    let points: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(i, r)| json!({"index": i, "cluster": r.cluster, "f": r.f, "heatmap": r.heatmap}))
        .collect();
    write_atomic(&out.join("heatmaps.json"), serde_json::to_string_pretty(&points)?.as_bytes())?;

    let mut report = csv::Writer::from_writer(Vec::new());
    report.write_record(["index", "cluster", "f_c", "sum_r", "leakage", "residual"])?;
    let mut worst = 0.0f64;
    for (i, r) in results.iter().enumerate() {
        let sum: f64 = r.heatmap.iter().sum();
        let residual = r.f - sum - r.leakage;
        worst = worst.max(residual.abs());
        report.write_record([
            i.to_string(),
            r.cluster.to_string(),
            r.f.to_string(),
            sum.to_string(),
            r.leakage.to_string(),
            residual.to_string(),
        ])?;
    }
    let report = report.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    write_atomic(&out.join("conservation.csv"), &report)?;
    for (i, r) in results.iter().enumerate() {
        write_atomic(&out.join(format!("point_{i}.pgm")), heatmap_pgm(&r.heatmap, w, h)?.as_bytes())?;
    }
    println!("explained {} points; max |f - sum R - leakage| = {worst:e}", results.len());
    Ok(())
}

fn roots(ex: &Explainer, data: &Dataset) -> Result<Vec<RootPoint>> {
    let opts = RootOptions::default();
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            find_root(ex.net(i), data.point(i), &opts).with_context(|| format!("root search for point {i}"))
        })
        .collect()
}

fn baseline_heatmaps(
    method: Method,
    cfg: &RunConfig,
    ex: &Explainer,
    data: &Dataset,
    roots: &[RootPoint],
) -> Result<Vec<Vec<f64>>> {
    let steps = cfg.ig_steps.unwrap_or(64);
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (net, x) = (ex.net(i), data.point(i));
            Ok(match method {
                Method::Sa => explain_sa(net, x)?,
                Method::Gi => explain_gi(net, x)?,
                Method::Sr if roots[i].point == x => vec![0.0; x.len()],
                Method::Sr => explain_sr(net, x, &roots[i])?,
                Method::Ig => explain_ig(net, x, &roots[i], steps)?.heatmap,
                Method::Neon | Method::Random => bail!("`{}` is not a baseline", method.name()),
            })
        })
        .collect()
}

fn needs_roots(methods: &[Method]) -> bool {
    methods.iter().any(|m| matches!(m, Method::Sr | Method::Ig))
}

pub fn baseline(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?;
    let methods = cfg
        .methods
        .clone()
        .unwrap_or_else(|| vec![Method::Sa, Method::Gi, Method::Sr, Method::Ig]);
    if let Some(m) = methods.iter().find(|m| matches!(m, Method::Neon | Method::Random)) {
        bail!("`{}` is not a baseline; use `explain` or `flip`", m.name());
    }
    let data = load_data(cfg)?;
    let ex = Explainer::from_config(cfg, &data)?;
    let roots = if needs_roots(&methods) { roots(&ex, &data)? } else { Vec::new() };
    let mut doc = serde_json::Map::new();
    for m in methods {
        doc.insert(m.name().into(), json!(baseline_heatmaps(m, cfg, &ex, &data, &roots)?));
    }
    write_atomic(out, serde_json::to_string_pretty(&doc)?.as_bytes())
}

pub fn flip(cfg: &RunConfig) -> Result<()> {
    let out = output(cfg)?;
    let methods = cfg.methods.clone().unwrap_or_else(|| vec![Method::Neon, Method::Random]);
    let data = load_data(cfg)?;
    let ex = Explainer::from_config(cfg, &data)?;
    let roots = roots(&ex, &data)?;
    let root_rows: Vec<Vec<f64>> = roots.iter().map(|r| r.point.clone()).collect();
    let root_matrix = Matrix::from_rows(&root_rows)?;
    let refs = ex.refs();
    let setup = FlipSetup {
        nets: &refs,
        points: data.points(),
        roots: &root_matrix,
        batch: cfg.flip_batch.unwrap_or_else(|| FlipSetup::default_batch(data.points())),
    };
    let mut curves: Vec<FlipCurve> = Vec::new();
    for m in methods {
        let curve = match m {
            Method::Random => random_flip_curve(&setup, cfg.random_orders.unwrap_or(20), cfg.seed.unwrap_or(0))?,
            Method::Neon => {
                let specs = ex
                    .nets
                    .iter()
                    .map(|n| rule_spec(cfg, n, data.points()))
                    .collect::<Result<Vec<_>>>()?;
                let rows: Vec<Vec<f64>> = explain_points(&ex, &specs, &data)?.into_iter().map(|r| r.heatmap).collect();
                pixel_flip(&setup, &Matrix::from_rows(&rows)?, m.name())?
            }
            _ => {
                let rows = baseline_heatmaps(m, cfg, &ex, &data, &roots)?;
                pixel_flip(&setup, &Matrix::from_rows(&rows)?, m.name())?
            }
        };
        println!("{}: area {:.6}", curve.method, curve.area());
        curves.push(curve);
    }
    write_atomic(out, &curves_csv(&curves)?)
}

pub fn purity_cmd(cfg: &RunConfig) -> Result<f64> {
    let data = load_data(cfg)?;
    let labels = data.labels().context("purity needs a `label` column")?;
    let model = load_model(cfg)?;
    check_dim(model.dim(), &data)?;
    let predicted = model.assign_all(&data)?;
    Ok(purity(&predicted, labels)?)
}
