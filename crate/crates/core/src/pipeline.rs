//! End-to-end runs: configuration, presets and the command implementations
//! behind the `semst` binary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cluster::{evaluate, kmeans, write_metrics, F1Average, KMeansConfig, MetricReport};
use crate::error::{Error, Result, StageExt};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{build_feature_graph, build_spatial_graph, neighbor_sets, normalize_adjacency};
use crate::ingest::{
    load_dataset, log1p_transform, normalize_counts, read_pairs, select_hvg, write_coords, write_pairs,
    DatasetPaths, ExpressionFormat, SpotDataset,
};
use crate::losses::{write_loss_log, LossBreakdown, NegativeMode};
use crate::model::{forward, FusionMode, ModelInputs, ModelParams, ModelShape};
use crate::semantics::{
    build_prompts, default_cache_dir, embed_spots, standardize_columns, write_embeddings, EmbeddingProvider,
    FileEmbeddingProvider, HashEmbeddingProvider, HttpConfig, HttpEmbeddingProvider, NullProvider, SemanticEmbeddings,
    SpotPrompt,
};
use crate::synth::{generate, write_synth, SynthConfig, SynthFiles};
use crate::tensor::{AdamConfig, Matrix};
use crate::train::{train, TrainConfig};

/// Environment variable sizing the worker pool.
pub const THREADS_ENV: &str = "SEMST_THREADS";

/// Hyperparameter sets for the reference tissue types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Dlpfc,
    Hbc,
    Mba,
    Me,
    Mvc,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown preset `{s}` (dlpfc, hbc, mba, me, mvc)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    Http,
    #[default]
    Hash,
    Null,
}

/// Model variants compared against the full method. At most one applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Zero embeddings in place of the semantic input.
    #[serde(rename = "w/o-llm")]
    WithoutLlm,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "cross-attention")]
    CrossAttention,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "wo-llm" || s == "without-llm" { "w/o-llm" } else { s };
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown ablation `{s}` (none, w/o-llm, concat, add, cross-attention)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZinbTarget {
    #[default]
    Normalized,
    Raw,
}

/// Every setting of a run, serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub expression: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub genes: Option<PathBuf>,
    pub spots: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub format: ExpressionFormat,
    pub preset: Option<Preset>,
    /// Highly variable genes kept; `None` keeps all.
    pub hvg: Option<usize>,
    pub log1p: bool,
    pub r: f64,
    pub k_n: usize,
    pub k_g: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub d: usize,
    pub gcn_hidden: usize,
    pub fsm_hidden: usize,
    pub dec_hidden: usize,
    pub final_bias: bool,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Defaults to the number of distinct truth labels.
    pub k_clusters: Option<usize>,
    pub kmeans_restarts: usize,
    pub provider: ProviderKind,
    pub embeddings: Option<PathBuf>,
    /// Spot-id list when `embeddings` is a bare matrix.
    pub embedding_ids: Option<PathBuf>,
    pub http_endpoint: String,
    pub http_model: String,
    pub http_batch_size: usize,
    pub http_max_retries: u32,
    pub http_cache: Option<PathBuf>,
    /// Width of hash and null embeddings.
    pub emb_dim: usize,
    pub standardize_embeddings: bool,
    pub ablation: Ablation,
    pub zinb_target: ZinbTarget,
    pub negatives: NegativeMode,
    pub f1_average: F1Average,
}

impl Default for RunConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        RunConfig {
            expression: None,
            coords: None,
            genes: None,
            spots: None,
            labels: None,
            format: ExpressionFormat::DenseCsv,
            preset: None,
            hvg: Some(3000),
            log1p: false,
            r: 560.0,
            k_n: 14,
            k_g: 20,
            gamma: 0.1,
            lambda: 0.1,
            d: 64,
            gcn_hidden: 128,
            fsm_hidden: 256,
            dec_hidden: 128,
            final_bias: true,
            epochs: 600,
            lr: 1e-3,
            weight_decay: 5e-4,
            seed: 100,
            k_clusters: None,
            kmeans_restarts: 10,
            provider: ProviderKind::Hash,
            embeddings: None,
            embedding_ids: None,
            http_endpoint: http.endpoint,
            http_model: http.model,
            http_batch_size: http.batch_size,
            http_max_retries: http.max_retries,
            http_cache: None,
            emb_dim: 256,
            standardize_embeddings: true,
            ablation: Ablation::None,
            zinb_target: ZinbTarget::Normalized,
            negatives: NegativeMode::Sampled,
            f1_average: F1Average::Weighted,
        }
    }
}

impl RunConfig {
    /// Sets `r, k_n, k_g, γ, λ` (and the gene count for MVC) from the preset table.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        let (r, k_n, k_g, gamma, lambda) = match preset {
            Preset::Dlpfc => (560.0, 14, 20, 0.1, 0.1),
            Preset::Hbc | Preset::Mba => (15.0, 14, 20, 0.1, 0.1),
            Preset::Me | Preset::Mvc => (15.0, 15, 30, 1.0, 1.0),
        };
        self.preset = Some(preset);
        self.r = r;
        self.k_n = k_n;
        self.k_g = k_g;
        self.gamma = gamma;
        self.lambda = lambda;
        self.hvg = Some(if preset == Preset::Mvc { 128 } else { 3000 });
        self
    }

    /// Builds a config from flat JSON. A `preset` key is applied first, then
    /// every other key overrides it.
    pub fn from_json(value: Value) -> Result<Self> {
        let Value::Object(map) = value else {
            return Err(Error::Config("run configuration must be a JSON object".into()));
        };
        let base = match map.get("preset") {
            Some(Value::Null) | None => RunConfig::default(),
            Some(p) => {
                let preset: Preset =
                    serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?;
                RunConfig::default().with_preset(preset)
            }
        };
        base.overlay(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(value)
    }

    /// Replaces the listed keys.
    pub fn overlay(&self, overrides: serde_json::Map<String, Value>) -> Result<Self> {
        let mut merged = serde_json::to_value(self).expect("config serializes");
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to a string.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut map = serde_json::Map::new();
        let mut out = self.clone();
        for (k, v) in pairs {
            if k == "preset" {
                out = out.with_preset(v.parse()?);
                continue;
            }
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
            map.insert(k.clone(), value);
        }
        out.overlay(map)
    }

    pub fn fusion(&self) -> FusionMode {
        match self.ablation {
            Ablation::Concat => FusionMode::Concat,
            Ablation::Add => FusionMode::Add,
            Ablation::CrossAttention => FusionMode::CrossAttention,
            Ablation::None | Ablation::WithoutLlm => FusionMode::Fsm,
        }
    }

    pub fn effective_provider(&self) -> ProviderKind {
        if self.ablation == Ablation::WithoutLlm {
            ProviderKind::Null
        } else {
            self.provider
        }
    }

    pub fn dataset_paths(&self) -> Result<DatasetPaths> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("`{key}` path is required")))
        };
        Ok(DatasetPaths {
            expression: need(&self.expression, "expression")?,
            coords: need(&self.coords, "coords")?,
            genes: self.genes.clone(),
            spots: self.spots.clone(),
            labels: self.labels.clone(),
            format: self.format,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            gamma: self.gamma,
            lambda: self.lambda,
            seed: self.seed,
            negatives: self.negatives,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad("r must be positive");
        }
        if self.k_n == 0 || self.k_g == 0 {
            return bad("k_n and k_g must be positive");
        }
        if !(self.gamma >= 0.0 && self.lambda >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.epochs == 0 || self.kmeans_restarts == 0 {
            return bad("epochs and kmeans_restarts must be positive");
        }
        if self.hvg == Some(0) || self.k_clusters == Some(0) {
            return bad("hvg and k_clusters must be positive when set");
        }
        if self.effective_provider() == ProviderKind::File && self.embeddings.is_none() {
            return bad("the file provider needs `embeddings`");
        }
        Ok(())
    }
}

/// Reads `SEMST_THREADS` and sizes the global worker pool; returns the thread count in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("worker pool already initialized; {THREADS_ENV} ignored");
        }
    }
    Ok(rayon::current_num_threads())
}

/// Data and graphs ready for training.
pub struct Prepared {
    pub dataset: SpotDataset,
    pub a_spa: Arc<crate::tensor::Csr>,
    pub a_fea: Arc<crate::tensor::Csr>,
    pub neighbors: Vec<Vec<usize>>,
    pub prompts: Vec<SpotPrompt>,
}

/// Loads, filters and normalizes the dataset, then builds both graphs.
pub fn prepare_dataset(config: &RunConfig, dataset: SpotDataset) -> Result<Prepared> {
    let mut ds = dataset;
    if let Some(g) = config.hvg {
        if g < ds.n_genes() {
            ds = select_hvg(&ds, g).stage("ingest")?;
        } else if g > ds.n_genes() {
            info!("keeping all {} genes (fewer than hvg = {g})", ds.n_genes());
        }
    }
    ds = normalize_counts(&ds).stage("ingest")?;
    if config.log1p {
        ds = log1p_transform(&ds).stage("ingest")?;
    }
    let x = ds.normalized()?;
    let spatial = build_spatial_graph(&ds.coords, config.r).stage("graph")?;
    let feature = build_feature_graph(x, config.k_n).stage("graph")?;
    let neighbors = neighbor_sets(&spatial);
    let isolated = neighbors.iter().filter(|s| s.is_empty()).count();
    if isolated > 0 {
        warn!("{isolated} spots have no spatial neighbour within r = {}", config.r);
    }
    let a_spa = Arc::new(normalize_adjacency(&spatial).stage("graph")?.to_csr());
    let a_fea = Arc::new(normalize_adjacency(&feature).stage("graph")?.to_csr());
    let prompts = build_prompts(&ds, config.k_g).stage("semantics")?;
    Ok(Prepared {
        dataset: ds,
        a_spa,
        a_fea,
        neighbors,
        prompts,
    })
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(&config.dataset_paths()?).stage("ingest")?;
    prepare_dataset(config, ds)
}

pub fn make_provider(config: &RunConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match config.effective_provider() {
        ProviderKind::File => {
            let path = config
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("the file provider needs `embeddings`".into()))?;
            match &config.embedding_ids {
                Some(ids) => Box::new(FileEmbeddingProvider::open_parts(ids, path)?),
                None => Box::new(FileEmbeddingProvider::open(path)?),
            }
        }
        ProviderKind::Http => {
            let http = HttpConfig {
                endpoint: config.http_endpoint.clone(),
                model: config.http_model.clone(),
                batch_size: config.http_batch_size,
                max_retries: config.http_max_retries,
                ..HttpConfig::default()
            };
            let cache = config.http_cache.clone().unwrap_or_else(default_cache_dir);
            Box::new(HttpEmbeddingProvider::new(http, cache)?)
        }
        ProviderKind::Hash => Box::new(HashEmbeddingProvider {
            d_prime: config.emb_dim,
            seed: config.seed,
        }),
        ProviderKind::Null => Box::new(NullProvider { d_prime: config.emb_dim }),
    })
}

/// Raw provider output for every prompt.
pub fn obtain_embeddings(config: &RunConfig, prompts: &[SpotPrompt]) -> Result<SemanticEmbeddings> {
    let provider = make_provider(config).stage("semantics")?;
    embed_spots(provider.as_ref(), prompts).stage("semantics")
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub spot_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub metrics: Option<MetricReport>,
    pub losses: Vec<(usize, LossBreakdown)>,
    pub z_final: Matrix,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    resolved_fusion: String,
    resolved_provider: ProviderKind,
    embedding_source: String,
    n_spots: usize,
    n_genes: usize,
}

/// Trains on prepared inputs and writes every run artifact into `run_dir`.
/// Under the null provider the supplied embeddings only fix the width.
pub fn run_prepared(config: &RunConfig, prepared: &Prepared, embeddings: &SemanticEmbeddings, run_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ds = &prepared.dataset;
    let emb = if config.effective_provider() == ProviderKind::Null {
        SemanticEmbeddings {
            matrix: Matrix::zeros(ds.n_spots(), embeddings.d_prime()),
            spot_ids: ds.spot_ids.clone(),
            provider_tag: NullProvider { d_prime: embeddings.d_prime() }.tag(),
        }
    } else {
        embeddings.aligned_to(&ds.spot_ids).stage("semantics")?
    };
    let h_llm = if config.standardize_embeddings {
        standardize_columns(&emb.matrix)
    } else {
        emb.matrix.clone()
    };
    let k = match (config.k_clusters, &ds.truth_labels) {
        (Some(k), _) => k,
        (None, Some(truth)) => {
            let mut distinct = truth.clone();
            distinct.sort();
            distinct.dedup();
            distinct.len()
        }
        (None, None) => return Err(Error::Config("k_clusters is required without truth labels".into())),
    };

    let snapshot = Snapshot {
        config,
        resolved_fusion: config.fusion().to_string(),
        resolved_provider: config.effective_provider(),
        embedding_source: emb.provider_tag.clone(),
        n_spots: ds.n_spots(),
        n_genes: ds.n_genes(),
    };
    let snapshot_path = run_dir.join("config.json");
    let json = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    std::fs::write(&snapshot_path, json + "\n").map_err(|e| Error::io(&snapshot_path, e))?;

    let x = ds.normalized()?;
    let inputs = ModelInputs::new(x, Arc::clone(&prepared.a_spa), Arc::clone(&prepared.a_fea), h_llm).stage("train")?;
    let target = Arc::new(match config.zinb_target {
        ZinbTarget::Normalized => x.clone(),
        ZinbTarget::Raw => ds.counts.clone(),
    });
    let shape = ModelShape {
        genes: ds.n_genes(),
        d: config.d,
        d_prime: emb.d_prime(),
        gcn_hidden: config.gcn_hidden,
        fsm_hidden: config.fsm_hidden,
        dec_hidden: config.dec_hidden,
        final_bias: config.final_bias,
        fusion: config.fusion(),
    };
    let params = ModelParams::init(shape, config.seed).stage("train")?;
    let every = (config.epochs / 10).max(1);
    let outcome = train(&inputs, &target, &prepared.neighbors, params, &config.train_config(), |epoch, b| {
        if epoch == 1 || epoch % every == 0 {
            info!(
                "epoch {epoch}: total {:.4} (zinb {:.4}, cr {:.4}, spatial {:.4})",
                b.total, b.zinb, b.cr, b.spatial
            );
        }
    });
    write_loss_log(&run_dir.join("loss_log.csv"), &outcome.log).stage("output")?;
    outcome.params.save(&run_dir.join("checkpoint.semp")).stage("output")?;
    if let Some(e) = outcome.failure {
        return Err(e.in_stage("train"));
    }

    let z_final = forward(&inputs, &outcome.params).stage("train")?.z_final;
    let kconfig = KMeansConfig {
        restarts: config.kmeans_restarts,
        ..KMeansConfig::new(k, config.seed)
    };
    let clustering = kmeans(&z_final, &kconfig).stage("cluster")?;
    write_pairs(&run_dir.join("labels.csv"), "cluster", &ds.spot_ids, &clustering.labels).stage("output")?;
    write_coords(ds, &run_dir.join("coords.csv")).stage("output")?;
    let metrics = match &ds.truth_labels {
        Some(truth) => {
            let report = evaluate(truth, &clustering.labels, config.f1_average).stage("eval")?;
            write_metrics(&run_dir.join("metrics.csv"), &report).stage("output")?;
            let [a, n, c, f] = report.scaled();
            info!("ARI {a:.2}  NMI {n:.2}  ACC {c:.2}  F1 {f:.2}");
            Some(report)
        }
        None => None,
    };
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        spot_ids: ds.spot_ids.clone(),
        labels: clustering.labels,
        metrics,
        losses: outcome.log,
        z_final,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Ingest, graphs, embeddings, training, clustering and evaluation.
pub fn cmd_run(config: &RunConfig, run_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let prepared = prepare(config)?;
    let embeddings = obtain_embeddings(config, &prepared.prompts)?;
    run_prepared(config, &prepared, &embeddings, run_dir)
}

/// Materializes the provider's embeddings for later file-provider runs.
pub fn cmd_embed(config: &RunConfig, out: &Path) -> Result<SemanticEmbeddings> {
    let prepared = prepare(config)?;
    let embeddings = obtain_embeddings(config, &prepared.prompts)?;
    write_embeddings(&embeddings, out).stage("output")?;
    Ok(embeddings)
}

pub fn cmd_synth(config: &SynthConfig, dir: &Path) -> Result<SynthFiles> {
    let data = generate(config).stage("synth")?;
    write_synth(&data, config, dir).stage("output")
}

/// Scores a `spot_id,cluster` file against a `spot_id,label` file. A first
/// row is a header when its id is `spot_id` or absent from the other file.
pub fn cmd_eval(pred: &Path, truth: &Path, average: F1Average) -> Result<MetricReport> {
    let mut truth_pairs = read_pairs(truth).stage("eval")?;
    let mut pairs = read_pairs(pred).stage("eval")?;
    let is_header = |row: Option<&(String, String)>, other: &[(String, String)]| {
        row.is_some_and(|(id, _)| id.eq_ignore_ascii_case("spot_id") || !other.iter().any(|(o, _)| o == id))
    };
    let (truth_header, pred_header) = (is_header(truth_pairs.first(), &pairs), is_header(pairs.first(), &truth_pairs));
    if truth_header {
        truth_pairs.remove(0);
    }
    if pred_header {
        pairs.remove(0);
    }
    let known: HashMap<&str, &str> = truth_pairs.iter().map(|(id, l)| (id.as_str(), l.as_str())).collect();
    let mut labels = Vec::with_capacity(pairs.len());
    for (id, _) in &pairs {
        let label = known
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("spot `{id}` has no truth label in {}", truth.display())))
            .stage("eval")?;
        labels.push(*label);
    }
    let predicted: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    evaluate(&labels, &predicted, average).stage("eval")
}

pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    run_gradcheck(seed, &GradcheckConfig::default()).stage("gradcheck")
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78",
];

/// Renders `coords.csv` coloured by `labels.csv` from a run directory as `domains.svg`.
pub fn cmd_plot(run_dir: &Path) -> Result<PathBuf> {
    let labels = read_pairs(&run_dir.join("labels.csv")).stage("plot")?;
    let coords = read_pairs_xy(&run_dir.join("coords.csv")).stage("plot")?;
    let cluster_of: HashMap<&str, &str> = labels.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut names: Vec<&str> = cluster_of.values().copied().filter(|c| *c != "cluster").collect();
    names.sort_by_key(|c| (c.parse::<i64>().unwrap_or(i64::MAX), c.to_string()));
    names.dedup();
    let colour: HashMap<&str, &str> = names.iter().enumerate().map(|(i, c)| (*c, PALETTE[i % PALETTE.len()])).collect();

    let (min_x, max_x) = coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (min_y, max_y) = coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.2), hi.max(p.2)));
    let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let size = 600.0;
    let margin = 20.0;
    let scale = (size - 2.0 * margin) / span;
    let radius = (scale * span / (coords.len() as f64).sqrt() / 2.2).clamp(1.0, 12.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (id, x, y) in &coords {
        let c = cluster_of.get(id.as_str()).and_then(|c| colour.get(c)).copied().unwrap_or("#000000");
        let cx = margin + (x - min_x) * scale;
        // image y grows downward
        let cy = size - margin - (y - min_y) * scale;
        let _ = writeln!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{radius:.2}" fill="{c}"><title>{id}</title></circle>"#);
    }
    svg.push_str("</svg>\n");
    let out = run_dir.join("domains.svg");
    std::fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn read_pairs_xy(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        match (fields[1].trim().parse::<f64>(), fields[2].trim().parse::<f64>()) {
            (Ok(x), Ok(y)) => out.push((fields[0].to_string(), x, y)),
            _ if row == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    row: row + 1,
                    col: 2,
                    message: "coordinates must be numbers".into(),
                })
            }
        }
    }
    Ok(out)
}
