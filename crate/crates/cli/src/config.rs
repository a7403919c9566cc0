//! Experiment and adapter configuration files.
//!
//! Both are JSON. Relative paths inside a config resolve against the config
//! file's directory; an adapter's `checkpoint_path` additionally resolves
//! against `$XFRN_CACHE` when set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use xfrn_core::corpus::{ParallelCorpus, QaDataset};
use xfrn_core::detector::DistanceKind;
use xfrn_core::model::{build_fixture, FixtureSpec, GatedDecoder, PlantedFixture};
use xfrn_core::{Error, Result};

pub const CACHE_ENV: &str = "XFRN_CACHE";

fn default_sample_count() -> usize {
    160
}
fn default_top_n() -> usize {
    8
}
fn default_knn_k() -> usize {
    5
}
fn default_cevr_thresholds() -> Vec<f64> {
    vec![0.90, 0.95, 0.99]
}
fn default_eta_thresholds() -> Vec<f64> {
    vec![0.1, 0.25]
}
fn default_f1_thresholds() -> Vec<f64> {
    vec![0.5, 0.8]
}
fn default_trajectory_m() -> usize {
    10
}
fn default_probe_folds() -> usize {
    10
}
fn default_max_new_tokens() -> usize {
    32
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Adapter configuration path.
    pub adapter: PathBuf,
    /// Parallel TSV corpus; omitted when the adapter synthesizes one.
    #[serde(default)]
    pub parallel_corpus: Option<PathBuf>,
    /// QA JSONL dataset; omitted when the adapter synthesizes one.
    #[serde(default)]
    pub qa_dataset: Option<PathBuf>,
    pub languages: Vec<String>,
    /// Sentence pairs per language used by extract.
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    /// Master seed; every command derives its randomness from it.
    pub seed: u64,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_cevr_thresholds")]
    pub cevr_thresholds: Vec<f64>,
    #[serde(default = "default_eta_thresholds")]
    pub eta_thresholds: Vec<f64>,
    #[serde(default = "default_f1_thresholds")]
    pub f1_thresholds: Vec<f64>,
    #[serde(default = "default_trajectory_m")]
    pub trajectory_m: usize,
    #[serde(default = "default_probe_folds")]
    pub probe_folds: usize,
    #[serde(default)]
    pub distance: DistanceKind,
    /// Language -> family labels for family-specificity statistics.
    #[serde(default)]
    pub family_map: BTreeMap<String, String>,
    /// "default" plus per-language prompt templates ({question} substituted).
    #[serde(default)]
    pub prompt_templates: BTreeMap<String, String>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn prompt_table(&self) -> xfrn_core::evaluation::PromptTable {
        let mut table = xfrn_core::evaluation::PromptTable::default();
        for (lang, template) in &self.prompt_templates {
            if lang == "default" {
                table.default_template = template.clone();
            } else {
                table.per_language.insert(lang.clone(), template.clone());
            }
        }
        table
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default)]
    pub model_id: Option<String>,
    /// Adapter family; `planted_fixture` is built in.
    pub family: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    /// Hook-point names per architecture family; informational for the
    /// built-in fixture.
    #[serde(default)]
    pub hook_points: BTreeMap<String, String>,
    /// Checkpoint location for weight-loading families; relative paths
    /// resolve against $XFRN_CACHE.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default)]
    pub fixture: Option<FixtureParams>,
}

fn default_dtype() -> String {
    "f32".into()
}
fn default_device() -> String {
    "cpu".into()
}
fn default_max_context() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureParams {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub languages: Vec<String>,
    pub planted_per_layer: usize,
    #[serde(default)]
    pub num_pairs: Option<usize>,
    #[serde(default)]
    pub num_queries: Option<usize>,
    #[serde(default)]
    pub cluster_radius: Option<f64>,
    #[serde(default)]
    pub noise_scale: Option<f64>,
}

/// A loaded model plus whatever the adapter can synthesize.
pub enum LoadedAdapter {
    Fixture(Box<PlantedFixture>),
}

impl LoadedAdapter {
    pub fn decoder(&self) -> &dyn GatedDecoder {
        match self {
            LoadedAdapter::Fixture(f) => &f.model,
        }
    }

    pub fn synthetic_corpus(&self) -> Option<ParallelCorpus> {
        match self {
            LoadedAdapter::Fixture(f) => Some(f.corpus()),
        }
    }

    pub fn synthetic_qa(&self, language: &str) -> Option<Result<QaDataset>> {
        match self {
            LoadedAdapter::Fixture(f) => Some(f.qa_dataset(language)),
        }
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Parses the experiment config, resolves its relative paths, and checks
/// that every referenced path exists.
pub fn load_experiment_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let hash = {
        let mut h = Sha256::new();
        h.update(&bytes);
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    };
    let mut config: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.adapter = resolve(base, &config.adapter);
    config.parallel_corpus = config.parallel_corpus.map(|p| resolve(base, &p));
    config.qa_dataset = config.qa_dataset.map(|p| resolve(base, &p));
    config.out_dir = resolve(base, &config.out_dir);
    for (label, p) in [
        ("adapter", Some(&config.adapter)),
        ("parallel_corpus", config.parallel_corpus.as_ref()),
        ("qa_dataset", config.qa_dataset.as_ref()),
    ] {
        if let Some(p) = p {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "{label} path does not exist: {}",
                    p.display()
                )));
            }
        }
    }
    if config.languages.is_empty() {
        return Err(Error::Config("config lists no languages".into()));
    }
    if !config.languages.iter().any(|l| l == "en") {
        return Err(Error::Config("config languages must include 'en'".into()));
    }
    Ok((config, hash))
}

/// Loads the adapter config and instantiates the model family.
pub fn load_adapter(path: &Path) -> Result<LoadedAdapter> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read adapter {}: {e}", path.display())))?;
    let config: AdapterConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("invalid adapter {}: {e}", path.display())))?;
    if config.dtype != "f32" {
        return Err(Error::Model(format!(
            "unsupported dtype '{}' (only f32)",
            config.dtype
        )));
    }
    if let Some(ckpt) = &config.checkpoint_path {
        let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let resolved = if ckpt.is_absolute() {
            ckpt.clone()
        } else if let Some(cache) = cache {
            cache.join(ckpt)
        } else {
            ckpt.clone()
        };
        if !resolved.exists() {
            return Err(Error::Model(format!(
                "checkpoint path does not exist: {} (set ${CACHE_ENV} for relative paths)",
                resolved.display()
            )));
        }
    }
    match config.family.as_str() {
        "planted_fixture" => {
            let params = config.fixture.as_ref().ok_or_else(|| {
                Error::Config("planted_fixture adapter needs a 'fixture' block".into())
            })?;
            let langs: Vec<&str> = params.languages.iter().map(|s| s.as_str()).collect();
            let mut spec = FixtureSpec::new(
                params.seed,
                params.num_layers,
                params.hidden_dim,
                params.mlp_dim,
                &langs,
                params.planted_per_layer,
            );
            if let Some(n) = params.num_pairs {
                spec.num_pairs = n;
            }
            if let Some(n) = params.num_queries {
                spec.num_queries = n;
            }
            if let Some(r) = params.cluster_radius {
                spec.cluster_radius = r;
            }
            if let Some(e) = params.noise_scale {
                spec.noise_scale = e;
            }
            spec.max_context = config.max_context;
            let mut fixture = build_fixture(spec)?;
            if let Some(id) = &config.model_id {
                fixture.model.set_model_id(id.clone());
            }
            Ok(LoadedAdapter::Fixture(Box::new(fixture)))
        }
        other => Err(Error::Model(format!(
            "unsupported adapter family '{other}'; available: planted_fixture"
        ))),
    }
}
