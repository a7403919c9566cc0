//! Transfer-neuron scoring and selection.
//!
//! A candidate neuron is scored by how much adding its activation-weighted
//! value vector to the pre-MLP residual moves the representation toward a
//! per-layer target centroid, averaged over target-language samples:
//! positive means the neuron pulls representations toward the target space.
//! Type-1 candidates (early layers, up to `round(0.625 * L)`) target the
//! shared-space centroid built from parallel pairs; Type-2 candidates (the
//! remaining layers) target the language's own centroid. Candidates are
//! ranked globally across their layer range.
//!
//! Language-specific neurons are detected separately via the correlation
//! ratio between a neuron's activations and a binary target-language label.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{pair_id_of_sample, SplitPlan};
use crate::error::{Error, Result};
use crate::geometry::{centroid, centroid_shared};
use crate::model::{DeactivationMask, MaskProvenance};
use crate::stats::{correlation_ratio, LabeledActivations};
use crate::store::{
    CaptureKind, NeuronId, NeuronScoreRow, RunHandle, SpaceTag, ValueVectorTable,
};

/// Last Type-1 layer; generalizes the 1-20 / 21-32 split of 32-layer models.
pub fn type1_boundary(num_layers: usize) -> usize {
    (0.625 * num_layers as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronType {
    Type1,
    Type2,
}

impl NeuronType {
    pub fn layer_range(self, num_layers: usize) -> RangeInclusive<usize> {
        let b = type1_boundary(num_layers);
        match self {
            NeuronType::Type1 => 1..=b,
            NeuronType::Type2 => (b + 1)..=num_layers,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NeuronType::Type1 => "type1",
            NeuronType::Type2 => "type2",
        }
    }
}

impl std::fmt::Display for NeuronType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closeness measure used by the scoring. Cosine is the default; the
/// Euclidean variant negates the distance so that larger always means
/// closer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Cosine,
    Euclidean,
}

fn closeness(a: &ArrayView1<f64>, b: &ArrayView1<f64>, dist: DistanceKind) -> Result<f64> {
    match dist {
        DistanceKind::Cosine => crate::geometry::cosine(a, b),
        DistanceKind::Euclidean => {
            let diff = a.to_owned() - b;
            Ok(-diff.dot(&diff).sqrt())
        }
    }
}

/// Closeness of the pre-MLP residual to the target centroid.
pub fn layer_score(
    pre_mlp: &ArrayView1<f64>,
    centroid: &ArrayView1<f64>,
    dist: DistanceKind,
) -> Result<f64> {
    closeness(pre_mlp, centroid, dist)
}

/// Closeness after adding one neuron's activation-weighted value vector.
pub fn neuron_score(
    pre_mlp: &ArrayView1<f64>,
    alpha: f64,
    value: &ArrayView1<f64>,
    centroid: &ArrayView1<f64>,
    dist: DistanceKind,
) -> Result<f64> {
    let shifted = pre_mlp.to_owned() + &(value.to_owned() * alpha);
    closeness(&shifted.view(), centroid, dist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferScore {
    /// Mean of (neuron score - layer score) over valid samples; `None` when
    /// every sample was excluded.
    pub score: Option<f64>,
    /// Samples excluded because a vector was numerically zero.
    pub excluded: usize,
}

/// Mean score advantage of one neuron over its layer baseline. Samples
/// whose pre-MLP residual or shifted vector is numerically zero are
/// excluded and counted rather than erroring the whole neuron.
pub fn transfer_score(
    pre_mlp: &ArrayView2<f64>,
    alphas: &ArrayView1<f64>,
    value: &ArrayView1<f64>,
    centroid: &ArrayView1<f64>,
    dist: DistanceKind,
) -> Result<TransferScore> {
    let n = pre_mlp.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("transfer_score over zero samples".into()));
    }
    if alphas.len() != n {
        return Err(Error::Shape(format!(
            "{n} pre-MLP rows but {} activations",
            alphas.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for k in 0..n {
        let pre = pre_mlp.row(k);
        let l = match layer_score(&pre, centroid, dist) {
            Ok(v) => v,
            Err(Error::ZeroVector(_)) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = match neuron_score(&pre, alphas[k], value, centroid, dist) {
            Ok(v) => v,
            Err(Error::ZeroVector(_)) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        sum += s - l;
        used += 1;
    }
    Ok(TransferScore {
        score: (used > 0).then(|| sum / used as f64),
        excluded,
    })
}

/// All neuron scores of one layer, computed with shared precomputations:
/// per sample (pre.C, |pre|^2), per neuron (v.C, |v|^2), and the n x d_m
/// matrix of pre.v dot products.
pub fn score_layer(
    pre_mlp: &Array2<f64>,
    alphas: &Array2<f64>,
    values: &Array2<f64>,
    target: &Array1<f64>,
    dist: DistanceKind,
) -> Result<Vec<TransferScore>> {
    let n = pre_mlp.nrows();
    let d_m = values.nrows();
    if alphas.dim() != (n, d_m) {
        return Err(Error::Shape(format!(
            "activations shaped {:?}, expected ({n}, {d_m})",
            alphas.dim()
        )));
    }
    if values.ncols() != pre_mlp.ncols() || target.len() != pre_mlp.ncols() {
        return Err(Error::Shape(
            "value vectors, residuals, and centroid disagree on hidden dim".into(),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyInput("score_layer over zero samples".into()));
    }
    let cc = target.dot(target);
    let cn = cc.sqrt();
    if dist == DistanceKind::Cosine && cn == 0.0 {
        return Err(Error::ZeroVector("target centroid is zero".into()));
    }
    let pc = pre_mlp.dot(target); // n
    let pp: Vec<f64> = (0..n).map(|k| pre_mlp.row(k).dot(&pre_mlp.row(k))).collect();
    let vc = values.dot(target); // d_m
    let vv: Vec<f64> = (0..d_m).map(|i| values.row(i).dot(&values.row(i))).collect();
    let pv = pre_mlp.dot(&values.t()); // n x d_m

    let scores: Vec<TransferScore> = (0..d_m)
        .into_par_iter()
        .map(|i| {
            let mut sum = 0.0;
            let mut used = 0usize;
            let mut excluded = 0usize;
            for k in 0..n {
                let a = alphas[(k, i)];
                let shifted_sq = pp[k] + 2.0 * a * pv[(k, i)] + a * a * vv[i];
                match dist {
                    DistanceKind::Cosine => {
                        // catches exact zeros, negative fp residue, and NaN
                        let valid = pp[k] > 0.0 && shifted_sq > 0.0;
                        if !valid {
                            excluded += 1;
                            continue;
                        }
                        let l = pc[k] / (pp[k].sqrt() * cn);
                        let s = (pc[k] + a * vc[i]) / (shifted_sq.sqrt() * cn);
                        sum += s - l;
                        used += 1;
                    }
                    DistanceKind::Euclidean => {
                        let l_sq = pp[k] - 2.0 * pc[k] + cc;
                        let s_sq = shifted_sq - 2.0 * (pc[k] + a * vc[i]) + cc;
                        sum += l_sq.max(0.0).sqrt() - s_sq.max(0.0).sqrt();
                        used += 1;
                    }
                }
            }
            TransferScore {
                score: (used > 0).then(|| sum / used as f64),
                excluded,
            }
        })
        .collect();
    Ok(scores)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub model_id: String,
    pub language: String,
    pub neuron_type: NeuronType,
    pub target: SpaceTag,
    pub distance: DistanceKind,
    pub num_layers: usize,
    pub mlp_dim: usize,
    /// Last Type-1 layer under the boundary rule.
    pub boundary: usize,
    pub candidate_layers: (usize, usize),
    /// Candidates actually scored (layers in range x mlp_dim).
    pub candidate_count: usize,
    /// Total neuron population L * d_m of the model.
    pub population: usize,
    pub top_n_requested: usize,
    /// Set when top_n exceeded the candidate count and all were returned.
    pub truncated: bool,
    /// Samples excluded across all neurons for numerically zero vectors.
    pub excluded_samples: usize,
    pub rows: Vec<NeuronScoreRow>,
    /// Sorted sample ids consumed by this detection (train split).
    pub train_sample_ids: Vec<String>,
    pub split_seed: Option<u64>,
}

impl DetectionResult {
    pub fn neuron_set(&self) -> BTreeSet<NeuronId> {
        self.rows.iter().map(|r| r.neuron).collect()
    }

    /// Top `m` neurons of each candidate layer, in global rank order.
    pub fn per_layer_top(&self, m: usize) -> std::collections::BTreeMap<usize, Vec<NeuronId>> {
        let mut out: std::collections::BTreeMap<usize, Vec<NeuronId>> =
            std::collections::BTreeMap::new();
        for row in &self.rows {
            let entry = out.entry(row.neuron.layer).or_default();
            if entry.len() < m {
                entry.push(row.neuron);
            }
        }
        out
    }

    pub fn mask(&self) -> DeactivationMask {
        let provenance = match self.neuron_type {
            NeuronType::Type1 => MaskProvenance::DetectedType1,
            NeuronType::Type2 => MaskProvenance::DetectedType2,
        };
        DeactivationMask::new(self.neuron_set(), provenance, self.split_seed)
    }

    /// CSV with columns `layer,index,score,rank`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,index,score,rank\n");
        for row in &self.rows {
            let score = row.score.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{score},{}\n",
                row.neuron.layer, row.neuron.index, row.rank
            ));
        }
        s
    }
}

fn ranked_rows(
    mut scored: Vec<(NeuronId, Option<f64>)>,
    top_n: usize,
) -> (Vec<NeuronScoreRow>, bool) {
    scored.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y
            .partial_cmp(&x)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    let truncated = top_n > scored.len();
    let take = top_n.min(scored.len());
    let rows = scored
        .into_iter()
        .take(take)
        .enumerate()
        .map(|(i, (neuron, score))| NeuronScoreRow {
            neuron,
            score,
            rank: i + 1,
        })
        .collect();
    (rows, truncated)
}

fn check_split(run: &RunHandle, split: &SplitPlan) -> Result<Vec<String>> {
    split.validate()?;
    let ids = run.sample_ids();
    let mut leaked = 0usize;
    for id in &ids {
        let pid = pair_id_of_sample(id);
        if split.test_ids.contains(pid) {
            leaked += 1;
        }
    }
    if leaked > 0 {
        return Err(Error::SplitHygiene(format!(
            "{leaked} record(s) in the run belong to the test split"
        )));
    }
    Ok(ids.into_iter().collect())
}

/// Detects transfer neurons of one type for one language over a train-split
/// capture run. When `top_n` exceeds the candidate count, all candidates
/// come back with a warning flag.
pub fn detect_transfer_neurons(
    run: &RunHandle,
    values: &ValueVectorTable,
    language: &str,
    neuron_type: NeuronType,
    top_n: usize,
    dist: DistanceKind,
    split: Option<&SplitPlan>,
) -> Result<DetectionResult> {
    let manifest = run.manifest();
    for kind in [
        CaptureKind::HiddenState,
        CaptureKind::PreMlp,
        CaptureKind::MlpActivation,
    ] {
        if !manifest.capture_kinds.contains(&kind) {
            return Err(Error::UnknownKind {
                kind: kind.to_string(),
                available: manifest
                    .capture_kinds
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            });
        }
    }
    if values.num_layers() != manifest.num_layers
        || values.mlp_dim() != manifest.mlp_dim
        || values.hidden_dim() != manifest.hidden_dim
    {
        return Err(Error::Shape(format!(
            "value table ({} layers, {}x{}) does not match the run manifest ({} layers, {}x{})",
            values.num_layers(),
            values.mlp_dim(),
            values.hidden_dim(),
            manifest.num_layers,
            manifest.mlp_dim,
            manifest.hidden_dim
        )));
    }
    if !run.languages().contains(language) {
        return Err(Error::Corpus(format!(
            "run has no captures for language '{language}'"
        )));
    }
    if neuron_type == NeuronType::Type1 && !run.languages().contains("en") {
        return Err(Error::Corpus(
            "type1 detection needs English captures for the shared centroid".into(),
        ));
    }
    let train_sample_ids = match split {
        Some(plan) => check_split(run, plan)?,
        None => run.sample_ids().into_iter().collect(),
    };

    let layers = neuron_type.layer_range(manifest.num_layers);
    let mut scored: Vec<(NeuronId, Option<f64>)> = Vec::new();
    let mut excluded_total = 0usize;
    for layer in layers.clone() {
        let (l2_ids, l2_hidden) =
            run.load_slice_with_ids(layer, CaptureKind::HiddenState, Some(language))?;
        if l2_ids.is_empty() {
            return Err(Error::EmptyInput(format!(
                "no '{language}' captures at layer {layer}"
            )));
        }
        let l2_hidden = l2_hidden.mapv(f64::from);
        let target: Array1<f64> = match neuron_type {
            NeuronType::Type1 => {
                let (en_ids, en_hidden) =
                    run.load_slice_with_ids(layer, CaptureKind::HiddenState, Some("en"))?;
                let en_pairs: Vec<&str> =
                    en_ids.iter().map(|s| pair_id_of_sample(s)).collect();
                let l2_pairs: Vec<&str> =
                    l2_ids.iter().map(|s| pair_id_of_sample(s)).collect();
                if en_pairs != l2_pairs {
                    return Err(Error::Corpus(format!(
                        "parallel alignment broken at layer {layer}: en and {language} cover different pairs"
                    )));
                }
                let en_hidden = en_hidden.mapv(f64::from);
                centroid_shared(&en_hidden.view(), &l2_hidden.view())?
            }
            NeuronType::Type2 => centroid(&l2_hidden.view())?,
        };
        let (pre_ids, pre) = run.load_slice_with_ids(layer, CaptureKind::PreMlp, Some(language))?;
        let (act_ids, acts) =
            run.load_slice_with_ids(layer, CaptureKind::MlpActivation, Some(language))?;
        if pre_ids != l2_ids || act_ids != l2_ids {
            return Err(Error::Corpus(format!(
                "layer {layer} slices cover different sample sets per kind"
            )));
        }
        let pre = pre.mapv(f64::from);
        let acts = acts.mapv(f64::from);
        let value_matrix = values.layer(layer)?.mapv(f64::from);
        let layer_scores = score_layer(&pre, &acts, &value_matrix, &target, dist)?;
        for (i, ts) in layer_scores.into_iter().enumerate() {
            excluded_total += ts.excluded;
            scored.push((NeuronId::new(layer, i), ts.score));
        }
    }
    let candidate_count = scored.len();
    let (rows, truncated) = ranked_rows(scored, top_n);
    let target = match neuron_type {
        NeuronType::Type1 => SpaceTag::Shared {
            en: "en".into(),
            l2: language.into(),
        },
        NeuronType::Type2 => SpaceTag::Language {
            code: language.into(),
        },
    };
    Ok(DetectionResult {
        model_id: manifest.model_id.clone(),
        language: language.to_string(),
        neuron_type,
        target,
        distance: dist,
        num_layers: manifest.num_layers,
        mlp_dim: manifest.mlp_dim,
        boundary: type1_boundary(manifest.num_layers),
        candidate_layers: (*layers.start(), *layers.end()),
        candidate_count,
        population: manifest.neuron_population(),
        top_n_requested: top_n,
        truncated,
        excluded_samples: excluded_total,
        rows,
        train_sample_ids,
        split_seed: split.map(|s| s.seed),
    })
}

/// Language-specific neurons: per-neuron correlation ratio between its
/// activations and a binary label (target language vs. everything else).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageSpecificResult {
    pub model_id: String,
    pub target_language: String,
    pub threshold: f64,
    /// Neurons at or above the threshold, descending by correlation ratio.
    pub neurons: Vec<(NeuronId, f64)>,
    /// Count of selected neurons per layer (index 0 = layer 1).
    pub per_layer_histogram: Vec<usize>,
}

pub fn detect_language_specific_neurons(
    run: &RunHandle,
    target_language: &str,
    threshold: f64,
) -> Result<LanguageSpecificResult> {
    let manifest = run.manifest();
    if !manifest.capture_kinds.contains(&CaptureKind::MlpActivation) {
        return Err(Error::UnknownKind {
            kind: CaptureKind::MlpActivation.to_string(),
            available: "run lacks activation captures".into(),
        });
    }
    let languages = run.languages();
    if !languages.contains(target_language) {
        return Err(Error::Corpus(format!(
            "run has no captures for language '{target_language}'"
        )));
    }
    if languages.len() < 2 {
        return Err(Error::Corpus(
            "language-specific detection needs at least 2 captured languages".into(),
        ));
    }
    let mut neurons = Vec::new();
    let mut histogram = vec![0usize; manifest.num_layers];
    for layer in 1..=manifest.num_layers {
        let mut stacks: Vec<(bool, Array2<f64>)> = Vec::new();
        for lang in &languages {
            let m = run.load_slice_f64(layer, CaptureKind::MlpActivation, Some(lang))?;
            stacks.push((lang == target_language, m));
        }
        let d_m = manifest.mlp_dim;
        let layer_scores: Vec<f64> = (0..d_m)
            .into_par_iter()
            .map(|i| {
                let mut values = Vec::new();
                let mut labels = Vec::new();
                for (is_target, m) in &stacks {
                    for k in 0..m.nrows() {
                        values.push(m[(k, i)]);
                        labels.push(u32::from(*is_target));
                    }
                }
                let data = LabeledActivations::new(values, labels)
                    .expect("two languages guarantee two labels");
                correlation_ratio(&data).expect("validated labels")
            })
            .collect();
        for (i, eta) in layer_scores.into_iter().enumerate() {
            if eta >= threshold {
                neurons.push((NeuronId::new(layer, i), eta));
                histogram[layer - 1] += 1;
            }
        }
    }
    neurons.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(LanguageSpecificResult {
        model_id: manifest.model_id.clone(),
        target_language: target_language.to_string(),
        threshold,
        neurons,
        per_layer_histogram: histogram,
    })
}
