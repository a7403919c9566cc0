//! Deactivation-mask construction and re-measurement under intervention.
//!
//! Baselines match a reference mask's per-layer histogram exactly while
//! excluding its own neurons. Re-measurement always runs on the test split,
//! checked against the split plan before any forward pass.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derangement, sample_id, ParallelCorpus, SplitPlan};
use crate::error::{Error, Result};
use crate::geometry::{
    centroid, centroid_distance_curve, cosine, mutual_knn_curve, similarity_gap_curve,
    CurveMeta, PairedCaptures, SimilarityCurve,
};
use crate::model::{
    forward_capture, CaptureInput, DeactivationMask, GatedDecoder, MaskProvenance,
};
use crate::store::{ActivationRecord, CaptureKind, NeuronId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionCondition {
    None,
    Type1,
    Type2,
    Baseline,
}

impl InterventionCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionCondition::None => "none",
            InterventionCondition::Type1 => "type1",
            InterventionCondition::Type2 => "type2",
            InterventionCondition::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for InterventionCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Random control mask: per layer, exactly as many neurons as the
/// reference has there, sampled without replacement from the indices the
/// reference does not use.
pub fn baseline_mask(
    reference: &DeactivationMask,
    mlp_dim: usize,
    seed: u64,
) -> Result<DeactivationMask> {
    if reference.is_empty() {
        return Err(Error::EmptyInput(
            "baseline needs a non-empty reference mask".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeSet::new();
    for (&layer, &count) in &reference.per_layer_counts() {
        let taken: BTreeSet<usize> = reference.indices_for_layer(layer).collect();
        let available: Vec<usize> = (0..mlp_dim).filter(|i| !taken.contains(i)).collect();
        if count > available.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer}: cannot draw {count} baseline neurons from {} remaining",
                available.len()
            )));
        }
        for pick in rand::seq::index::sample(&mut rng, available.len(), count) {
            entries.insert(NeuronId::new(layer, available[pick]));
        }
    }
    Ok(DeactivationMask::new(
        entries,
        MaskProvenance::BaselineRandom,
        Some(seed),
    ))
}

/// Which diagnostics to recompute under a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemeasureMetric {
    /// Parallel and non-parallel hidden-state cosine curves.
    HiddenGap,
    /// Parallel and non-parallel activation cosine curves.
    ActivationGap,
    MutualKnn,
    CentroidCos,
}

pub struct RemeasureSpec<'a> {
    pub model: &'a dyn GatedDecoder,
    pub corpus: &'a ParallelCorpus,
    pub split: &'a SplitPlan,
    pub l2: String,
    pub metrics: BTreeSet<RemeasureMetric>,
    pub knn_k: usize,
    /// Seed of the derangement that builds non-parallel pairs; shared by
    /// the before and after measurements.
    pub nonparallel_seed: u64,
    pub condition: InterventionCondition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionReport {
    pub condition: InterventionCondition,
    pub mask: DeactivationMask,
    pub language_pair: (String, String),
    pub before: Vec<SimilarityCurve>,
    pub after: Vec<SimilarityCurve>,
    /// Per-curve (after - before), aligned with `before`.
    pub deltas: Vec<SimilarityCurve>,
    /// Sorted pair ids of the test sentences used.
    pub test_pair_ids: Vec<String>,
    pub split_seed: u64,
}

impl InterventionReport {
    /// Layer-averaged parallel-minus-nonparallel gap of a curve pair, by
    /// metric names, over the given curve list.
    pub fn gap_mean(curves: &[SimilarityCurve]) -> Option<f64> {
        use crate::geometry::MetricKind;
        let parallel = curves.iter().find(|c| c.metric == MetricKind::HsParallel)?;
        let nonparallel = curves
            .iter()
            .find(|c| c.metric == MetricKind::HsNonparallel)?;
        let gaps: Vec<f64> = parallel
            .values
            .iter()
            .zip(&nonparallel.values)
            .filter_map(|(p, n)| match (p, n) {
                (Some(p), Some(n)) => Some(p - n),
                _ => None,
            })
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

/// Test-split pair indices of the corpus, ascending.
fn test_pairs(corpus: &ParallelCorpus, split: &SplitPlan) -> Result<Vec<usize>> {
    split.validate()?;
    let mut pairs: Vec<usize> = corpus
        .pairs
        .iter()
        .filter(|p| split.test_ids.contains(&crate::corpus::pair_id(p.pair_index)))
        .map(|p| p.pair_index)
        .collect();
    pairs.sort_unstable();
    if pairs.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "test split covers only {} corpus pair(s)",
            pairs.len()
        )));
    }
    Ok(pairs)
}

fn inputs_for(
    model: &dyn GatedDecoder,
    corpus: &ParallelCorpus,
    pairs: &[usize],
    language: &str,
) -> Result<Vec<CaptureInput>> {
    pairs
        .iter()
        .map(|&idx| {
            let text = corpus.sentence(idx, language).ok_or_else(|| {
                Error::Corpus(format!("pair {idx} has no '{language}' side"))
            })?;
            CaptureInput::from_text(model, sample_id(idx, language), language, text)
        })
        .collect()
}

/// Stacks records of one (language, kind) into per-layer matrices with rows
/// ordered by sample id.
fn collect_layers(
    records: &[ActivationRecord],
    num_layers: usize,
    kind: CaptureKind,
    language: &str,
    dim: usize,
) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(num_layers);
    for layer in 1..=num_layers {
        let mut rows: Vec<(&str, &[f32])> = records
            .iter()
            .filter(|r| r.layer == layer && r.language == language)
            .filter_map(|r| r.vector(kind).map(|v| (r.sample_id.as_str(), v)))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut m = Array2::<f64>::zeros((rows.len(), dim));
        for (i, (_, v)) in rows.iter().enumerate() {
            for (j, &x) in v.iter().enumerate() {
                m[(i, j)] = f64::from(x);
            }
        }
        out.push(m);
    }
    out
}

fn permute_rows(layers: &[Array2<f64>], perm: &[usize]) -> Vec<Array2<f64>> {
    layers
        .iter()
        .map(|m| {
            let mut out = Array2::<f64>::zeros(m.dim());
            for (new_i, &old_i) in perm.iter().enumerate() {
                out.row_mut(new_i).assign(&m.row(old_i));
            }
            out
        })
        .collect()
}

struct ConditionCapture {
    hidden_en: Vec<Array2<f64>>,
    hidden_l2: Vec<Array2<f64>>,
    act_en: Vec<Array2<f64>>,
    act_l2: Vec<Array2<f64>>,
}

fn capture_condition(
    spec: &RemeasureSpec,
    pairs: &[usize],
    kinds: &BTreeSet<CaptureKind>,
    mask: Option<&DeactivationMask>,
) -> Result<ConditionCapture> {
    let model = spec.model;
    let mut inputs = inputs_for(model, spec.corpus, pairs, "en")?;
    inputs.extend(inputs_for(model, spec.corpus, pairs, &spec.l2)?);
    let records = forward_capture(model, &inputs, kinds, mask)?;
    let l = model.num_layers();
    let d = model.hidden_dim();
    let d_m = model.mlp_dim();
    let want_act = kinds.contains(&CaptureKind::MlpActivation);
    Ok(ConditionCapture {
        hidden_en: collect_layers(&records, l, CaptureKind::HiddenState, "en", d),
        hidden_l2: collect_layers(&records, l, CaptureKind::HiddenState, &spec.l2, d),
        act_en: if want_act {
            collect_layers(&records, l, CaptureKind::MlpActivation, "en", d_m)
        } else {
            Vec::new()
        },
        act_l2: if want_act {
            collect_layers(&records, l, CaptureKind::MlpActivation, &spec.l2, d_m)
        } else {
            Vec::new()
        },
    })
}

fn curves_for(
    spec: &RemeasureSpec,
    cap: &ConditionCapture,
    perm: &[usize],
    condition_tag: &str,
) -> Result<Vec<SimilarityCurve>> {
    let meta = CurveMeta::condition(condition_tag).with_pair("en", spec.l2.clone());
    let mut curves = Vec::new();
    for metric in &spec.metrics {
        match metric {
            RemeasureMetric::HiddenGap => {
                let parallel = PairedCaptures {
                    a: cap.hidden_en.clone(),
                    b: cap.hidden_l2.clone(),
                };
                let nonparallel = PairedCaptures {
                    a: cap.hidden_en.clone(),
                    b: permute_rows(&cap.hidden_l2, perm),
                };
                let (p, n) = similarity_gap_curve(
                    &parallel,
                    &nonparallel,
                    CaptureKind::HiddenState,
                    meta.clone(),
                )?;
                curves.push(p);
                curves.push(n);
            }
            RemeasureMetric::ActivationGap => {
                let parallel = PairedCaptures {
                    a: cap.act_en.clone(),
                    b: cap.act_l2.clone(),
                };
                let nonparallel = PairedCaptures {
                    a: cap.act_en.clone(),
                    b: permute_rows(&cap.act_l2, perm),
                };
                let (p, n) = similarity_gap_curve(
                    &parallel,
                    &nonparallel,
                    CaptureKind::MlpActivation,
                    meta.clone(),
                )?;
                curves.push(p);
                curves.push(n);
            }
            RemeasureMetric::MutualKnn => {
                curves.push(mutual_knn_curve(
                    &cap.hidden_en,
                    &cap.hidden_l2,
                    spec.knn_k,
                    meta.clone(),
                )?);
            }
            RemeasureMetric::CentroidCos => {
                curves.push(centroid_distance_curve(
                    &cap.hidden_en,
                    &cap.hidden_l2,
                    meta.clone(),
                )?);
            }
        }
    }
    Ok(curves)
}

/// Re-runs the forward pass over the test split with and without the mask
/// and recomputes the requested diagnostics. Before/after curves share
/// identical metadata except the condition tag.
pub fn remeasure_under_mask(
    spec: &RemeasureSpec,
    mask: &DeactivationMask,
) -> Result<InterventionReport> {
    mask.validate(spec.model.num_layers(), spec.model.mlp_dim())?;
    if spec.metrics.is_empty() {
        return Err(Error::InvalidArgument(
            "remeasure needs at least one metric".into(),
        ));
    }
    if spec.l2 == "en" {
        return Err(Error::InvalidArgument(
            "re-measurement pairs English with a second language; l2 must not be 'en'".into(),
        ));
    }
    let pairs = test_pairs(spec.corpus, spec.split)?;
    let mut kinds = BTreeSet::from([CaptureKind::HiddenState]);
    if spec.metrics.contains(&RemeasureMetric::ActivationGap) {
        kinds.insert(CaptureKind::MlpActivation);
    }
    let perm = derangement(pairs.len(), spec.nonparallel_seed)?;
    let before_cap = capture_condition(spec, &pairs, &kinds, None)?;
    let after_cap = capture_condition(spec, &pairs, &kinds, Some(mask))?;
    let before = curves_for(spec, &before_cap, &perm, "none")?;
    let after = curves_for(spec, &after_cap, &perm, spec.condition.as_str())?;
    let deltas = before
        .iter()
        .zip(&after)
        .map(|(b, a)| b.delta_to(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionReport {
        condition: spec.condition,
        mask: mask.clone(),
        language_pair: ("en".into(), spec.l2.clone()),
        before,
        after,
        deltas,
        test_pair_ids: pairs.iter().map(|&p| crate::corpus::pair_id(p)).collect(),
        split_seed: spec.split.seed,
    })
}

/// Cross-lingual deactivation effect on the L2 centroid trajectory:
/// per layer, cos(C_l2 unmasked, C_l2 under the other language's mask)
/// against the own-mask reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossLingualReport {
    pub l1: String,
    pub l2: String,
    /// cos(C_l2, C_l2 with l1's mask) per layer.
    pub cross: SimilarityCurve,
    /// cos(C_l2, C_l2 with l2's own mask) per layer.
    pub reference: SimilarityCurve,
    pub test_pair_ids: Vec<String>,
    pub split_seed: u64,
}

pub fn cross_lingual_effect(
    model: &dyn GatedDecoder,
    corpus: &ParallelCorpus,
    split: &SplitPlan,
    l1: &str,
    l2: &str,
    l1_mask: &DeactivationMask,
    l2_mask: &DeactivationMask,
) -> Result<CrossLingualReport> {
    l1_mask.validate(model.num_layers(), model.mlp_dim())?;
    l2_mask.validate(model.num_layers(), model.mlp_dim())?;
    let pairs = test_pairs(corpus, split)?;
    let inputs = inputs_for(model, corpus, &pairs, l2)?;
    let kinds = BTreeSet::from([CaptureKind::HiddenState]);
    let l = model.num_layers();
    let d = model.hidden_dim();

    let centroids = |mask: Option<&DeactivationMask>| -> Result<Vec<ndarray::Array1<f64>>> {
        let records = forward_capture(model, &inputs, &kinds, mask)?;
        collect_layers(&records, l, CaptureKind::HiddenState, l2, d)
            .iter()
            .map(|m| centroid(&m.view()))
            .collect()
    };
    let base = centroids(None)?;
    let under_l1 = centroids(Some(l1_mask))?;
    let under_l2 = centroids(Some(l2_mask))?;

    let curve = |masked: &[ndarray::Array1<f64>], tag: &str| -> Result<SimilarityCurve> {
        let values = base
            .iter()
            .zip(masked)
            .map(|(b, m)| cosine(&b.view(), &m.view()).map(Some))
            .collect::<Result<Vec<_>>>()?;
        Ok(SimilarityCurve::new(
            crate::geometry::MetricKind::CentroidCos,
            1,
            values,
            CurveMeta::condition(tag).with_pair(l1, l2),
        ))
    };
    Ok(CrossLingualReport {
        l1: l1.to_string(),
        l2: l2.to_string(),
        cross: curve(&under_l1, "cross")?,
        reference: curve(&under_l2, "own")?,
        test_pair_ids: pairs.iter().map(|&p| crate::corpus::pair_id(p)).collect(),
        split_seed: split.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::NeuronId;

    fn reference() -> DeactivationMask {
        DeactivationMask::new(
            [
                NeuronId::new(1, 0),
                NeuronId::new(1, 3),
                NeuronId::new(1, 5),
                NeuronId::new(5, 2),
                NeuronId::new(5, 7),
            ],
            MaskProvenance::DetectedType1,
            None,
        )
    }

    #[test]
    fn baseline_matches_histogram_and_avoids_reference() {
        let r = reference();
        let b = baseline_mask(&r, 16, 42).unwrap();
        assert_eq!(b.per_layer_counts(), r.per_layer_counts());
        assert!(r.entries().intersection(b.entries()).next().is_none());
        assert_eq!(b.provenance, MaskProvenance::BaselineRandom);
    }

    #[test]
    fn baseline_is_seeded() {
        let r = reference();
        assert_eq!(baseline_mask(&r, 16, 7).unwrap(), baseline_mask(&r, 16, 7).unwrap());
    }

    #[test]
    fn baseline_rejects_overfull_layers() {
        let r = DeactivationMask::new(
            (0..5).map(|i| NeuronId::new(1, i)),
            MaskProvenance::DetectedType1,
            None,
        );
        // 5 used of 8: only 3 remain, cannot match 5
        assert!(baseline_mask(&r, 8, 0).is_err());
        assert!(baseline_mask(&DeactivationMask::empty(MaskProvenance::Custom), 8, 0).is_err());
    }
}
