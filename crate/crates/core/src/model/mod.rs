//! Capture-and-intervene interface over gated-MLP decoder transformers.
//!
//! An adapter only has to expose tokenization plus a forward pass with
//! per-layer reads at (pre-MLP residual, attention output, activation
//! vector, post-layer hidden state) and a write hook that zeroes selected
//! activations before the down projection. [`TinyGatedModel`] is the
//! in-crate implementation; [`fixture`] builds the planted-neuron variant
//! used as detection ground truth.

pub mod fixture;
mod tiny;

pub use fixture::{build_fixture, build_planted_fixture, FixtureSpec, PlantKind, PlantedFixture, PlantedNeuron};
pub use tiny::TinyGatedModel;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{
    ActivationRecord, CaptureKind, ModelManifest, NeuronId, ValueVectorTable,
};

/// Elementwise nonlinearity of the gate path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Silu => x / (1.0 + (-x).exp()),
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Identity => x,
        }
    }
}

/// One layer's gated MLP weights.
///
/// The activation vector is `a(x M_gate) ⊙ (x M_up)` and the MLP output is
/// `alpha M_down`, i.e. the activation-weighted sum of value vectors.
#[derive(Debug, Clone)]
pub struct GatedMlpLayer {
    /// `d x d_m`
    pub gate: Array2<f32>,
    /// `d x d_m`
    pub up: Array2<f32>,
    /// `d_m x d`; row `i` is the value vector of neuron `i`.
    pub down: Array2<f32>,
}

impl GatedMlpLayer {
    pub fn activation(&self, x: &Array1<f32>, nonlinearity: Nonlinearity) -> Array1<f32> {
        let gated = x.dot(&self.gate).mapv(|v| nonlinearity.apply(v));
        let up = x.dot(&self.up);
        gated * up
    }

    pub fn mlp_output(&self, alpha: &Array1<f32>) -> Array1<f32> {
        alpha.dot(&self.down)
    }
}

/// Where a deactivation mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    DetectedType1,
    DetectedType2,
    BaselineRandom,
    Custom,
}

/// Set of neurons whose activations are forced to zero during forward
/// passes, immediately before the down projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeactivationMask {
    entries: BTreeSet<NeuronId>,
    pub provenance: MaskProvenance,
    pub seed: Option<u64>,
}

impl DeactivationMask {
    pub fn new(
        entries: impl IntoIterator<Item = NeuronId>,
        provenance: MaskProvenance,
        seed: Option<u64>,
    ) -> Self {
        DeactivationMask {
            entries: entries.into_iter().collect(),
            provenance,
            seed,
        }
    }

    pub fn empty(provenance: MaskProvenance) -> Self {
        DeactivationMask {
            entries: BTreeSet::new(),
            provenance,
            seed: None,
        }
    }

    pub fn entries(&self) -> &BTreeSet<NeuronId> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        self.entries.contains(&id)
    }

    pub fn per_layer_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.layer).or_insert(0) += 1;
        }
        counts
    }

    pub fn indices_for_layer(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.layer == layer)
            .map(|e| e.index)
    }

    /// Every entry must satisfy `1 <= layer <= L` and `index < d_m`.
    pub fn validate(&self, num_layers: usize, mlp_dim: usize) -> Result<()> {
        for e in &self.entries {
            if e.layer < 1 || e.layer > num_layers {
                return Err(Error::MaskOutOfRange {
                    layer: e.layer,
                    index: e.index,
                    detail: format!("layer must be in [1, {num_layers}]"),
                });
            }
            if e.index >= mlp_dim {
                return Err(Error::MaskOutOfRange {
                    layer: e.layer,
                    index: e.index,
                    detail: format!("neuron index must be in [0, {mlp_dim})"),
                });
            }
        }
        Ok(())
    }

    /// CSV body with `layer,index` rows, entries in ascending order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,index\n");
        for e in &self.entries {
            s.push_str(&format!("{},{}\n", e.layer, e.index));
        }
        s
    }

    pub fn from_csv_str(
        text: &str,
        provenance: MaskProvenance,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut entries = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty()
                || line.starts_with('#')
                || line.eq_ignore_ascii_case("layer,index")
            {
                continue;
            }
            let mut parts = line.split(',');
            let layer = parts
                .next()
                .and_then(|p| p.trim().parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("mask line {}: bad layer", i + 1))
                })?;
            let index = parts
                .next()
                .and_then(|p| p.trim().parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("mask line {}: bad index", i + 1))
                })?;
            entries.insert(NeuronId::new(layer, index));
        }
        Ok(DeactivationMask {
            entries,
            provenance,
            seed,
        })
    }
}

/// Per-layer captures for the final token of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub pre_mlp: Array1<f32>,
    pub attention_out: Array1<f32>,
    pub mlp_activation: Array1<f32>,
    pub hidden_state: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `layers[l-1]` is the trace of layer `l`.
    pub layers: Vec<LayerTrace>,
    /// Next-token logits from the final hidden state.
    pub logits: Array1<f32>,
}

/// Minimal contract an adapted decoder must satisfy.
pub trait GatedDecoder: Send + Sync {
    fn model_id(&self) -> &str;
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn mlp_dim(&self) -> usize;
    fn max_context(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
    fn detokenize(&self, tokens: &[u32]) -> String;
    fn eos_token(&self) -> Option<u32>;

    /// Forward pass capturing the final token at every layer. A mask zeroes
    /// the selected activations before the down projection, so downstream
    /// captures reflect the intervention.
    fn forward_last(&self, tokens: &[u32], mask: Option<&DeactivationMask>)
        -> Result<ForwardPass>;

    /// The rows of every layer's down projection.
    fn value_vectors(&self) -> Result<ValueVectorTable>;

    fn manifest(&self, kinds: BTreeSet<CaptureKind>) -> Result<ModelManifest> {
        ModelManifest::new(
            self.model_id(),
            self.num_layers(),
            self.hidden_dim(),
            self.mlp_dim(),
            kinds,
        )
    }
}

/// One batch element for capture.
#[derive(Debug, Clone)]
pub struct CaptureInput {
    pub sample_id: String,
    pub language: String,
    pub tokens: Vec<u32>,
}

impl CaptureInput {
    pub fn from_text(
        model: &dyn GatedDecoder,
        sample_id: impl Into<String>,
        language: impl Into<String>,
        text: &str,
    ) -> Result<Self> {
        Ok(CaptureInput {
            sample_id: sample_id.into(),
            language: language.into(),
            tokens: model.tokenize(text)?,
        })
    }
}

/// Runs the batch and emits, per sample and layer, the requested capture
/// kinds for the final token. The mask (if any) is validated before any
/// forward pass runs; an empty batch yields an empty stream.
pub fn forward_capture(
    model: &dyn GatedDecoder,
    batch: &[CaptureInput],
    kinds: &BTreeSet<CaptureKind>,
    mask: Option<&DeactivationMask>,
) -> Result<Vec<ActivationRecord>> {
    if let Some(m) = mask {
        m.validate(model.num_layers(), model.mlp_dim())?;
    }
    if kinds.is_empty() {
        return Err(Error::InvalidArgument(
            "forward_capture needs at least one capture kind".into(),
        ));
    }
    let mut records = Vec::with_capacity(batch.len() * model.num_layers());
    for input in batch {
        if input.tokens.is_empty() {
            return Err(Error::EmptyInput(format!(
                "sample '{}' has an empty token sequence",
                input.sample_id
            )));
        }
        let pass = model.forward_last(&input.tokens, mask)?;
        for (i, trace) in pass.layers.iter().enumerate() {
            records.push(ActivationRecord {
                sample_id: input.sample_id.clone(),
                language: input.language.clone(),
                layer: i + 1,
                hidden_state: kinds
                    .contains(&CaptureKind::HiddenState)
                    .then(|| trace.hidden_state.to_vec()),
                pre_mlp: kinds
                    .contains(&CaptureKind::PreMlp)
                    .then(|| trace.pre_mlp.to_vec()),
                attention_out: kinds
                    .contains(&CaptureKind::AttentionOut)
                    .then(|| trace.attention_out.to_vec()),
                mlp_activation: kinds
                    .contains(&CaptureKind::MlpActivation)
                    .then(|| trace.mlp_activation.to_vec()),
            });
        }
    }
    Ok(records)
}

/// Greedy argmax with ties broken by the lowest token id.
fn argmax(logits: &Array1<f32>) -> u32 {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best as u32
}

/// Deterministic greedy decoding with the mask applied at every step.
pub fn generate(
    model: &dyn GatedDecoder,
    prompt: &[u32],
    mask: Option<&DeactivationMask>,
    max_new_tokens: usize,
) -> Result<String> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidArgument(
            "max_new_tokens must be >= 1".into(),
        ));
    }
    if let Some(m) = mask {
        m.validate(model.num_layers(), model.mlp_dim())?;
    }
    if prompt.is_empty() {
        return Err(Error::EmptyInput("empty prompt".into()));
    }
    let needed = prompt.len() + max_new_tokens;
    if needed > model.max_context() {
        return Err(Error::ContextOverflow {
            needed,
            limit: model.max_context(),
        });
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        let pass = model.forward_last(&tokens, mask)?;
        let next = argmax(&pass.logits);
        if Some(next) == model.eos_token() {
            break;
        }
        tokens.push(next);
        generated.push(next);
    }
    Ok(model.detokenize(&generated))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_csv_round_trip() {
        let mask = DeactivationMask::new(
            [NeuronId::new(1, 3), NeuronId::new(5, 0)],
            MaskProvenance::Custom,
            Some(7),
        );
        let csv = mask.to_csv();
        let back = DeactivationMask::from_csv_str(&csv, MaskProvenance::Custom, Some(7)).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn mask_validation_bounds() {
        let mask = DeactivationMask::new([NeuronId::new(3, 0)], MaskProvenance::Custom, None);
        assert!(mask.validate(2, 8).is_err());
        let mask = DeactivationMask::new([NeuronId::new(1, 8)], MaskProvenance::Custom, None);
        assert!(mask.validate(2, 8).is_err());
        let mask = DeactivationMask::new([NeuronId::new(1, 7)], MaskProvenance::Custom, None);
        assert!(mask.validate(2, 8).is_ok());
    }

    #[test]
    fn nonlinearity_silu_matches_definition() {
        let x = 0.7f32;
        let expected = x / (1.0 + (-x).exp());
        assert_eq!(Nonlinearity::Silu.apply(x), expected);
        assert_eq!(Nonlinearity::Relu.apply(-1.0), 0.0);
    }
}
