//! A small word-level gated-MLP decoder with a zero-attention stub.
//!
//! Positions are independent under the stub, so a forward pass only runs
//! the final token through the layer stack; greedy decoding chains such
//! passes. The MLP path is the full gated form, which is what the rest of
//! the toolkit captures and intervenes on.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DeactivationMask, ForwardPass, GatedDecoder, GatedMlpLayer, LayerTrace, Nonlinearity};
use crate::error::{Error, Result};
use crate::store::ValueVectorTable;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

pub struct TinyGatedModel {
    model_id: String,
    vocab: Vec<String>,
    token_ids: HashMap<String, u32>,
    /// `V x d`
    embedding: Array2<f32>,
    /// `d x V`
    unembed: Array2<f32>,
    layers: Vec<GatedMlpLayer>,
    nonlinearity: Nonlinearity,
    max_context: usize,
}

impl TinyGatedModel {
    /// Builds a model from explicit weights. The vocabulary must not repeat
    /// words and should start with `<unk>` and `</s>`; missing specials are
    /// prepended with zero-ish rows.
    pub fn from_weights(
        model_id: impl Into<String>,
        vocab: Vec<String>,
        embedding: Array2<f32>,
        unembed: Array2<f32>,
        layers: Vec<GatedMlpLayer>,
        nonlinearity: Nonlinearity,
        max_context: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("model needs at least one layer".into()));
        }
        let d = embedding.ncols();
        if unembed.nrows() != d || unembed.ncols() != vocab.len() {
            return Err(Error::Model(format!(
                "unembed shape {:?} does not match d={d}, V={}",
                unembed.dim(),
                vocab.len()
            )));
        }
        if embedding.nrows() != vocab.len() {
            return Err(Error::Model(format!(
                "embedding rows {} != vocab size {}",
                embedding.nrows(),
                vocab.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let d_m = layers[0].down.nrows();
            if l.gate.dim() != (d, d_m) || l.up.dim() != (d, d_m) || l.down.dim() != (d_m, d) {
                return Err(Error::Model(format!(
                    "layer {} has inconsistent shapes (gate {:?}, up {:?}, down {:?})",
                    i + 1,
                    l.gate.dim(),
                    l.up.dim(),
                    l.down.dim()
                )));
            }
        }
        let mut token_ids = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if token_ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Model(format!("duplicate vocab word '{w}'")));
            }
        }
        for special in [UNK_TOKEN, EOS_TOKEN] {
            if !token_ids.contains_key(special) {
                return Err(Error::Model(format!(
                    "vocabulary must contain the '{special}' special token"
                )));
            }
        }
        Ok(TinyGatedModel {
            model_id: model_id.into(),
            vocab,
            token_ids,
            embedding,
            unembed,
            layers,
            nonlinearity,
            max_context,
        })
    }

    /// A fully random instance, for plumbing tests that need no structure.
    pub fn random(
        seed: u64,
        num_layers: usize,
        hidden_dim: usize,
        mlp_dim: usize,
        vocab_size: usize,
        max_context: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("valid stddev");
        let mut draw = |rows: usize, cols: usize, scale: f64| -> Array2<f32> {
            Array2::from_shape_fn((rows, cols), |_| (normal.sample(&mut rng) * scale) as f32)
        };
        let mut vocab = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        vocab.extend((0..vocab_size.saturating_sub(2)).map(|i| format!("w{i}")));
        let embedding = draw(vocab.len(), hidden_dim, 1.0);
        let unembed = draw(hidden_dim, vocab.len(), 1.0);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| GatedMlpLayer {
                gate: draw(hidden_dim, mlp_dim, scale),
                up: draw(hidden_dim, mlp_dim, scale),
                down: draw(mlp_dim, hidden_dim, scale),
            })
            .collect();
        TinyGatedModel::from_weights(
            format!("tiny-random-{seed}"),
            vocab,
            embedding,
            unembed,
            layers,
            Nonlinearity::Silu,
            max_context,
        )
    }

    /// Overrides the model id (adapter configs may name the model).
    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.model_id = id.into();
    }

    pub fn layers(&self) -> &[GatedMlpLayer] {
        &self.layers
    }

    pub fn embedding(&self) -> &Array2<f32> {
        &self.embedding
    }

    pub fn unembed(&self) -> &Array2<f32> {
        &self.unembed
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.token_ids.get(word).copied()
    }
}

impl GatedDecoder for TinyGatedModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn hidden_dim(&self) -> usize {
        self.embedding.ncols()
    }

    fn mlp_dim(&self) -> usize {
        self.layers[0].down.nrows()
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let unk = self.token_ids[UNK_TOKEN];
        Ok(text
            .split_whitespace()
            .map(|w| self.token_ids.get(w).copied().unwrap_or(unk))
            .collect())
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| {
                self.vocab
                    .get(t as usize)
                    .map(|s| s.as_str())
                    .unwrap_or(UNK_TOKEN)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn eos_token(&self) -> Option<u32> {
        self.token_ids.get(EOS_TOKEN).copied()
    }

    fn forward_last(
        &self,
        tokens: &[u32],
        mask: Option<&DeactivationMask>,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("empty token sequence".into()));
        }
        if tokens.len() > self.max_context {
            return Err(Error::ContextOverflow {
                needed: tokens.len(),
                limit: self.max_context,
            });
        }
        let last = *tokens.last().expect("non-empty") as usize;
        if last >= self.vocab.len() {
            return Err(Error::Model(format!(
                "token id {last} out of vocabulary (size {})",
                self.vocab.len()
            )));
        }
        let d = self.hidden_dim();
        let mut h = self.embedding.row(last).to_owned();
        let mut traces = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            // Attention stub contributes nothing; pre-MLP residual is h^{l-1}.
            let attention_out = Array1::<f32>::zeros(d);
            let pre_mlp = &h + &attention_out;
            let mut alpha = layer.activation(&pre_mlp, self.nonlinearity);
            if let Some(m) = mask {
                for idx in m.indices_for_layer(i + 1) {
                    alpha[idx] = 0.0;
                }
            }
            let hidden = &pre_mlp + &layer.mlp_output(&alpha);
            traces.push(LayerTrace {
                pre_mlp,
                attention_out,
                mlp_activation: alpha,
                hidden_state: hidden.clone(),
            });
            h = hidden;
        }
        let logits = h.dot(&self.unembed);
        Ok(ForwardPass {
            layers: traces,
            logits,
        })
    }

    fn value_vectors(&self) -> Result<ValueVectorTable> {
        ValueVectorTable::new(
            self.model_id.clone(),
            self.layers.iter().map(|l| l.down.clone()).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_capture, generate, CaptureInput, MaskProvenance};
    use crate::store::{CaptureKind, NeuronId};
    use std::collections::BTreeSet;

    fn model() -> TinyGatedModel {
        TinyGatedModel::random(11, 3, 8, 16, 20, 32).unwrap()
    }

    #[test]
    fn unmasked_equals_empty_mask() {
        let m = model();
        let tokens = m.tokenize("w0 w3 w5").unwrap();
        let a = m.forward_last(&tokens, None).unwrap();
        let empty = DeactivationMask::empty(MaskProvenance::Custom);
        let b = m.forward_last(&tokens, Some(&empty)).unwrap();
        for (ta, tb) in a.layers.iter().zip(b.layers.iter()) {
            for (x, y) in ta.hidden_state.iter().zip(tb.hidden_state.iter()) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn full_layer_mask_reduces_to_residual() {
        let m = model();
        let tokens = m.tokenize("w1").unwrap();
        let mask = DeactivationMask::new(
            (0..m.mlp_dim()).map(|i| NeuronId::new(2, i)),
            MaskProvenance::Custom,
            None,
        );
        let pass = m.forward_last(&tokens, Some(&mask)).unwrap();
        let t = &pass.layers[1];
        for (h, p) in t.hidden_state.iter().zip(t.pre_mlp.iter()) {
            assert_eq!(h, p, "with the whole layer masked, h^l must equal pre_mlp");
        }
        assert!(t.mlp_activation.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_neuron_mask_shifts_by_alpha_v() {
        let m = model();
        let tokens = m.tokenize("w2 w7").unwrap();
        let base = m.forward_last(&tokens, None).unwrap();
        let layer = 2usize;
        let neuron = 5usize;
        let mask = DeactivationMask::new(
            [NeuronId::new(layer, neuron)],
            MaskProvenance::Custom,
            None,
        );
        let masked = m.forward_last(&tokens, Some(&mask)).unwrap();
        let values = m.value_vectors().unwrap();
        let alpha = base.layers[layer - 1].mlp_activation[neuron];
        let v = values.row(NeuronId::new(layer, neuron)).unwrap();
        for ((hb, hm), vi) in base.layers[layer - 1]
            .hidden_state
            .iter()
            .zip(masked.layers[layer - 1].hidden_state.iter())
            .zip(v.iter())
        {
            let expected = hb - alpha * vi;
            assert!(
                (hm - expected).abs() <= 1e-4,
                "masked hidden must differ by exactly -alpha*v (got {hm}, want {expected})"
            );
        }
    }

    #[test]
    fn mask_out_of_range_fails_before_forward() {
        let m = model();
        let mask = DeactivationMask::new(
            [NeuronId::new(1, 999)],
            MaskProvenance::Custom,
            None,
        );
        let inputs = vec![CaptureInput {
            sample_id: "s".into(),
            language: "en".into(),
            tokens: m.tokenize("w0").unwrap(),
        }];
        let kinds = BTreeSet::from([CaptureKind::HiddenState]);
        assert!(forward_capture(&m, &inputs, &kinds, Some(&mask)).is_err());
    }

    #[test]
    fn empty_batch_gives_empty_stream() {
        let m = model();
        let kinds = BTreeSet::from([CaptureKind::HiddenState]);
        let records = forward_capture(&m, &[], &kinds, None).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = model();
        let prompt = m.tokenize("w0 w1").unwrap();
        let a = generate(&m, &prompt, None, 8).unwrap();
        let b = generate(&m, &prompt, None, 8).unwrap();
        assert_eq!(a, b);
        let empty = DeactivationMask::empty(MaskProvenance::Custom);
        let c = generate(&m, &prompt, Some(&empty), 8).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn context_overflow_names_the_limit() {
        let m = model();
        let prompt: Vec<u32> = m.tokenize("w0").unwrap();
        let err = generate(&m, &prompt, None, 40).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }
}
