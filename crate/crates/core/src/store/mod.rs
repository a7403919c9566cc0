//! Data model for captured activations, value vectors, centroids, neuron
//! sets, and diagnostic curves, plus the run-file format they live in.
//!
//! A capture run is a single self-describing file: magic bytes `XFRN1\n`,
//! a UTF-8 JSON header terminated by one `0x00` byte, then contiguous
//! little-endian f32 tensor blocks addressed by the header's index. Value
//! vectors (rows of each layer's down projection) are stored once per model
//! in a companion file with the same framing.
//!
//! One writer per run file; any number of concurrent readers once the file
//! is finished. Loaded slices are plain owned matrices.

mod file;

pub use file::{write_capture_run, CaptureWriter, RunHandle};

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tensor of a forward pass a record carries.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum CaptureKind {
    /// Post-layer residual `h^l` (final token).
    HiddenState,
    /// Residual immediately before the MLP, `h^{l-1} + A^l`.
    PreMlp,
    /// Self-attention output `A^l`.
    AttentionOut,
    /// Gated MLP activation vector `alpha^l` (post elementwise product).
    MlpActivation,
}

impl CaptureKind {
    pub const ALL: [CaptureKind; 4] = [
        CaptureKind::HiddenState,
        CaptureKind::PreMlp,
        CaptureKind::AttentionOut,
        CaptureKind::MlpActivation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptureKind::HiddenState => "hidden_state",
            CaptureKind::PreMlp => "pre_mlp",
            CaptureKind::AttentionOut => "attention_out",
            CaptureKind::MlpActivation => "mlp_activation",
        }
    }
}

impl fmt::Display for CaptureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

/// Shape contract for one capture run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub dtype: Dtype,
    pub capture_kinds: BTreeSet<CaptureKind>,
}

impl ModelManifest {
    pub fn new(
        model_id: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        mlp_dim: usize,
        capture_kinds: BTreeSet<CaptureKind>,
    ) -> Result<Self> {
        let m = ModelManifest {
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            mlp_dim,
            dtype: Dtype::F32,
            capture_kinds,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::InvalidArgument(
                "hidden_dim and mlp_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Expected vector length for a capture kind.
    pub fn dim_of(&self, kind: CaptureKind) -> usize {
        match kind {
            CaptureKind::MlpActivation => self.mlp_dim,
            _ => self.hidden_dim,
        }
    }

    /// Total neuron count `L * d_m`, reported with every detection result.
    pub fn neuron_population(&self) -> usize {
        self.num_layers * self.mlp_dim
    }
}

/// Per-(sample, layer) capture for the final token of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: String,
    pub language: String,
    /// 1-based layer index.
    pub layer: usize,
    pub hidden_state: Option<Vec<f32>>,
    pub pre_mlp: Option<Vec<f32>>,
    pub attention_out: Option<Vec<f32>>,
    pub mlp_activation: Option<Vec<f32>>,
}

impl ActivationRecord {
    pub fn vector(&self, kind: CaptureKind) -> Option<&[f32]> {
        match kind {
            CaptureKind::HiddenState => self.hidden_state.as_deref(),
            CaptureKind::PreMlp => self.pre_mlp.as_deref(),
            CaptureKind::AttentionOut => self.attention_out.as_deref(),
            CaptureKind::MlpActivation => self.mlp_activation.as_deref(),
        }
    }

    /// Checks layer range and that exactly the manifest's kinds are present
    /// with the declared dimensions.
    pub fn validate(&self, manifest: &ModelManifest) -> Result<()> {
        if self.layer < 1 || self.layer > manifest.num_layers {
            return Err(Error::LayerRange {
                layer: self.layer,
                num_layers: manifest.num_layers,
            });
        }
        for kind in CaptureKind::ALL {
            let declared = manifest.capture_kinds.contains(&kind);
            match (self.vector(kind), declared) {
                (Some(v), true) => {
                    let want = manifest.dim_of(kind);
                    if v.len() != want {
                        return Err(Error::Dimension {
                            sample_id: self.sample_id.clone(),
                            detail: format!(
                                "{kind} has length {} but manifest declares {want}",
                                v.len()
                            ),
                        });
                    }
                }
                (None, true) => {
                    return Err(Error::Dimension {
                        sample_id: self.sample_id.clone(),
                        detail: format!("missing declared capture kind {kind}"),
                    });
                }
                (Some(_), false) => {
                    return Err(Error::Dimension {
                        sample_id: self.sample_id.clone(),
                        detail: format!("carries undeclared capture kind {kind}"),
                    });
                }
                (None, false) => {}
            }
        }
        Ok(())
    }
}

/// (layer, within-layer index) identity of one MLP neuron.
///
/// Layers are 1-based, neuron indices 0-based in `[0, d_m)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        NeuronId { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}N{}", self.layer, self.index)
    }
}

/// Which latent space a centroid or score targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceTag {
    Language { code: String },
    Shared { en: String, l2: String },
}

/// Per-layer mean hidden state for a language or for the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCentroid {
    pub layer: usize,
    pub space: SpaceTag,
    pub vector: Array1<f64>,
    pub sample_count: usize,
}

/// One ranked row of a detection result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScoreRow {
    pub neuron: NeuronId,
    /// Mean of (neuron score - layer score); `None` when every sample was
    /// excluded as numerically zero, which ranks last.
    pub score: Option<f64>,
    /// 1-based rank within the detection run, descending by score.
    pub rank: usize,
}

/// Rows of each layer's down projection, constant per model.
#[derive(Debug, Clone)]
pub struct ValueVectorTable {
    model_id: String,
    /// `layers[l-1]` is the `d_m x d` matrix whose row `i` is `v_i^l`.
    layers: Vec<Array2<f32>>,
}

impl ValueVectorTable {
    pub fn new(model_id: impl Into<String>, layers: Vec<Array2<f32>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "value table needs at least one layer".into(),
            ));
        }
        let shape = layers[0].dim();
        for (i, m) in layers.iter().enumerate() {
            if m.dim() != shape {
                return Err(Error::Shape(format!(
                    "value matrix for layer {} has shape {:?}, expected {:?}",
                    i + 1,
                    m.dim(),
                    shape
                )));
            }
        }
        Ok(ValueVectorTable {
            model_id: model_id.into(),
            layers,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn mlp_dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    /// The `d_m x d` value matrix of a 1-based layer.
    pub fn layer(&self, layer: usize) -> Result<&Array2<f32>> {
        self.layers.get(layer.wrapping_sub(1)).ok_or(Error::LayerRange {
            layer,
            num_layers: self.layers.len(),
        })
    }

    /// The value vector `v_i^l` of one neuron.
    pub fn row(&self, id: NeuronId) -> Result<ndarray::ArrayView1<'_, f32>> {
        let m = self.layer(id.layer)?;
        if id.index >= m.nrows() {
            return Err(Error::InvalidArgument(format!(
                "neuron index {} out of range [0, {})",
                id.index,
                m.nrows()
            )));
        }
        Ok(m.row(id.index))
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        file::write_values_file(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        file::load_values_file(path.as_ref())
    }
}
