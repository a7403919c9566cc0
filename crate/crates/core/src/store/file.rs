//! Run-file framing: magic, JSON header, 0x00 separator, f32 LE blocks.
//!
//! The header's index addresses blocks by byte offset relative to the start
//! of the tensor region. On open and on finish the index is checked to tile
//! the region exactly (no gaps, no overlaps).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActivationRecord, CaptureKind, ModelManifest, ValueVectorTable};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"XFRN1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockRef {
    /// Byte offset within the tensor region.
    offset: u64,
    /// Byte length; always a multiple of 4.
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordEntry {
    sample_id: String,
    language: String,
    layer: usize,
    tensors: BTreeMap<CaptureKind, BlockRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    layer: usize,
    block: BlockRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    /// Unix seconds at finish time; the only field allowed to differ between
    /// two writes of identical content.
    created_at: u64,
    manifest: ModelManifest,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    records: Vec<RecordEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layers: Vec<LayerEntry>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn f32s_to_le_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Every indexed block, sorted by offset, must cover `[0, region_len)`
/// exactly once.
fn check_tiling(blocks: &mut [BlockRef], region_len: u64, path: &Path) -> Result<()> {
    blocks.sort_by_key(|b| b.offset);
    let mut cursor = 0u64;
    for b in blocks.iter() {
        if b.len % 4 != 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("block length {} is not a multiple of 4", b.len),
            });
        }
        if b.offset != cursor {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "index does not tile the tensor region: expected offset {cursor}, found {}",
                    b.offset
                ),
            });
        }
        cursor += b.len;
    }
    if cursor != region_len {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!(
                "index covers {cursor} bytes but the tensor region holds {region_len}"
            ),
        });
    }
    Ok(())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("xfrn.tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all()
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn assemble(header: &Header, blob: &[u8]) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + header_json.len() + 1 + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_json);
    out.push(0x00);
    out.extend_from_slice(blob);
    Ok(out)
}

fn parse_framing(path: &Path) -> Result<(Header, u64)> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "bad magic bytes".into(),
        });
    }
    // Read until the 0x00 terminator; headers are small relative to blobs.
    let mut header_bytes = Vec::new();
    let mut buf = [0u8; 8192];
    let mut data_start = None;
    let mut consumed = MAGIC.len() as u64;
    'outer: loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        for (i, &b) in buf[..n].iter().enumerate() {
            if b == 0x00 {
                header_bytes.extend_from_slice(&buf[..i]);
                data_start = Some(consumed + i as u64 + 1);
                break 'outer;
            }
        }
        header_bytes.extend_from_slice(&buf[..n]);
        consumed += n as u64;
    }
    let data_start = data_start.ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        reason: "missing 0x00 header terminator".into(),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    Ok((header, data_start))
}

/// Streaming writer for one capture run. Single writer per file; nothing is
/// visible on disk until [`CaptureWriter::finish`] succeeds.
pub struct CaptureWriter {
    path: PathBuf,
    manifest: ModelManifest,
    entries: Vec<RecordEntry>,
    blob: Vec<u8>,
    seen: BTreeSet<(String, usize)>,
}

impl CaptureWriter {
    pub fn create(path: impl AsRef<Path>, manifest: ModelManifest) -> Result<Self> {
        manifest.validate()?;
        if manifest.capture_kinds.is_empty() {
            return Err(Error::InvalidArgument(
                "capture manifest declares no capture kinds".into(),
            ));
        }
        Ok(CaptureWriter {
            path: path.as_ref().to_path_buf(),
            manifest,
            entries: Vec::new(),
            blob: Vec::new(),
            seen: BTreeSet::new(),
        })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn append(&mut self, record: &ActivationRecord) -> Result<()> {
        record.validate(&self.manifest)?;
        let key = (record.sample_id.clone(), record.layer);
        if !self.seen.insert(key) {
            return Err(Error::Dimension {
                sample_id: record.sample_id.clone(),
                detail: format!("duplicate record for layer {}", record.layer),
            });
        }
        let mut tensors = BTreeMap::new();
        for kind in &self.manifest.capture_kinds {
            let v = record.vector(*kind).expect("validated above");
            let offset = self.blob.len() as u64;
            f32s_to_le_bytes(v, &mut self.blob);
            tensors.insert(
                *kind,
                BlockRef {
                    offset,
                    len: (v.len() * 4) as u64,
                },
            );
        }
        self.entries.push(RecordEntry {
            sample_id: record.sample_id.clone(),
            language: record.language.clone(),
            layer: record.layer,
            tensors,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<RunHandle> {
        let header = Header {
            format: "capture".into(),
            created_at: now_unix(),
            manifest: self.manifest,
            records: self.entries,
            layers: Vec::new(),
        };
        let mut blocks: Vec<BlockRef> = header
            .records
            .iter()
            .flat_map(|r| r.tensors.values().cloned())
            .collect();
        check_tiling(&mut blocks, self.blob.len() as u64, &self.path)?;
        let bytes = assemble(&header, &self.blob)?;
        write_atomically(&self.path, &bytes)?;
        RunHandle::open(&self.path)
    }
}

/// Writes a whole record stream as one run file.
pub fn write_capture_run<I>(
    manifest: ModelManifest,
    records: I,
    path: impl AsRef<Path>,
) -> Result<RunHandle>
where
    I: IntoIterator<Item = ActivationRecord>,
{
    let mut w = CaptureWriter::create(path, manifest)?;
    for r in records {
        w.append(&r)?;
    }
    w.finish()
}

/// Read handle over a finished run file. Cheap to clone conceptually; each
/// read opens the file independently, so shared use across threads is safe.
#[derive(Debug)]
pub struct RunHandle {
    path: PathBuf,
    header: Header,
    data_start: u64,
}

impl RunHandle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, data_start) = parse_framing(path)?;
        if header.format != "capture" {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("expected a capture file, found format '{}'", header.format),
            });
        }
        header.manifest.validate()?;
        let file_len = std::fs::metadata(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .len();
        let mut blocks: Vec<BlockRef> = header
            .records
            .iter()
            .flat_map(|r| r.tensors.values().cloned())
            .collect();
        check_tiling(&mut blocks, file_len - data_start, path)?;
        Ok(RunHandle {
            path: path.to_path_buf(),
            header,
            data_start,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.header.manifest
    }

    pub fn num_records(&self) -> usize {
        self.header.records.len()
    }

    pub fn languages(&self) -> BTreeSet<String> {
        self.header
            .records
            .iter()
            .map(|r| r.language.clone())
            .collect()
    }

    pub fn sample_ids(&self) -> BTreeSet<String> {
        self.header
            .records
            .iter()
            .map(|r| r.sample_id.clone())
            .collect()
    }

    fn read_block(&self, file: &mut File, block: &BlockRef) -> Result<Vec<f32>> {
        file.seek(SeekFrom::Start(self.data_start + block.offset))
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let mut bytes = vec![0u8; block.len as usize];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        Ok(le_bytes_to_f32s(&bytes))
    }

    fn check_layer_kind(&self, layer: usize, kind: CaptureKind) -> Result<()> {
        let m = &self.header.manifest;
        if layer < 1 || layer > m.num_layers {
            return Err(Error::LayerRange {
                layer,
                num_layers: m.num_layers,
            });
        }
        if !m.capture_kinds.contains(&kind) {
            return Err(Error::UnknownKind {
                kind: kind.to_string(),
                available: m
                    .capture_kinds
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            });
        }
        Ok(())
    }

    /// All matching records at (layer, kind), rows ordered by ascending
    /// sample_id, together with those ids.
    pub fn load_slice_with_ids(
        &self,
        layer: usize,
        kind: CaptureKind,
        language: Option<&str>,
    ) -> Result<(Vec<String>, Array2<f32>)> {
        self.check_layer_kind(layer, kind)?;
        let mut matches: Vec<&RecordEntry> = self
            .header
            .records
            .iter()
            .filter(|r| r.layer == layer && language.map_or(true, |l| r.language == l))
            .collect();
        matches.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let dim = self.header.manifest.dim_of(kind);
        let mut out = Array2::<f32>::zeros((matches.len(), dim));
        let mut ids = Vec::with_capacity(matches.len());
        let mut file =
            File::open(&self.path).map_err(|e| Error::io(self.path.display().to_string(), e))?;
        for (i, rec) in matches.iter().enumerate() {
            let block = rec.tensors.get(&kind).ok_or_else(|| Error::UnknownKind {
                kind: kind.to_string(),
                available: "record carries no such tensor".into(),
            })?;
            let values = self.read_block(&mut file, block)?;
            out.row_mut(i)
                .iter_mut()
                .zip(values.iter())
                .for_each(|(o, v)| *o = *v);
            ids.push(rec.sample_id.clone());
        }
        Ok((ids, out))
    }

    /// Matrix of all matching records at (layer, kind); see
    /// [`RunHandle::load_slice_with_ids`] for ordering.
    pub fn load_slice(
        &self,
        layer: usize,
        kind: CaptureKind,
        language: Option<&str>,
    ) -> Result<Array2<f32>> {
        self.load_slice_with_ids(layer, kind, language).map(|(_, m)| m)
    }

    /// f64 copy of a slice, for the diagnostics which compute in f64.
    pub fn load_slice_f64(
        &self,
        layer: usize,
        kind: CaptureKind,
        language: Option<&str>,
    ) -> Result<Array2<f64>> {
        Ok(self.load_slice(layer, kind, language)?.mapv(f64::from))
    }

    /// One full record by (sample_id, layer).
    pub fn load_record(&self, sample_id: &str, layer: usize) -> Result<ActivationRecord> {
        let entry = self
            .header
            .records
            .iter()
            .find(|r| r.sample_id == sample_id && r.layer == layer)
            .ok_or_else(|| Error::Format {
                path: self.path.display().to_string(),
                reason: format!("no record for sample '{sample_id}' at layer {layer}"),
            })?;
        let mut file =
            File::open(&self.path).map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let mut rec = ActivationRecord {
            sample_id: entry.sample_id.clone(),
            language: entry.language.clone(),
            layer: entry.layer,
            hidden_state: None,
            pre_mlp: None,
            attention_out: None,
            mlp_activation: None,
        };
        for (kind, block) in &entry.tensors {
            let values = self.read_block(&mut file, block)?;
            match kind {
                CaptureKind::HiddenState => rec.hidden_state = Some(values),
                CaptureKind::PreMlp => rec.pre_mlp = Some(values),
                CaptureKind::AttentionOut => rec.attention_out = Some(values),
                CaptureKind::MlpActivation => rec.mlp_activation = Some(values),
            }
        }
        Ok(rec)
    }
}

pub(super) fn write_values_file(table: &ValueVectorTable, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(table.num_layers());
    for l in 1..=table.num_layers() {
        let m = table.layer(l)?;
        let offset = blob.len() as u64;
        let flat: Vec<f32> = m.iter().copied().collect();
        f32s_to_le_bytes(&flat, &mut blob);
        layers.push(LayerEntry {
            layer: l,
            block: BlockRef {
                offset,
                len: (flat.len() * 4) as u64,
            },
        });
    }
    let header = Header {
        format: "values".into(),
        created_at: now_unix(),
        manifest: ModelManifest {
            model_id: table.model_id().to_string(),
            num_layers: table.num_layers().max(2),
            hidden_dim: table.hidden_dim(),
            mlp_dim: table.mlp_dim(),
            dtype: super::Dtype::F32,
            capture_kinds: BTreeSet::new(),
        },
        records: Vec::new(),
        layers,
    };
    let bytes = assemble(&header, &blob)?;
    write_atomically(path, &bytes)
}

pub(super) fn load_values_file(path: &Path) -> Result<ValueVectorTable> {
    let (header, data_start) = parse_framing(path)?;
    if header.format != "values" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected a values file, found format '{}'", header.format),
        });
    }
    let d = header.manifest.hidden_dim;
    let d_m = header.manifest.mlp_dim;
    let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut layers = vec![None; header.layers.len()];
    for entry in &header.layers {
        if entry.layer < 1 || entry.layer > header.layers.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("values layer index {} out of range", entry.layer),
            });
        }
        file.seek(SeekFrom::Start(data_start + entry.block.offset))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = vec![0u8; entry.block.len as usize];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let flat = le_bytes_to_f32s(&bytes);
        if flat.len() != d_m * d {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "values block for layer {} holds {} floats, expected {}",
                    entry.layer,
                    flat.len(),
                    d_m * d
                ),
            });
        }
        let m = Array2::from_shape_vec((d_m, d), flat).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        layers[entry.layer - 1] = Some(m);
    }
    let layers: Vec<Array2<f32>> = layers
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            m.ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing values block for layer {}", i + 1),
            })
        })
        .collect::<Result<_>>()?;
    ValueVectorTable::new(header.manifest.model_id, layers)
}
