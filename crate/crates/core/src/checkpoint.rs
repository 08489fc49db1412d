//! `LAMO` binary checkpoint container.
//!
//! ```text
//! offset 0   magic      b"LAMO"
//! offset 4   version    u32 little-endian (= 1)
//! offset 8   header_len u64 little-endian
//! offset 16  header     UTF-8 JSON, header_len bytes
//!            zero padding up to the next multiple of 64 (payload start)
//! payload    raw little-endian f32 tensors; each tensor's `offset` is
//!            relative to the payload start and a multiple of 64
//! ```
//!
//! The header carries the transformer config, the tensor table
//! (`name`, `dtype` = `"f32"`, `shape`, `offset`), the total payload size,
//! and optional adapter (`rank`, `alpha`), tokenizer and model-card blobs.
//! Adapter tensors live under the `adapters/` name prefix.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::TransformerConfig;
use crate::corpus::TokenizerDesc;
use crate::error::{CheckpointError, LamoError, Result};
use crate::lora::{Adapter, AdapterMeta, AdapterSet, ADAPTER_PREFIX};
use crate::params::WeightStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAMO";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TransformerConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<AdapterMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<TokenizerDesc>,
    /// Free-form model description (decision-model config, seeds, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<serde_json::Value>,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub weights: WeightStore<f32>,
    pub adapters: AdapterSet<f32>,
    pub tokenizer: Option<TokenizerDesc>,
    pub model: Option<serde_json::Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn new(config: TransformerConfig, weights: WeightStore<f32>) -> Self {
        Checkpoint { config, weights, adapters: AdapterSet::new(), tokenizer: None, model: None }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut all: Vec<(String, &Tensor<f32>)> =
            self.weights.iter().map(|(n, t)| (n.to_string(), t)).collect();
        all.extend(self.adapters.named_tensors());
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let mut entries = Vec::with_capacity(named.len());
        let mut offset = 0usize;
        for (name, t) in &named {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
            });
            offset = align_up(offset + t.numel() * 4);
        }
        let header = Header {
            config: self.config.clone(),
            tensors: entries,
            payload_bytes: offset as u64,
            adapters: self.adapters.meta(),
            tokenizer: self.tokenizer.clone(),
            model: self.model.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let payload_start = align_up(16 + header_json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.resize(payload_start, 0);
        for ((_, t), e) in named.iter().zip(&header.tensors) {
            out.resize(payload_start + e.offset as usize, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
        let avail = bytes.len() as u64;
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated { needed: n as u64, available: avail })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        need(16)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16usize
            .checked_add(usize::try_from(header_len).map_err(|_| CheckpointError::Header("header too large".into()))?)
            .ok_or_else(|| CheckpointError::Header("header too large".into()))?;
        need(header_end)?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload_start = align_up(header_end);
        let payload_end = payload_start
            .checked_add(header.payload_bytes as usize)
            .ok_or_else(|| CheckpointError::ShapeTable("payload size overflows".into()))?;
        need(payload_end)?;

        let mut names = BTreeSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::ShapeTable(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(CheckpointError::ShapeTable(format!("duplicate tensor {}", e.name)));
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(CheckpointError::ShapeTable(format!("{}: offset {} not {ALIGN}-aligned", e.name, e.offset)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| CheckpointError::ShapeTable(format!("{}: shape overflows", e.name)))?;
            let end = e.offset + numel * 4;
            if end > header.payload_bytes {
                return Err(CheckpointError::ShapeTable(format!(
                    "{}: bytes {}..{end} exceed payload of {}",
                    e.name, e.offset, header.payload_bytes
                )));
            }
            spans.push((e.offset, end, e.name.as_str()));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(CheckpointError::ShapeTable(format!("{} overlaps {}", pair[0].2, pair[1].2)));
            }
        }
        let expected: std::collections::BTreeMap<String, Vec<usize>> =
            header.config.tensor_shapes().into_iter().collect();

        let mut weights = WeightStore::new();
        let mut adapter_parts: std::collections::BTreeMap<String, [Option<Tensor<f32>>; 2]> = Default::default();
        for e in &header.tensors {
            if let Some(shape) = expected.get(&e.name) {
                if shape != &e.shape {
                    return Err(CheckpointError::ShapeTable(format!(
                        "{}: shape {:?} disagrees with config {:?}",
                        e.name, e.shape, shape
                    )));
                }
            }
            let start = payload_start + e.offset as usize;
            let numel: usize = e.shape.iter().product();
            let data = bytes[start..start + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::ShapeTable(err.to_string()))?;
            if let Some(rest) = e.name.strip_prefix(ADAPTER_PREFIX) {
                let (target, which) = rest
                    .rsplit_once('/')
                    .ok_or_else(|| CheckpointError::ShapeTable(format!("bad adapter name {}", e.name)))?;
                let slot = match which {
                    "A" => 0,
                    "B" => 1,
                    _ => return Err(CheckpointError::ShapeTable(format!("bad adapter name {}", e.name))),
                };
                adapter_parts.entry(target.to_string()).or_default()[slot] = Some(t);
            } else {
                weights.insert(e.name.clone(), t).map_err(|err| CheckpointError::ShapeTable(err.to_string()))?;
            }
        }
        let mut adapters = AdapterSet::new();
        if !adapter_parts.is_empty() {
            let meta = header
                .adapters
                .ok_or_else(|| CheckpointError::Header("adapter tensors without rank/alpha".into()))?;
            for (target, [a, b]) in adapter_parts {
                let (Some(a), Some(b)) = (a, b) else {
                    return Err(CheckpointError::ShapeTable(format!("adapter {target} lacks A or B")));
                };
                let adapter = Adapter { a, b, rank: meta.rank, alpha: meta.alpha };
                adapters.insert(target, adapter).map_err(|err| CheckpointError::ShapeTable(err.to_string()))?;
            }
        }
        Ok(Checkpoint { config: header.config, weights, adapters, tokenizer: header.tokenizer, model: header.model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(LamoError::from)
    }
}

pub fn save_checkpoint(weights: &WeightStore<f32>, config: &TransformerConfig, path: &Path) -> Result<()> {
    Checkpoint::new(config.clone(), weights.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(WeightStore<f32>, TransformerConfig)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.weights, ck.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_weights;

    fn config() -> TransformerConfig {
        TransformerConfig { n_layers: 1, n_heads: 2, d_model: 4, d_ff: 8, vocab_size: 5, max_positions: 6, dropout: 0.0 }
    }

    fn bytes() -> Vec<u8> {
        let w = init_weights(&config(), 3, true).unwrap();
        Checkpoint::new(config(), w).to_bytes().unwrap()
    }

    #[test]
    fn layout_is_aligned() {
        let b = bytes();
        assert_eq!(&b[..4], b"LAMO");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&b[16..16 + hl]).unwrap();
        assert!(header.tensors.iter().all(|t| t.offset % 64 == 0 && t.dtype == "f32"));
        assert_eq!(b.len(), align_up(16 + hl) + header.payload_bytes as usize);
    }

    #[test]
    fn distinct_error_codes() {
        let good = bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let truncated = &good[..good.len() - 3];
        let errs = [
            Checkpoint::from_bytes(&bad_magic).unwrap_err(),
            Checkpoint::from_bytes(&bad_version).unwrap_err(),
            Checkpoint::from_bytes(truncated).unwrap_err(),
        ];
        assert!(matches!(errs[0], CheckpointError::BadMagic(_)));
        assert!(matches!(errs[1], CheckpointError::VersionMismatch { found: 9, .. }));
        assert!(matches!(errs[2], CheckpointError::Truncated { .. }));
        let codes: BTreeSet<u32> = errs.iter().map(CheckpointError::code).collect();
        assert_eq!(codes.len(), 3);
        assert!(matches!(Checkpoint::from_bytes(&good[..10]), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn shape_table_inconsistencies() {
        let ck = Checkpoint::new(config(), init_weights(&config(), 3, true).unwrap());
        let rebuild = |edit: &dyn Fn(&mut Header)| {
            let b = ck.to_bytes().unwrap();
            let hl = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
            let mut header: Header = serde_json::from_slice(&b[16..16 + hl]).unwrap();
            let payload = b[align_up(16 + hl)..].to_vec();
            edit(&mut header);
            let hj = serde_json::to_vec(&header).unwrap();
            let mut out = Vec::new();
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
            out.extend_from_slice(&hj);
            out.resize(align_up(out.len()), 0);
            out.extend_from_slice(&payload);
            Checkpoint::from_bytes(&out)
        };
        assert!(rebuild(&|_| {}).is_ok());
        let cases: [&dyn Fn(&mut Header); 5] = [
            &|h| h.tensors[1].offset = h.tensors[0].offset,
            &|h| h.tensors[0].offset += 4,
            &|h| h.tensors[0].shape = vec![1_000_000],
            &|h| h.tensors[0].dtype = "f16".into(),
            &|h| {
                let i = h.tensors.iter().position(|t| t.name == "wte").unwrap();
                h.tensors[i].shape = vec![4, 5];
            },
        ];
        for edit in cases {
            assert!(matches!(rebuild(edit), Err(CheckpointError::ShapeTable(_))));
        }
    }
}
