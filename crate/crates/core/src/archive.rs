//! Tensor container format shared by weight files, steering-direction
//! files and dataset payloads.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "CFW1\0\0\0\0"
//! 4 bytes   header length (u32 LE)
//! N bytes   header JSON: {"metadata": ..., "tensors": {name: {shape, offset}}}
//! M bytes   payload: concatenated f32 LE values, tensors in name order
//! 4 bytes   CRC-32 of the payload region (u32 LE)
//! ```
//!
//! Offsets are byte offsets into the payload region. Tensor names are kept
//! in a `BTreeMap` so serialization is deterministic and save -> load ->
//! save round-trips are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    HeadMode, HeadParams, HeadWeights, LayerWeights, MlpWeights, Model, ModelConfig, NormParams,
    WeightSet,
};

pub const MAGIC: &[u8; 8] = b"CFW1\0\0\0\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: BTreeMap<String, TensorRecord>,
}

/// A named collection of f32 tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub metadata: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorArchive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), (shape, data));
        Ok(())
    }

    pub fn insert_mat(&mut self, name: &str, mat: &Mat) -> Result<()> {
        self.insert(
            name,
            vec![mat.rows(), mat.cols()],
            mat.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn insert_vec(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.insert(name, vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn get_mat(&self, name: &str) -> Result<Mat> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 2 {
            return Err(Error::Format(format!(
                "tensor {name}: expected rank 2, found shape {shape:?}"
            )));
        }
        Mat::from_vec(shape[0], shape[1], data.iter().map(|&v| v as f64).collect())
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 1 {
            return Err(Error::Format(format!(
                "tensor {name}: expected rank 1, found shape {shape:?}"
            )));
        }
        Ok(data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = BTreeMap::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            records.insert(
                name.clone(),
                TensorRecord {
                    shape: shape.clone(),
                    offset: payload.len(),
                },
            );
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: records,
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad or missing archive magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start + 4 {
            return Err(Error::Format("archive truncated".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| Error::Format(format!("bad archive header: {e}")))?;
        let payload = &bytes[payload_start..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32(payload) != stored_crc {
            return Err(Error::Format("payload checksum mismatch".into()));
        }

        let mut tensors = BTreeMap::new();
        for (name, rec) in header.tensors {
            let n: usize = rec.shape.iter().product();
            let end = rec.offset + 4 * n;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor {name}: payload range out of bounds"
                )));
            }
            let data: Vec<f32> = payload[rec.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (rec.shape, data));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// CRC-32 (IEEE 802.3, reflected) of a byte slice.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = !0;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

// ---------------------------------------------------------------------------
// Weight archives
// ---------------------------------------------------------------------------

fn expected_tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embed.w".to_string(), "embed.b".to_string()];
    for l in 0..config.layers {
        for part in ["gamma", "beta"] {
            names.push(format!("layer{l}.ln1.{part}"));
            names.push(format!("layer{l}.ln2.{part}"));
        }
        for h in 0..config.heads_per_layer {
            for part in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
                names.push(format!("layer{l}.attn{h}.{part}"));
            }
        }
        for part in ["w1", "b1", "w2", "b2"] {
            names.push(format!("layer{l}.mlp.{part}"));
        }
    }
    names.push("final_norm.gamma".into());
    names.push("final_norm.beta".into());
    match config.head_mode {
        HeadMode::Classifier => names.push("head.classifier".into()),
        HeadMode::Contrastive => {
            names.push("head.proj".into());
            names.push("head.class_embed".into());
        }
    }
    names
}

/// Serialize a model (config in the metadata, parameters as tensors).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut archive = TensorArchive::new(serde_json::json!({
        "config": model.config,
    }));
    let w = &model.weights;
    archive.insert_mat("embed.w", &w.embed_w)?;
    archive.insert_vec("embed.b", &w.embed_b)?;
    for (l, layer) in w.layers.iter().enumerate() {
        archive.insert_vec(&format!("layer{l}.ln1.gamma"), &layer.ln1.gamma)?;
        archive.insert_vec(&format!("layer{l}.ln1.beta"), &layer.ln1.beta)?;
        archive.insert_vec(&format!("layer{l}.ln2.gamma"), &layer.ln2.gamma)?;
        archive.insert_vec(&format!("layer{l}.ln2.beta"), &layer.ln2.beta)?;
        for (h, head) in layer.heads.iter().enumerate() {
            let tag = format!("layer{l}.attn{h}");
            archive.insert_mat(&format!("{tag}.wq"), &head.w_q)?;
            archive.insert_vec(&format!("{tag}.bq"), &head.b_q)?;
            archive.insert_mat(&format!("{tag}.wk"), &head.w_k)?;
            archive.insert_vec(&format!("{tag}.bk"), &head.b_k)?;
            archive.insert_mat(&format!("{tag}.wv"), &head.w_v)?;
            archive.insert_vec(&format!("{tag}.bv"), &head.b_v)?;
            archive.insert_mat(&format!("{tag}.wo"), &head.w_o)?;
            archive.insert_vec(&format!("{tag}.bo"), &head.b_o)?;
        }
        archive.insert_mat(&format!("layer{l}.mlp.w1"), &layer.mlp.w1)?;
        archive.insert_vec(&format!("layer{l}.mlp.b1"), &layer.mlp.b1)?;
        archive.insert_mat(&format!("layer{l}.mlp.w2"), &layer.mlp.w2)?;
        archive.insert_vec(&format!("layer{l}.mlp.b2"), &layer.mlp.b2)?;
    }
    archive.insert_vec("final_norm.gamma", &w.final_norm.gamma)?;
    archive.insert_vec("final_norm.beta", &w.final_norm.beta)?;
    match &w.head {
        HeadParams::Classifier { weight } => archive.insert_mat("head.classifier", weight)?,
        HeadParams::Contrastive { proj, class_embed } => {
            archive.insert_mat("head.proj", proj)?;
            archive.insert_mat("head.class_embed", class_embed)?;
        }
    }
    archive.to_bytes()
}

/// Load a model, rejecting unknown tensors and validating every shape.
pub fn load_model(path: &Path) -> Result<Model> {
    let archive = TensorArchive::load(path)?;
    model_from_archive(&archive)
}

pub fn model_from_archive(archive: &TensorArchive) -> Result<Model> {
    let config: ModelConfig = serde_json::from_value(
        archive
            .metadata
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("weight archive missing config metadata".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad config metadata: {e}")))?;
    config.validate()?;

    // Strict tensor set: anything unknown is rejected by name.
    let expected = expected_tensor_names(&config);
    let expected_set: std::collections::BTreeSet<&str> =
        expected.iter().map(String::as_str).collect();
    for name in archive.names() {
        if !expected_set.contains(name) {
            return Err(Error::Format(format!("unknown tensor {name}")));
        }
    }

    let layers = (0..config.layers)
        .map(|l| {
            let heads = (0..config.heads_per_layer)
                .map(|h| {
                    let tag = format!("layer{l}.attn{h}");
                    Ok(HeadWeights {
                        w_q: archive.get_mat(&format!("{tag}.wq"))?,
                        b_q: archive.get_vec(&format!("{tag}.bq"))?,
                        w_k: archive.get_mat(&format!("{tag}.wk"))?,
                        b_k: archive.get_vec(&format!("{tag}.bk"))?,
                        w_v: archive.get_mat(&format!("{tag}.wv"))?,
                        b_v: archive.get_vec(&format!("{tag}.bv"))?,
                        w_o: archive.get_mat(&format!("{tag}.wo"))?,
                        b_o: archive.get_vec(&format!("{tag}.bo"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerWeights {
                ln1: NormParams {
                    gamma: archive.get_vec(&format!("layer{l}.ln1.gamma"))?,
                    beta: archive.get_vec(&format!("layer{l}.ln1.beta"))?,
                },
                heads,
                ln2: NormParams {
                    gamma: archive.get_vec(&format!("layer{l}.ln2.gamma"))?,
                    beta: archive.get_vec(&format!("layer{l}.ln2.beta"))?,
                },
                mlp: MlpWeights {
                    w1: archive.get_mat(&format!("layer{l}.mlp.w1"))?,
                    b1: archive.get_vec(&format!("layer{l}.mlp.b1"))?,
                    w2: archive.get_mat(&format!("layer{l}.mlp.w2"))?,
                    b2: archive.get_vec(&format!("layer{l}.mlp.b2"))?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let head = match config.head_mode {
        HeadMode::Classifier => HeadParams::Classifier {
            weight: archive.get_mat("head.classifier")?,
        },
        HeadMode::Contrastive => HeadParams::Contrastive {
            proj: archive.get_mat("head.proj")?,
            class_embed: archive.get_mat("head.class_embed")?,
        },
    };

    Model::new(
        config,
        WeightSet {
            embed_w: archive.get_mat("embed.w")?,
            embed_b: archive.get_vec("embed.b")?,
            layers,
            final_norm: NormParams {
                gamma: archive.get_vec("final_norm.gamma")?,
                beta: archive.get_vec("final_norm.beta")?,
            },
            head,
        },
    )
}
