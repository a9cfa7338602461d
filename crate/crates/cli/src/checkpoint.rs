//! Self-describing checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TIUE" (4 bytes)
//! format version u32 (= 1)
//! header length u64
//! JSON header (header-length bytes)
//! raw tensor payload, IEEE-754 little-endian, in table order
//! ```
//!
//! The header carries the model config, schedule parameters, an
//! optional sampler plan, the tensor table (name, dtype, shape, byte
//! offset, byte length), and training metadata. Offsets are relative to
//! the payload start, contiguous and non-overlapping; the loader
//! verifies magic, version, offsets, and total length before reading
//! any tensor, and a truncated or inconsistent file is rejected without
//! returning partial state.
//!
//! One format serves teacher, student, and LoRA tensors: raw weights
//! live under `model.<name>`, EMA shadows under `ema.<name>`, adapters
//! under `lora.<target>.A` / `lora.<target>.B`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiue_core::distill::TrainedModel;
use tiue_core::schedule::{SamplerPlan, ScheduleParams};
use tiue_core::tensor::{Dtype, ParamSet, Tensor};
use tiue_core::unet::UNetConfig;

pub const MAGIC: &[u8; 4] = b"TIUE";
pub const FORMAT_VERSION: u32 = 1;

/// Errors produced by checkpoint persistence.
#[derive(Debug)]
pub enum CkptError {
    /// Structural violation: bad magic, offsets, lengths, or header.
    Corrupt(String),
    VersionUnsupported(u32),
    Io(std::io::Error),
    Model(tiue_core::Error),
}

impl fmt::Display for CkptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CkptError::Corrupt(d) => write!(f, "corrupt checkpoint: {d}"),
            CkptError::VersionUnsupported(v) => write!(f, "unsupported checkpoint version {v}"),
            CkptError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CkptError::Model(e) => write!(f, "checkpoint model: {e}"),
        }
    }
}

impl std::error::Error for CkptError {}

impl From<std::io::Error> for CkptError {
    fn from(e: std::io::Error) -> Self {
        CkptError::Io(e)
    }
}

impl From<tiue_core::Error> for CkptError {
    fn from(e: tiue_core::Error) -> Self {
        CkptError::Model(e)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: u64,
    pub config_hash: String,
    pub ema: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub model_config: UNetConfig,
    pub schedule_params: ScheduleParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_plan: Option<SamplerPlan>,
    pub tensor_table: Vec<TensorEntry>,
    pub training_meta: TrainingMeta,
}

/// Everything a checkpoint stores, in memory.
pub struct Checkpoint {
    pub model: TrainedModel,
    pub plan: Option<SamplerPlan>,
    pub meta: TrainingMeta,
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CkptError> {
    let mut table = Vec::new();
    let mut payload = Vec::new();
    let push = |name: String, t: &Tensor<f32>, table: &mut Vec<TensorEntry>, payload: &mut Vec<u8>| {
        let bytes = tensor_bytes(t);
        table.push(TensorEntry {
            name,
            dtype: Dtype::F32,
            shape: t.shape().to_vec(),
            byte_offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    };
    for (name, t) in ckpt.model.raw.iter() {
        push(format!("model.{name}"), t, &mut table, &mut payload);
    }
    for (name, t) in ckpt.model.ema.iter() {
        push(format!("ema.{name}"), t, &mut table, &mut payload);
    }
    let header = Header {
        model_config: ckpt.model.config.clone(),
        schedule_params: ckpt.model.schedule.clone(),
        sampler_plan: ckpt.plan.clone(),
        tensor_table: table,
        training_meta: ckpt.meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CkptError::Corrupt(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Parses and validates the header; returns it plus the payload slice
/// offset.
fn read_header(bytes: &[u8]) -> Result<(Header, usize), CkptError> {
    if bytes.len() < 16 {
        return Err(CkptError::Corrupt("file shorter than the fixed header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CkptError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CkptError::VersionUnsupported(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| CkptError::Corrupt("header length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(CkptError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CkptError::Corrupt(format!("header json: {e}")))?;

    // offsets must be contiguous, non-overlapping, and sized for the dtype
    let mut expect = 0u64;
    for e in &header.tensor_table {
        if e.byte_offset != expect {
            return Err(CkptError::Corrupt(format!(
                "tensor {} at offset {}, expected {expect} (offsets must be contiguous)",
                e.name, e.byte_offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != (numel * e.dtype.size_bytes()) as u64 {
            return Err(CkptError::Corrupt(format!(
                "tensor {}: byte length {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        expect = expect
            .checked_add(e.byte_len)
            .ok_or_else(|| CkptError::Corrupt("payload length overflow".into()))?;
    }
    let total = header_end as u64 + expect;
    if bytes.len() as u64 != total {
        return Err(CkptError::Corrupt(format!(
            "file length {} does not match header + payload {total}",
            bytes.len()
        )));
    }
    Ok((header, header_end))
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes = fs::read(path)?;
    let (header, payload_start) = read_header(&bytes)?;
    let payload = &bytes[payload_start..];
    let mut raw = ParamSet::new();
    let mut ema = ParamSet::new();
    for e in &header.tensor_table {
        if e.dtype != Dtype::F32 {
            return Err(CkptError::Corrupt(format!(
                "tensor {}: only f32 payloads are stored by this build",
                e.name
            )));
        }
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&e.shape, data)?;
        if let Some(name) = e.name.strip_prefix("model.") {
            raw.insert(name, tensor)?;
        } else if let Some(name) = e.name.strip_prefix("ema.") {
            ema.insert(name, tensor)?;
        } else {
            return Err(CkptError::Corrupt(format!("unknown tensor namespace: {}", e.name)));
        }
    }
    let model = TrainedModel {
        config: header.model_config.clone(),
        schedule: header.schedule_params.clone(),
        raw,
        ema,
    };
    // structural validation against the config
    model.ema_model()?;
    model.raw_model()?;
    Ok(Checkpoint { model, plan: header.sampler_plan, meta: header.training_meta })
}

/// Hex SHA-256 of a canonical config serialization, recorded in
/// checkpoint metadata.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
