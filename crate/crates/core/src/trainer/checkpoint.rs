//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "JBRT"  u32 version  u32 header_len  header_len bytes of JSON
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 dtype (0 f32, 1 f64), u8 rank,
//!             rank × u64 extents, raw values
//! ```
//!
//! The header holds the model config, step, seed and sampler positions.
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{Stage, TrainConfig};
use crate::encoder::{EncoderState, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JBRT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub stage: Option<Stage>,
    /// Optimizer updates completed in `stage`.
    pub step: u64,
    pub seed: u64,
    /// Position of the training RNG, as a decimal string.
    #[serde(default)]
    pub rng_word_pos: String,
    /// Sampler cursors for the stage's data.
    #[serde(default)]
    pub data_state: serde_json::Value,
    #[serde(default)]
    pub vocab_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub state: EncoderState<T>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A weights-only checkpoint.
    pub fn from_state(state: EncoderState<T>, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                model: state.config.clone(),
                train: None,
                stage: None,
                step: 0,
                seed,
                rng_word_pos: String::new(),
                data_state: serde_json::Value::Null,
                vocab_fingerprint: None,
            },
            state,
            optimizer: None,
        }
    }
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE as u8);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        v.write_le(buf);
    }
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    if ckpt.header.model != ckpt.state.config {
        return Err(Error::Checkpoint("header config differs from the weights' config".into()));
    }
    let header = serde_json::to_vec(&ckpt.header)?;
    let params = ckpt.state.named_parameters();
    let mut tensors: Vec<(String, Vec<usize>, &[T])> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data()))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for ((n, t), mom) in params.iter().zip(moments) {
                tensors.push((format!("adam.{kind}.{n}"), t.shape().to_vec(), mom));
            }
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        put_tensor(&mut buf, name, shape, data)?;
    }
    Ok(buf)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = ByteReader::new(&bytes, Error::Checkpoint);
    parse_header(&mut r)
}

fn parse_header(r: &mut ByteReader<'_>) -> Result<CheckpointHeader> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.fail("bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes, Error::Checkpoint);
    let header = parse_header(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let dtype = DType::from_byte(r.u8()?).ok_or_else(|| r.fail(format!("unknown dtype for `{name}`")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f64::from(f32::read_le(c)))).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if tensors.insert(name.clone(), t.trainable()).is_some() {
            return Err(r.fail(format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;

    let mut state = EncoderState::<T>::zeroed(header.model.clone())?;
    let mut names = Vec::new();
    for (name, slot) in state.named_parameters_mut() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        names.push(name);
    }
    let optimizer = if tensors.contains_key(&format!("adam.m.{}", names[0])) {
        let mut take = |kind: &str| -> Result<Vec<Vec<T>>> {
            names
                .iter()
                .map(|n| {
                    tensors
                        .remove(&format!("adam.{kind}.{n}"))
                        .map(Tensor::into_data)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `adam.{kind}.{n}`")))
                })
                .collect()
        };
        let m = take("m")?;
        let v = take("v")?;
        Some(AdamW { m, v, t: header.step })
    } else {
        None
    };
    if let Some(extra) = tensors.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        header,
        state,
        optimizer,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
