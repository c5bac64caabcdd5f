//! Mean-pooled sentence embeddings and their on-disk formats.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, EncoderState};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{PaddedBatch, Tokenizer};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"JEV2";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    #[serde(rename = "id", default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(rename = "vector")]
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            source_id: None,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Options shared by every path that turns hidden states into embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingConfig {
    /// Average over `[CLS]`/`[SEP]` too. On by default.
    pub include_specials: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { include_specials: true }
    }
}

/// Positions that contribute to the mean.
pub fn pooling_mask(batch: &PaddedBatch, cfg: &PoolingConfig) -> Vec<u8> {
    batch
        .attention_mask
        .iter()
        .zip(&batch.word_ids)
        .map(|(&m, w)| u8::from(m == 1 && (cfg.include_specials || w.is_some())))
        .collect()
}

/// Average of the rows of `hidden` (`[L, H]`) where `mask` is 1.
pub fn mean_pool<T: Scalar>(hidden: &Tensor<T>, mask: &[u8]) -> Result<EmbeddingVector> {
    if hidden.rank() != 2 || hidden.shape()[0] != mask.len() {
        return Err(Error::shape(
            "mean_pool",
            format!("hidden {:?} with {} mask entries", hidden.shape(), mask.len()),
        ));
    }
    let h = hidden.shape()[1];
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(Error::Invalid("mean_pool: every position is masked".into()));
    }
    let mut acc = vec![0.0f64; h];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
        for (a, v) in acc.iter_mut().zip(hidden.row(i)) {
            *a += v.as_f64();
        }
    }
    Ok(EmbeddingVector::new(acc.iter().map(|a| (a / count as f64) as f32).collect()))
}

/// `u·v / (‖u‖‖v‖)`, accumulated in f64.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine_similarity of a zero vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Pooled embeddings `[batch, hidden]` on a tape, for training.
pub fn embed_on_tape<T: Scalar, R: Rng + ?Sized>(
    state: &EncoderState<T>,
    tape: &Tape<'_, T>,
    bound: &BoundEncoder,
    batch: &PaddedBatch,
    pooling: &PoolingConfig,
    rng: Option<&mut R>,
) -> Result<Var> {
    let hidden = state.forward_on_tape(tape, bound, batch, rng)?;
    tape.masked_mean(hidden, &pooling_mask(batch, pooling), batch.batch)
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub batch_size: usize,
    pub pooling: PoolingConfig,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            max_len: 512,
            batch_size: 16,
            pooling: PoolingConfig::default(),
        }
    }
}

/// Tokenize, run the encoder without dropout, and mean-pool each text.
/// Output order follows `texts`.
pub fn encode<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    texts: &[impl AsRef<str> + Sync],
    opts: &EncodeOptions,
) -> Result<Vec<EmbeddingVector>> {
    if tokenizer.vocab().len() != state.config.vocab_size {
        return Err(Error::Vocab(format!(
            "tokenizer has {} tokens but the model expects {}",
            tokenizer.vocab().len(),
            state.config.vocab_size
        )));
    }
    let chunks = texts
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| {
            let batch = tokenizer.tokenize_batch(chunk, opts.max_len)?;
            let tape = Tape::inference();
            let bound = state.bind(&tape);
            let pooled = embed_on_tape::<T, ChaCha8Rng>(state, &tape, &bound, &batch, &opts.pooling, None)?;
            let values = tape.value(pooled);
            let h = state.config.hidden;
            Ok(values
                .chunks(h)
                .map(|row| EmbeddingVector::new(row.iter().map(|v| v.as_f64() as f32).collect()))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn write_embeddings_bin(path: &Path, vectors: &[EmbeddingVector]) -> Result<()> {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    let mut buf = Vec::with_capacity(20 + vectors.len() * (dim * 4 + 8));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::EmbeddingFile(format!("mixed dimensions {} and {dim}", v.dim())));
        }
        let id = v.source_id.as_deref().unwrap_or("");
        let id_len = u16::try_from(id.len()).map_err(|_| Error::EmbeddingFile(format!("id too long: {id}")))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for x in &v.values {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_embeddings_bin(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = ByteReader::new(&bytes, Error::EmbeddingFile);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::EmbeddingFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(Error::EmbeddingFile(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::EmbeddingFile(format!("id is not UTF-8: {e}")))?
            .to_string();
        let values = r
            .take(dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        out.push(EmbeddingVector {
            source_id: (!id.is_empty()).then_some(id),
            values,
        });
    }
    r.finish()?;
    Ok(out)
}

/// One `{"id": ..., "vector": [...]}` object per line.
pub fn write_embeddings_jsonl(path: &Path, vectors: &[EmbeddingVector]) -> Result<()> {
    crate::io::write_jsonl(path, vectors)
}

pub fn read_embeddings_jsonl(path: &Path) -> Result<Vec<EmbeddingVector>> {
    crate::io::read_jsonl(path)
}
