//! JSON-lines record types for corpora, text pairs and triplets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::read_jsonl;

/// Negatives per triplet record.
pub const NUM_NEGATIVES: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    pub target: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.len() != NUM_NEGATIVES {
            return Err(Error::Invalid(format!(
                "expected {NUM_NEGATIVES} negatives, got {}",
                self.negatives.len()
            )));
        }
        Ok(())
    }
}

/// Clustering item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

/// Sentence pair with a gold similarity score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub sentence1: String,
    pub sentence2: String,
    pub score: f64,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_jsonl(path)
}

/// Reads a file of records with exactly the `required` object keys, so a
/// triplet file handed to the pair stage (or the reverse) fails on its first
/// record instead of deserializing loosely.
fn read_strict<R: serde::de::DeserializeOwned>(path: &Path, required: &[&str], kind: &str) -> Result<Vec<R>> {
    let raw: Vec<Value> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        let bad = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let obj = v.as_object().ok_or_else(|| bad(format!("{kind} record must be an object")))?;
        if let Some(missing) = required.iter().find(|k| !obj.contains_key(**k)) {
            return Err(bad(format!("{kind} record {} lacks field `{missing}`: {v}", i + 1)));
        }
        out.push(serde_json::from_value(v).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    read_strict(path, &["query", "target", "source"], "pair")
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let records: Vec<TripletRecord> = read_strict(path, &["query", "positive", "negatives"], "triplet")?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}
