//! Bidirectional InfoNCE for text pairs, the hard-negative variant for
//! triplets, and source-homogeneous batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairRecord, TripletRecord, NUM_NEGATIVES};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

fn square(tape: &Tape<'_, impl Scalar>, v: Var, what: &str) -> Result<usize> {
    match tape.shape(v)[..] {
        [r, c] if r == c => Ok(r),
        ref s => Err(Error::shape("info_nce", format!("{what} must be square, got {s:?}"))),
    }
}

/// `Sᵀ` via `I·Sᵀ`, which keeps the tape free of a dedicated transpose.
fn transpose<T: Scalar>(tape: &Tape<'_, T>, s: Var, k: usize) -> Result<Var> {
    let mut eye = Tensor::<T>::zeros([k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = T::one();
    }
    let eye = tape.constant(eye);
    tape.matmul_nt(eye, s)
}

/// Loss from a `k×k` cosine matrix with `s[i][j] = s(qᵢ, pⱼ)`: cross-entropy
/// of each row against its diagonal plus the same over columns.
pub fn pair_info_nce_from_scores<T: Scalar>(tape: &Tape<'_, T>, scores: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let k = square(tape, scores, "score matrix")?;
    if k < 2 {
        return Err(Error::Invalid(format!("pair InfoNCE needs k >= 2 in-batch pairs, got {k}")));
    }
    let diag: Vec<usize> = (0..k).collect();
    let forward = tape.cross_entropy(tape.scale(scores, 1.0 / tau), &diag)?;
    let reverse = tape.cross_entropy(tape.scale(transpose(tape, scores, k)?, 1.0 / tau), &diag)?;
    tape.add(forward, reverse)
}

/// Pair loss over raw embeddings `q`, `p` of shape `[k, H]`.
pub fn pair_info_nce<T: Scalar>(tape: &Tape<'_, T>, q: Var, p: Var, tau: f64) -> Result<Var> {
    let qn = tape.l2_normalize_rows(q)?;
    let pn = tape.l2_normalize_rows(p)?;
    let scores = tape.matmul_nt(qn, pn)?;
    pair_info_nce_from_scores(tape, scores, tau)
}

/// Hard-negative loss from scores. `query_scores` is `[k, k + 15k]`: column
/// `j < k` holds `s(qᵢ, pⱼ)`, the rest `s(qᵢ, n)` for every negative of every
/// record. `reverse_scores` is `[k, k]` with `s(pᵢ, qⱼ)`.
pub fn hard_negative_loss_from_scores<T: Scalar>(
    tape: &Tape<'_, T>,
    query_scores: Var,
    reverse_scores: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let k = square(tape, reverse_scores, "reverse scores")?;
    let qs = tape.shape(query_scores);
    if qs != [k, k * (1 + NUM_NEGATIVES)] {
        return Err(Error::Invalid(format!(
            "hard-negative scores {qs:?}: each of {k} records needs 1 positive and {NUM_NEGATIVES} negatives"
        )));
    }
    let diag: Vec<usize> = (0..k).collect();
    let first = tape.cross_entropy(tape.scale(query_scores, 1.0 / tau), &diag)?;
    let second = tape.cross_entropy(tape.scale(reverse_scores, 1.0 / tau), &diag)?;
    tape.add(first, second)
}

/// Hard-negative loss over embeddings: `q`, `p` are `[k, H]` and `negatives`
/// is `[15k, H]` with record `i`'s negatives at rows `15i..15i+15`.
pub fn hard_negative_loss<T: Scalar>(tape: &Tape<'_, T>, q: Var, p: Var, negatives: Var, tau: f64) -> Result<Var> {
    let k = tape.shape(q)[0];
    if tape.shape(negatives)[0] != k * NUM_NEGATIVES {
        return Err(Error::Invalid(format!(
            "expected {} negative embeddings for {k} records, got {}",
            k * NUM_NEGATIVES,
            tape.shape(negatives)[0]
        )));
    }
    let qn = tape.l2_normalize_rows(q)?;
    let pn = tape.l2_normalize_rows(p)?;
    let nn = tape.l2_normalize_rows(negatives)?;
    let candidates = tape.concat_rows(&[pn, nn])?;
    let query_scores = tape.matmul_nt(qn, candidates)?;
    let reverse_scores = tape.matmul_nt(pn, qn)?;
    hard_negative_loss_from_scores(tape, query_scores, reverse_scores, tau)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub queries: Vec<String>,
    pub targets: Vec<String>,
    pub source: String,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub records: Vec<TripletRecord>,
}

impl TripletBatch {
    pub fn new(records: Vec<TripletRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("empty triplet batch".into()));
        }
        for r in &records {
            r.validate()?;
        }
        Ok(Self { records })
    }

    pub fn queries(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.query.as_str()).collect()
    }

    pub fn positives(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.positive.as_str()).collect()
    }

    /// Record-major: all negatives of record 0, then record 1, ...
    pub fn negatives(&self) -> Vec<&str> {
        self.records
            .iter()
            .flat_map(|r| r.negatives.iter().map(String::as_str))
            .collect()
    }
}

/// Shuffled order and cursor for one source; serializable so a resumed run
/// continues the same stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceCursor {
    pub name: String,
    pub weight: f64,
    pub order: Vec<usize>,
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pairs: Vec<Vec<(String, String)>>,
    sources: Vec<SourceCursor>,
}

impl SamplingPlan {
    /// Groups pairs by source (sorted by name) and pre-shuffles each group.
    /// Sources without an explicit weight are weighted by their size; weights
    /// are normalized to sum to 1.
    pub fn new<R: Rng + ?Sized>(records: &[PairRecord], weights: &BTreeMap<String, f64>, rng: &mut R) -> Result<Self> {
        let mut grouped: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
        for r in records {
            grouped
                .entry(r.source.as_str())
                .or_default()
                .push((r.query.clone(), r.target.clone()));
        }
        if grouped.is_empty() {
            return Err(Error::Invalid("sampling plan has no sources".into()));
        }
        let mut pairs = Vec::new();
        let mut sources = Vec::new();
        for (name, group) in grouped {
            let weight = weights.get(name).copied().unwrap_or(group.len() as f64);
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::Config(format!("source `{name}` has invalid weight {weight}")));
            }
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.shuffle(rng);
            sources.push(SourceCursor {
                name: name.to_string(),
                weight,
                order,
                cursor: 0,
            });
            pairs.push(group);
        }
        let total: f64 = sources.iter().map(|s| s.weight).sum();
        if total <= 0.0 {
            return Err(Error::Config("source weights sum to zero".into()));
        }
        for s in &mut sources {
            s.weight /= total;
        }
        Ok(Self { pairs, sources })
    }

    pub fn sources(&self) -> &[SourceCursor] {
        &self.sources
    }

    /// Replaces cursors and orders with a saved state.
    pub fn restore(&mut self, state: Vec<SourceCursor>) -> Result<()> {
        let compatible = state.len() == self.sources.len()
            && state
                .iter()
                .zip(&self.pairs)
                .zip(&self.sources)
                .all(|((s, p), cur)| s.name == cur.name && s.order.len() == p.len() && s.cursor <= p.len());
        if !compatible {
            return Err(Error::Checkpoint("sampling state does not match the pair data".into()));
        }
        self.sources = state;
        Ok(())
    }

    /// Draws a source by weight and takes the next `k` pairs from it. When
    /// fewer than `k` remain, the source is reshuffled and restarted.
    pub fn next_pair_batch<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<PairBatch> {
        if k < 2 {
            return Err(Error::Invalid(format!("pair batches need k >= 2, got {k}")));
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.sources.len() - 1;
        for (i, s) in self.sources.iter().enumerate() {
            acc += s.weight;
            if u < acc && s.weight > 0.0 {
                pick = i;
                break;
            }
        }
        let group = &self.pairs[pick];
        let src = &mut self.sources[pick];
        if group.len() < k {
            return Err(Error::Invalid(format!(
                "source `{}` has {} pairs, fewer than the batch size {k}",
                src.name,
                group.len()
            )));
        }
        if src.cursor + k > group.len() {
            src.order.shuffle(rng);
            src.cursor = 0;
        }
        let idx = &src.order[src.cursor..src.cursor + k];
        src.cursor += k;
        Ok(PairBatch {
            queries: idx.iter().map(|&i| group[i].0.clone()).collect(),
            targets: idx.iter().map(|&i| group[i].1.clone()).collect(),
            source: src.name.clone(),
        })
    }
}
