//! Whole-word masking and the masked-language-modeling objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{BoundEncoder, EncoderState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use crate::tokenizer::{pad_batch, PaddedBatch, TokenizedSequence, Tokenizer, Vocabulary};

pub const DEFAULT_MASK_RATE: f64 = 0.30;

/// What happened to one selected token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    /// Fraction of maskable tokens to cover, rounded up.
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: DEFAULT_MASK_RATE,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// One sequence after masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Option<u32>>,
    /// Selected positions, ascending.
    pub mask_positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
    pub word_ids: Vec<Option<u32>>,
    pub attention_mask: Vec<u8>,
}

impl MaskedSequence {
    pub fn is_empty(&self) -> bool {
        self.mask_positions.is_empty()
    }

    /// Puts the original ids back.
    pub fn unmasked(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        for (id, label) in ids.iter_mut().zip(&self.labels) {
            if let Some(l) = label {
                *id = *l;
            }
        }
        ids
    }
}

/// Selects whole words in random order until at least `rate` of the
/// maskable (non-special, non-padding) tokens are covered, then replaces each
/// selected token with `[MASK]`, a random non-special token, or itself.
pub fn apply_whole_word_masking<R: Rng + ?Sized>(
    seq: &TokenizedSequence,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> MaskedSequence {
    let maskable = |i: usize| seq.word_ids[i].is_some() && seq.attention_mask[i] == 1;
    let mut words: Vec<u32> = Vec::new();
    let mut maskable_count = 0usize;
    for i in 0..seq.len() {
        if maskable(i) {
            maskable_count += 1;
            let w = seq.word_ids[i].expect("maskable");
            if words.last() != Some(&w) {
                words.push(w);
            }
        }
    }
    let mut out = MaskedSequence {
        input_ids: seq.token_ids.clone(),
        labels: vec![None; seq.len()],
        mask_positions: Vec::new(),
        replacements: Vec::new(),
        word_ids: seq.word_ids.clone(),
        attention_mask: seq.attention_mask.clone(),
    };
    if maskable_count == 0 {
        return out;
    }
    let target = (cfg.rate * maskable_count as f64).ceil() as usize;
    words.shuffle(rng);
    let mut selected = vec![false; seq.len()];
    let mut covered = 0;
    for w in words {
        if covered >= target {
            break;
        }
        for i in 0..seq.len() {
            if maskable(i) && seq.word_ids[i] == Some(w) {
                selected[i] = true;
                covered += 1;
            }
        }
    }
    let specials: Vec<u32> = (0..vocab.len() as u32).filter(|&id| vocab.is_special(id)).collect();
    let ordinary = vocab.len() - specials.len();
    for (i, &sel) in selected.iter().enumerate() {
        if !sel {
            continue;
        }
        let original = seq.token_ids[i];
        let u: f64 = rng.gen();
        let replacement = if u < cfg.mask_prob {
            out.input_ids[i] = vocab.mask_id();
            Replacement::Mask
        } else if u < cfg.mask_prob + cfg.random_prob && ordinary > 0 {
            // k-th non-special id
            let mut id = rng.gen_range(0..ordinary as u32);
            for &s in &specials {
                if s <= id {
                    id += 1;
                }
            }
            out.input_ids[i] = id;
            Replacement::Random
        } else {
            Replacement::Unchanged
        };
        out.labels[i] = Some(original);
        out.mask_positions.push(i);
        out.replacements.push(replacement);
    }
    out
}

/// Masked sequences collated into one padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub inputs: PaddedBatch,
    /// Flat row indices into `[batch * seq_len]`.
    pub positions: Vec<usize>,
    pub labels: Vec<u32>,
}

impl MaskedBatch {
    pub fn collate(seqs: &[MaskedSequence], pad_id: u32) -> Result<Self> {
        let tokenized: Vec<TokenizedSequence> = seqs
            .iter()
            .map(|s| TokenizedSequence {
                token_ids: s.input_ids.clone(),
                word_ids: s.word_ids.clone(),
                attention_mask: s.attention_mask.clone(),
            })
            .collect();
        let inputs = pad_batch(&tokenized, pad_id)?;
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            for &p in &s.mask_positions {
                positions.push(b * inputs.seq_len + p);
                labels.push(s.labels[p].expect("label at mask position"));
            }
        }
        Ok(Self {
            inputs,
            positions,
            labels,
        })
    }

    pub fn masked_count(&self) -> usize {
        self.positions.len()
    }
}

/// Mean negative log-likelihood of the original tokens at the masked
/// positions, normalized by this batch's masked count.
pub fn mlm_loss<T: Scalar, R: Rng + ?Sized>(
    state: &EncoderState<T>,
    tape: &Tape<'_, T>,
    bound: &BoundEncoder,
    batch: &MaskedBatch,
    rng: Option<&mut R>,
) -> Result<Var> {
    if batch.positions.is_empty() {
        return Err(Error::Invalid("mlm_loss: batch has no masked positions".into()));
    }
    let hidden = state.forward_on_tape(tape, bound, &batch.inputs, rng)?;
    let logits = state.mlm_logits(tape, bound, hidden, &batch.positions)?;
    let targets: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
    tape.cross_entropy(logits, &targets)
}

/// Argmax predictions at the masked positions, in batch order.
pub fn mlm_predictions<T: Scalar>(state: &EncoderState<T>, batch: &MaskedBatch) -> Result<Vec<u32>> {
    if batch.positions.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::inference();
    let bound = state.bind(&tape);
    let hidden = state.forward_on_tape::<ChaCha8Rng>(&tape, &bound, &batch.inputs, None)?;
    let logits = state.mlm_logits(&tape, &bound, hidden, &batch.positions)?;
    let values = tape.value(logits);
    let v = state.config.vocab_size;
    Ok(values
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// RNG for masking document `index` during evaluation. Documents get
/// independent streams so the masks do not depend on batching.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl MlmAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Evaluation options for [`mlm_accuracy`].
#[derive(Clone, Copy, Debug)]
pub struct MlmEvalOptions {
    pub seed: u64,
    pub batch_size: usize,
    pub masking: MaskingConfig,
}

impl Default for MlmEvalOptions {
    fn default() -> Self {
        Self {
            seed: 1234,
            batch_size: 8,
            masking: MaskingConfig::default(),
        }
    }
}

/// Fraction of masked positions whose argmax prediction is the original
/// token, with every document truncated to `seq_len` and masked with a fixed
/// per-document stream.
pub fn mlm_accuracy<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    texts: &[impl AsRef<str> + Sync],
    seq_len: usize,
    opts: &MlmEvalOptions,
) -> Result<MlmAccuracy> {
    if texts.is_empty() {
        return Err(Error::Invalid("mlm_accuracy: empty corpus".into()));
    }
    let vocab = tokenizer.vocab();
    let masked = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let seq = tokenizer.tokenize(t.as_ref(), seq_len)?;
            Ok(apply_whole_word_masking(&seq, vocab, &opts.masking, &mut eval_rng(opts.seed, i)))
        })
        .collect::<Result<Vec<_>>>()?;
    let masked: Vec<MaskedSequence> = masked.into_iter().filter(|m| !m.is_empty()).collect();
    let counts = masked
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| {
            let batch = MaskedBatch::collate(chunk, vocab.pad_id())?;
            let preds = mlm_predictions(state, &batch)?;
            let correct = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            Ok((correct, batch.labels.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, total) = counts.iter().fold((0, 0), |(c, t), &(a, b)| (c + a, t + b));
    Ok(MlmAccuracy { correct, total })
}
