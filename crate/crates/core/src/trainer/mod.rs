//! The three training stages: masked-language-model pretraining, pair
//! fine-tuning and hard-negative fine-tuning, all driven by AdamW with a
//! linear warmup/decay schedule.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint, Checkpoint,
    CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{clip_global_norm, global_norm, lr_at, AdamW, OptimizerConfig};

use crate::contrastive::{hard_negative_loss, pair_info_nce, SamplingPlan, SourceCursor, DEFAULT_TEMPERATURE};
use crate::data::{PairRecord, TripletRecord};
use crate::embedder::{embed_on_tape, PoolingConfig};
use crate::encoder::{EncoderState, ModelConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mlm::{apply_whole_word_masking, mlm_loss, MaskedBatch, MaskingConfig, DEFAULT_MASK_RATE};
use crate::tensor::{Scalar, Tape};
use crate::tokenizer::{TokenizedSequence, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Pairs,
    Triplets,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Pairs => "pairs",
            Stage::Triplets => "triplets",
        })
    }
}

/// One JSON document describing a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Documents are truncated to their first `train_seq_len` tokens.
    pub train_seq_len: usize,
    pub seed: u64,
    pub mask_rate: f64,
    pub temperature: f64,
    pub pooling: PoolingConfig,
    /// Sampling weight per pair source; unlisted sources weigh by size.
    pub source_weights: BTreeMap<String, f64>,
    /// Run the evaluation hook every this many steps; 0 disables it.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::desk(),
            batch_size: 32,
            train_seq_len: 512,
            seed: 0,
            mask_rate: DEFAULT_MASK_RATE,
            temperature: DEFAULT_TEMPERATURE,
            pooling: PoolingConfig::default(),
            source_weights: BTreeMap::new(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.train_seq_len < 2 {
            return Err(Error::Config("train_seq_len must be at least 2".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!("mask_rate must be in (0, 1], got {}", self.mask_rate)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Training data for one stage.
#[derive(Clone, Debug)]
pub enum StageData {
    Corpus(Vec<String>),
    Pairs(Vec<PairRecord>),
    Triplets(Vec<TripletRecord>),
}

impl StageData {
    fn stage(&self) -> Stage {
        match self {
            StageData::Corpus(_) => Stage::Pretrain,
            StageData::Pairs(_) => Stage::Pairs,
            StageData::Triplets(_) => Stage::Triplets,
        }
    }

    fn len(&self) -> usize {
        match self {
            StageData::Corpus(v) => v.len(),
            StageData::Pairs(v) => v.len(),
            StageData::Triplets(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Epoch-style cursor over item indices, reshuffled on wrap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpochCursor {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochCursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = k.min(self.order.len());
        if self.cursor + k > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DataState {
    Epoch(EpochCursor),
    Sources { sources: Vec<SourceCursor> },
}

enum Sampler {
    Epoch(EpochCursor),
    Plan(SamplingPlan),
}

impl Sampler {
    fn state(&self) -> DataState {
        match self {
            Sampler::Epoch(c) => DataState::Epoch(c.clone()),
            Sampler::Plan(p) => DataState::Sources {
                sources: p.sources().to_vec(),
            },
        }
    }
}

/// Single-threaded, seed-deterministic training loop for one stage.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub stage: Stage,
    pub state: EncoderState<T>,
    pub optimizer: AdamW<T>,
    rng: ChaCha8Rng,
    data_state: Option<DataState>,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> Trainer<T> {
    /// Fresh stage on `state`. The config's model section is replaced by
    /// the state's own config.
    pub fn new(mut config: TrainConfig, stage: Stage, state: EncoderState<T>) -> Result<Self> {
        config.model = state.config.clone();
        config.validate()?;
        let optimizer = AdamW::new(state.named_parameters().into_iter().map(|(_, t)| t));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            stage,
            state,
            optimizer,
            data_state: None,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint<T>) -> Result<Self> {
        let h = ckpt.header;
        let (Some(mut config), Some(stage), Some(optimizer)) = (h.train, h.stage, ckpt.optimizer) else {
            return Err(Error::Checkpoint("not a resumable training checkpoint".into()));
        };
        config.model = ckpt.state.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pos: u128 = h
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position `{}`", h.rng_word_pos)))?;
        rng.set_word_pos(pos);
        let data_state = if h.data_state.is_null() {
            None
        } else {
            Some(serde_json::from_value(h.data_state).map_err(|e| Error::Checkpoint(format!("data state: {e}")))?)
        };
        Ok(Self {
            config,
            stage,
            state: ckpt.state,
            optimizer,
            rng,
            data_state,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// Updates applied in this stage so far.
    pub fn step(&self) -> u64 {
        self.optimizer.t
    }

    pub fn checkpoint(&self, vocab_fingerprint: Option<String>) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                model: self.state.config.clone(),
                train: Some(self.config.clone()),
                stage: Some(self.stage),
                step: self.optimizer.t,
                seed: self.config.seed,
                rng_word_pos: self.rng.get_word_pos().to_string(),
                data_state: self
                    .data_state
                    .as_ref()
                    .map(|d| serde_json::to_value(d).expect("plain data"))
                    .unwrap_or(serde_json::Value::Null),
                vocab_fingerprint,
            },
            state: self.state.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    fn sampler(&self, data: &StageData) -> Result<Sampler> {
        // Initial orders come from a side stream so that creating them does
        // not move the main generator.
        let mut init = stream_rng(self.config.seed, 1);
        let mut sampler = match data {
            StageData::Pairs(records) => Sampler::Plan(SamplingPlan::new(records, &self.config.source_weights, &mut init)?),
            _ => Sampler::Epoch(EpochCursor::new(data.len(), &mut init)),
        };
        match (&mut sampler, self.data_state.clone()) {
            (_, None) => {}
            (Sampler::Epoch(c), Some(DataState::Epoch(saved))) if saved.order.len() == c.order.len() => *c = saved,
            (Sampler::Plan(p), Some(DataState::Sources { sources })) => p.restore(sources)?,
            _ => return Err(Error::Checkpoint("saved data position does not match this data".into())),
        }
        Ok(sampler)
    }

    /// Trains until `stop_at` updates (default: the schedule's total).
    pub fn run(&mut self, tokenizer: &Tokenizer, data: &StageData, stop_at: Option<u64>) -> Result<()> {
        self.run_with_eval(tokenizer, data, stop_at, &mut |_, _| Ok(Vec::new()))
    }

    /// As [`Trainer::run`], calling `eval` every `eval_every` steps and
    /// recording what it returns.
    pub fn run_with_eval(
        &mut self,
        tokenizer: &Tokenizer,
        data: &StageData,
        stop_at: Option<u64>,
        eval: &mut dyn FnMut(u64, &EncoderState<T>) -> Result<Vec<(String, f64)>>,
    ) -> Result<()> {
        if data.stage() != self.stage {
            return Err(Error::Invalid(format!(
                "stage `{}` cannot train on {} data",
                self.stage,
                data.stage()
            )));
        }
        if data.len() == 0 {
            return Err(Error::Invalid(format!("no training records for stage `{}`", self.stage)));
        }
        if tokenizer.vocab().len() != self.state.config.vocab_size {
            return Err(Error::Vocab(format!(
                "tokenizer has {} tokens but the model expects {}",
                tokenizer.vocab().len(),
                self.state.config.vocab_size
            )));
        }
        let stop = stop_at
            .unwrap_or(self.config.optimizer.total_steps)
            .min(self.config.optimizer.total_steps);
        let mut sampler = self.sampler(data)?;
        let corpus: Vec<TokenizedSequence> = match data {
            StageData::Corpus(texts) => texts
                .iter()
                .map(|t| tokenizer.tokenize(t, self.config.train_seq_len))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        while self.optimizer.t < stop {
            let step = self.optimizer.t + 1;
            let (loss, mut grads) = match (data, &mut sampler) {
                (StageData::Corpus(_), Sampler::Epoch(c)) => {
                    let idx = c.next(self.config.batch_size, &mut self.rng);
                    pretrain_grads(&self.state, &self.config, tokenizer, &corpus, &idx, &mut self.rng)?
                }
                (StageData::Pairs(_), Sampler::Plan(p)) => {
                    let k = self.config.batch_size;
                    let batch = p.next_pair_batch(k, &mut self.rng)?;
                    let cfg = &self.config;
                    contrastive_grads(&self.state, &mut self.rng, |state, tape, bound, rng| {
                        let enc = |texts: &[String], rng: &mut ChaCha8Rng| {
                            let b = tokenizer.tokenize_batch(texts, cfg.train_seq_len)?;
                            embed_on_tape(state, tape, bound, &b, &cfg.pooling, Some(rng))
                        };
                        let q = enc(&batch.queries, rng)?;
                        let t = enc(&batch.targets, rng)?;
                        pair_info_nce(tape, q, t, cfg.temperature)
                    })?
                }
                (StageData::Triplets(records), Sampler::Epoch(c)) => {
                    let idx = c.next(self.config.batch_size, &mut self.rng);
                    let cfg = &self.config;
                    contrastive_grads(&self.state, &mut self.rng, |state, tape, bound, rng| {
                        let enc = |texts: Vec<&str>, rng: &mut ChaCha8Rng| {
                            let b = tokenizer.tokenize_batch(&texts, cfg.train_seq_len)?;
                            embed_on_tape(state, tape, bound, &b, &cfg.pooling, Some(rng))
                        };
                        let rec: Vec<&TripletRecord> = idx.iter().map(|&i| &records[i]).collect();
                        for r in &rec {
                            r.validate()?;
                        }
                        let q = enc(rec.iter().map(|r| r.query.as_str()).collect(), rng)?;
                        let p = enc(rec.iter().map(|r| r.positive.as_str()).collect(), rng)?;
                        let n = enc(rec.iter().flat_map(|r| r.negatives.iter().map(String::as_str)).collect(), rng)?;
                        hard_negative_loss(tape, q, p, n, cfg.temperature)
                    })?
                }
                _ => unreachable!("sampler matches stage"),
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grad_norm = match self.config.optimizer.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => global_norm(&grads),
            };
            let mut params = self.state.named_parameters_mut();
            let lr = self.optimizer.step(&mut params, &grads, &self.config.optimizer)?;
            self.log.push(StepRecord {
                step,
                lr,
                loss,
                grad_norm,
            });
            self.data_state = Some(sampler.state());
            if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
                for (metric, value) in eval(step, &self.state)? {
                    self.evals.push(EvalRecord { step, metric, value });
                }
            }
        }
        self.data_state = Some(sampler.state());
        Ok(())
    }
}

fn pretrain_grads<T: Scalar>(
    state: &EncoderState<T>,
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    corpus: &[TokenizedSequence],
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<T>>)> {
    let masking = MaskingConfig {
        rate: cfg.mask_rate,
        ..MaskingConfig::default()
    };
    let masked: Vec<_> = idx
        .iter()
        .map(|&i| apply_whole_word_masking(&corpus[i], tokenizer.vocab(), &masking, rng))
        .filter(|m| !m.is_empty())
        .collect();
    if masked.is_empty() {
        return Err(Error::Invalid("training batch has no maskable tokens".into()));
    }
    let batch = MaskedBatch::collate(&masked, tokenizer.vocab().pad_id())?;
    let tape = Tape::new();
    let bound = state.bind(&tape);
    let loss = mlm_loss(state, &tape, &bound, &batch, Some(rng))?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss).as_f64(), bound.gradients(&tape)))
}

fn contrastive_grads<T: Scalar>(
    state: &EncoderState<T>,
    rng: &mut ChaCha8Rng,
    loss_fn: impl FnOnce(
        &EncoderState<T>,
        &Tape<'_, T>,
        &crate::encoder::BoundEncoder,
        &mut ChaCha8Rng,
    ) -> Result<crate::tensor::Var>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let tape = Tape::new();
    let bound = state.bind(&tape);
    let loss = loss_fn(state, &tape, &bound, rng)?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss).as_f64(), bound.gradients(&tape)))
}

/// `step,lr,loss,grad_norm` rows.
pub fn write_loss_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss,grad_norm\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.grad_norm));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocabulary;

    fn setup() -> (Tokenizer, TrainConfig) {
        let vocab = Vocabulary::with_specials(["the", "cat", "sat", "on", "a", "mat", "dog", "ran"]).unwrap();
        let tok = Tokenizer::new(vocab);
        let model = ModelConfig {
            hidden: 16,
            heads: 2,
            head_dim: 8,
            ffn_inner: 32,
            ..ModelConfig::desk(tok.vocab().len())
        };
        let cfg = TrainConfig {
            model,
            batch_size: 2,
            train_seq_len: 16,
            seed: 11,
            optimizer: OptimizerConfig {
                warmup_steps: 2,
                total_steps: 6,
                ..OptimizerConfig::desk()
            },
            ..TrainConfig::default()
        };
        (tok, cfg)
    }

    fn corpus() -> StageData {
        StageData::Corpus(vec!["the cat sat on a mat".into(), "a dog ran".into(), "the dog sat".into()])
    }

    #[test]
    fn stage_mismatch_rejected() {
        let (tok, cfg) = setup();
        let state = EncoderState::<f32>::init(cfg.model.clone(), 0).unwrap();
        let mut t = Trainer::new(cfg, Stage::Pairs, state).unwrap();
        assert!(t.run(&tok, &corpus(), None).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (tok, cfg) = setup();
        let state = EncoderState::<f64>::init(cfg.model.clone(), 0).unwrap();
        let mut full = Trainer::new(cfg.clone(), Stage::Pretrain, state.clone()).unwrap();
        full.run(&tok, &corpus(), None).unwrap();

        let mut first = Trainer::new(cfg, Stage::Pretrain, state).unwrap();
        first.run(&tok, &corpus(), Some(3)).unwrap();
        let bytes = encode_checkpoint(&first.checkpoint(None)).unwrap();
        let mut second = Trainer::resume(decode_checkpoint::<f64>(&bytes).unwrap()).unwrap();
        second.run(&tok, &corpus(), None).unwrap();
        assert_eq!(second.state, full.state);
        assert_eq!(second.optimizer, full.optimizer);
        assert_eq!(&full.log[3..], &second.log[..]);
    }
}
