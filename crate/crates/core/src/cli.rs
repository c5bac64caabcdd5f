//! The `longbert` command line: pretrain, finetune, embed, eval and replay.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, load_pairs, load_triplets, LabeledText, ScoredPair};
use crate::embedder::{encode, write_embeddings_bin, write_embeddings_jsonl, EncodeOptions};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_clustering, evaluate_sts, length_sweep, mlm_sweep, retrieval_suite, KMeansOptions, QrelSet,
    RetrievalRun, RetrievalTask,
};
use crate::io::{read_jsonl, write_atomic};
use crate::mlm::MlmEvalOptions;
use crate::tokenizer::{Tokenizer, Vocabulary};
use crate::trainer::{
    load_checkpoint, read_header, save_checkpoint, write_loss_log, Checkpoint, Stage, StageData, TrainConfig,
    Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Worker threads for embedding and evaluation.
pub const THREADS_ENV: &str = "LONGBERT_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.jbrt";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "longbert", version, about = "Train and evaluate long-context text encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-language-model pretraining on a JSON-lines corpus.
    Pretrain(PretrainArgs),
    /// Contrastive fine-tuning on pairs or triplets.
    Finetune(FinetuneArgs),
    /// Encode texts into embedding vectors.
    Embed(EmbedArgs),
    /// Evaluate a checkpoint over one or more maximum sequence lengths.
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

/// Flags that override keys of the run's config file.
#[derive(Debug, Clone, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.optimizer.total_steps = s;
        }
        if let Some(w) = self.warmup {
            cfg.optimizer.warmup_steps = w;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.peak_lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(l) = self.seq_len {
            cfg.train_seq_len = l;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// JSON-lines corpus; each record needs a `text` field.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many updates. The schedule still targets the full run.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneStage {
    Pairs,
    Triplets,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub stage: FinetuneStage,
    #[arg(long)]
    pub config: PathBuf,
    /// Pairs (`query`, `target`, `source`) or triplets (`query`, `positive`, `negatives`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub init_checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingFormat {
    Bin,
    Jsonl,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON-lines records with `id` and `text`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = EmbeddingFormat::Jsonl)]
    pub format: EmbeddingFormat,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    MlmSweep,
    Retrieval,
    Cluster,
    Sts,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Not needed when scoring a precomputed `--run`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Texts for mlm-sweep, documents for retrieval (`id`, `text`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Retrieval queries (`id`, `text`).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Retrieval judgments: `query<TAB>doc<TAB>relevance`.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// A precomputed retrieval run: `query<TAB>doc<TAB>score`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Labeled texts for cluster, scored sentence pairs for sts.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Maximum sequence lengths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "512")]
    pub lengths: Vec<usize>,
    /// Retrieval cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Directory for the metric CSV and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Everything needed to re-run a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Working directory that relative paths in `args` resolve against.
    pub cwd: PathBuf,
    pub version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Messages go to stdout and errors to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let rest: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, rest) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn dispatch(command: Command, args: Vec<String>) -> Result<()> {
    let started = now_ms();
    let manifest = |command: &str, config: Option<&Path>, data: Vec<PathBuf>, seed, out: Option<&Path>| RunManifest {
        command: command.to_string(),
        args: args.clone(),
        config: config.map(Path::to_path_buf),
        data,
        seed,
        out: out.map(Path::to_path_buf),
        cwd: std::env::current_dir().unwrap_or_default(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    match command {
        Command::Pretrain(a) => {
            let seed = pretrain(&a)?;
            let m = manifest(
                "pretrain",
                Some(&a.config),
                vec![a.corpus.clone(), a.vocab.clone()],
                Some(seed),
                Some(&a.out),
            );
            write_manifest(&a.out, &m)
        }
        Command::Finetune(a) => {
            let seed = finetune(&a)?;
            let m = manifest(
                "finetune",
                Some(&a.config),
                vec![a.data.clone(), a.init_checkpoint.clone(), a.vocab.clone()],
                Some(seed),
                Some(&a.out),
            );
            write_manifest(&a.out, &m)
        }
        Command::Embed(a) => {
            embed(&a)?;
            let m = manifest(
                "embed",
                None,
                vec![a.checkpoint.clone(), a.vocab.clone(), a.input.clone()],
                None,
                Some(&a.output),
            );
            let mut path = a.output.clone().into_os_string();
            path.push(".manifest.json");
            write_atomic(Path::new(&path), &serde_json::to_vec_pretty(&m)?)
        }
        Command::Eval(a) => {
            eval(&a)?;
            let data = [&a.checkpoint, &a.vocab, &a.corpus, &a.queries, &a.qrels, &a.run, &a.data]
                .into_iter()
                .flatten()
                .cloned()
                .collect();
            write_manifest(&a.out, &manifest("eval", None, data, Some(a.seed), Some(&a.out)))
        }
        Command::Replay(a) => replay(&a.manifest),
    }
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(m)?)
}

fn replay(path: &Path) -> Result<()> {
    let m = RunManifest::load(path)?;
    let mut argv = vec!["longbert".to_string()];
    argv.extend(m.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Invalid(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Invalid("a manifest cannot replay another replay".into()));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| Error::io(format!("entering {}", m.cwd.display()), e))?;
    println!("replaying: longbert {}", m.args.join(" "));
    dispatch(cli.command, m.args)
}

#[derive(Deserialize)]
struct TextLine {
    text: String,
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Ok(Tokenizer::new(Vocabulary::load(path)?))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn finish_training(trainer: &Trainer<f32>, tokenizer: &Tokenizer, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &trainer.checkpoint(Some(tokenizer.vocab().fingerprint())),
    )?;
    write_loss_log(&out.join(LOSS_LOG_FILE), &trainer.log)?;
    if let Some(r) = trainer.log.last() {
        println!("{}: {} steps, final loss {:.4}", trainer.stage, r.step, r.loss);
    }
    Ok(())
}

fn check_fingerprint(ckpt_fp: Option<&str>, tokenizer: &Tokenizer, model_vocab: usize) -> Result<()> {
    let fp = tokenizer.vocab().fingerprint();
    if let Some(expected) = ckpt_fp {
        if expected != fp {
            return Err(Error::Vocab(format!(
                "checkpoint was trained with vocabulary {expected}, but the given vocabulary is {fp}"
            )));
        }
    }
    if tokenizer.vocab().len() != model_vocab {
        return Err(Error::Vocab(format!(
            "vocabulary has {} tokens but the model expects {model_vocab}",
            tokenizer.vocab().len()
        )));
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<u64> {
    let tokenizer = load_tokenizer(&a.vocab)?;
    let texts: Vec<String> = read_jsonl::<TextLine>(&a.corpus)?.into_iter().map(|r| r.text).collect();
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path)?;
            check_fingerprint(ckpt.header.vocab_fingerprint.as_deref(), &tokenizer, ckpt.state.config.vocab_size)?;
            let mut t = Trainer::resume(ckpt)?;
            if t.stage != Stage::Pretrain {
                return Err(Error::Invalid(format!("{} holds a `{}` run, not pretraining", path.display(), t.stage)));
            }
            if let Some(s) = a.overrides.steps {
                t.config.optimizer.total_steps = s;
            }
            t
        }
        None => {
            let mut cfg = load_config(&a.config, &a.overrides)?;
            cfg.model.vocab_size = tokenizer.vocab().len();
            let state = EncoderState::init(cfg.model.clone(), cfg.seed)?;
            Trainer::new(cfg, Stage::Pretrain, state)?
        }
    };
    trainer.run(&tokenizer, &StageData::Corpus(texts), a.stop_at)?;
    finish_training(&trainer, &tokenizer, &a.out)?;
    Ok(trainer.config.seed)
}

fn finetune(a: &FinetuneArgs) -> Result<u64> {
    let tokenizer = load_tokenizer(&a.vocab)?;
    let (stage, data) = match a.stage {
        FinetuneStage::Pairs => (Stage::Pairs, StageData::Pairs(load_pairs(&a.data)?)),
        FinetuneStage::Triplets => (Stage::Triplets, StageData::Triplets(load_triplets(&a.data)?)),
    };
    let init: Checkpoint<f32> = load_checkpoint(&a.init_checkpoint)?;
    check_fingerprint(init.header.vocab_fingerprint.as_deref(), &tokenizer, init.state.config.vocab_size)?;
    let cfg = load_config(&a.config, &a.overrides)?;
    let mut trainer = Trainer::new(cfg, stage, init.state)?;
    trainer.run(&tokenizer, &data, None)?;
    finish_training(&trainer, &tokenizer, &a.out)?;
    Ok(trainer.config.seed)
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(EncoderState<f32>, Tokenizer)> {
    let header = read_header(checkpoint)?;
    let tokenizer = load_tokenizer(vocab)?;
    check_fingerprint(header.vocab_fingerprint.as_deref(), &tokenizer, header.model.vocab_size)?;
    let ckpt: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    Ok((ckpt.state, tokenizer))
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let (state, tokenizer) = load_model(&a.checkpoint, &a.vocab)?;
    let records = load_corpus(&a.input)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let opts = EncodeOptions {
        max_len: a.max_len,
        batch_size: a.batch_size,
        ..EncodeOptions::default()
    };
    let mut vectors = encode(&state, &tokenizer, &texts, &opts)?;
    for (v, r) in vectors.iter_mut().zip(&records) {
        v.source_id = Some(r.id.clone());
    }
    match a.format {
        EmbeddingFormat::Bin => write_embeddings_bin(&a.output, &vectors)?,
        EmbeddingFormat::Jsonl => write_embeddings_jsonl(&a.output, &vectors)?,
    }
    println!("wrote {} embeddings of dimension {} to {}", vectors.len(), state.config.hidden, a.output.display());
    Ok(())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, task: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("--task {task} requires --{flag}")))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let task_name = a.task.to_possible_value().expect("no skipped variants").get_name().to_string();
    let need = |v: &Option<PathBuf>, flag: &str| required(v, flag, &task_name).map(Path::to_path_buf);
    let opts = EncodeOptions {
        batch_size: a.batch_size,
        ..EncodeOptions::default()
    };
    let table = if let (EvalTask::Retrieval, Some(run)) = (a.task, &a.run) {
        let qrels = QrelSet::load_tsv(&need(&a.qrels, "qrels")?)?;
        let run = RetrievalRun::load_tsv(run)?;
        let metrics = retrieval_suite(&run, &qrels, &a.k)?;
        length_sweep(&[0], |_| Ok(metrics.clone().into_iter().collect()))?
    } else {
        let (state, tokenizer) = load_model(&need(&a.checkpoint, "checkpoint")?, &need(&a.vocab, "vocab")?)?;
        match a.task {
            EvalTask::MlmSweep => {
                let texts: Vec<String> = read_jsonl::<TextLine>(&need(&a.corpus, "corpus")?)?
                    .into_iter()
                    .map(|r| r.text)
                    .collect();
                let o = MlmEvalOptions {
                    seed: a.seed,
                    batch_size: a.batch_size,
                    ..MlmEvalOptions::default()
                };
                mlm_sweep(&state, &tokenizer, &texts, &a.lengths, &o)?
            }
            EvalTask::Retrieval => {
                let task = RetrievalTask {
                    queries: load_corpus(&need(&a.queries, "queries")?)?,
                    corpus: load_corpus(&need(&a.corpus, "corpus")?)?,
                    qrels: QrelSet::load_tsv(&need(&a.qrels, "qrels")?)?,
                };
                crate::eval::retrieval_sweep(&state, &tokenizer, &task, &a.lengths, &a.k, &opts)?
            }
            EvalTask::Cluster => {
                let items: Vec<LabeledText> = read_jsonl(&need(&a.data, "data")?)?;
                let km = KMeansOptions {
                    seed: a.seed,
                    ..KMeansOptions::default()
                };
                length_sweep(&a.lengths, |len| {
                    let v = evaluate_clustering(&state, &tokenizer, &items, &EncodeOptions { max_len: len, ..opts }, &km)?;
                    Ok(vec![
                        ("v_measure".into(), v.v_measure),
                        ("homogeneity".into(), v.homogeneity),
                        ("completeness".into(), v.completeness),
                    ])
                })?
            }
            EvalTask::Sts => {
                let pairs: Vec<ScoredPair> = read_jsonl(&need(&a.data, "data")?)?;
                length_sweep(&a.lengths, |len| {
                    let rho = evaluate_sts(&state, &tokenizer, &pairs, &EncodeOptions { max_len: len, ..opts })?;
                    Ok(vec![("spearman".into(), rho)])
                })?
            }
        }
    };
    print!("{}", table.render());
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    table.write_csv(&a.out.join(METRICS_FILE))
}
