//! The command-line workflow driven in-process: pretrain, fine-tune on
//! pairs, embed, evaluate, and replay a run from its manifest.
//!
//! `cargo run --release --example cli_workflow`
//!
//! The same commands work through the binary, e.g. `longbert pretrain --help`.

use longbert::data::CorpusRecord;
use longbert::io::write_jsonl;
use longbert::synthetic::{keyword_pairs, repeated_word_corpus, KeywordSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cli(args: &[&str]) {
    println!("$ longbert {}", args.join(" "));
    let code = longbert::cli::run(std::iter::once("longbert").chain(args.iter().copied()));
    assert_eq!(code, 0, "command failed");
}

fn main() -> longbert::Result<()> {
    let dir = std::env::temp_dir().join("longbert-cli-example");
    std::fs::create_dir_all(&dir).map_err(|e| longbert::Error::io("creating work dir", e))?;
    std::env::set_current_dir(&dir).map_err(|e| longbert::Error::io("entering work dir", e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let space = KeywordSpace::new(60, 30, &mut rng)?;
    space.vocabulary()?.save("vocab.txt")?;
    let words: Vec<String> = space.keywords.iter().chain(&space.filler).cloned().collect();
    let docs: Vec<CorpusRecord> = repeated_word_corpus(&words, 300, 50, 2..=6, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, text)| CorpusRecord { id: format!("doc{i}"), text })
        .collect();
    write_jsonl("corpus.jsonl".as_ref(), &docs)?;
    write_jsonl("pairs.jsonl".as_ref(), &keyword_pairs(&space, 500, 3, 2, &mut rng))?;
    std::fs::write(
        "config.json",
        r#"{"model": {"layers": 2, "hidden": 64, "heads": 1, "head_dim": 64, "ffn_inner": 128},
           "optimizer": {"peak_lr": 1e-3, "warmup_steps": 20, "total_steps": 200},
           "batch_size": 8, "train_seq_len": 64, "seed": 1}"#,
    )
    .map_err(|e| longbert::Error::io("writing config", e))?;

    cli(&["pretrain", "--config", "config.json", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--out", "pre"]);
    cli(&[
        "finetune", "--stage", "pairs", "--config", "config.json", "--data", "pairs.jsonl",
        "--init-checkpoint", "pre/checkpoint.jbrt", "--vocab", "vocab.txt", "--out", "tuned", "--steps", "100",
    ]);
    cli(&[
        "embed", "--checkpoint", "tuned/checkpoint.jbrt", "--vocab", "vocab.txt", "--input", "corpus.jsonl",
        "--output", "corpus.emb.jsonl",
    ]);
    cli(&[
        "eval", "--task", "mlm-sweep", "--checkpoint", "pre/checkpoint.jbrt", "--vocab", "vocab.txt",
        "--corpus", "corpus.jsonl", "--lengths", "16,32,64", "--out", "sweep",
    ]);
    cli(&["replay", "pre/manifest.json"]);
    println!("artifacts in {}", dir.display());
    Ok(())
}
