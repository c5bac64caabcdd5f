//! Whole-word MLM pretraining of a small encoder on a synthetic corpus,
//! then a checkpoint round trip.
//!
//! `cargo run --release --example pretrain -- [steps]`

use longbert::encoder::{EncoderState, ModelConfig};
use longbert::eval::mlm_sweep;
use longbert::mlm::MlmEvalOptions;
use longbert::synthetic::{pseudo_words, repeated_word_corpus, vocabulary};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{load_checkpoint, save_checkpoint, OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = pseudo_words(150, &mut rng)?;
    let tokenizer = Tokenizer::new(vocabulary(&words)?);
    let corpus = repeated_word_corpus(&words, 2000, 60, 4..=10, &mut rng);
    let held_out = repeated_word_corpus(&words, 32, 200, 4..=10, &mut rng);

    let model = ModelConfig::desk(tokenizer.vocab().len());
    println!("{} parameters", model.parameter_count());
    let config = TrainConfig {
        model: model.clone(),
        optimizer: OptimizerConfig {
            total_steps: steps,
            warmup_steps: steps / 10,
            ..OptimizerConfig::desk()
        },
        batch_size: 16,
        train_seq_len: 64,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config, Stage::Pretrain, EncoderState::init(model, 1)?)?;
    trainer.run(&tokenizer, &StageData::Corpus(corpus), None)?;
    for r in trainer.log.iter().step_by((steps as usize / 8).max(1)) {
        println!("step {:>5}  lr {:.2e}  loss {:.3}", r.step, r.lr, r.loss);
    }
    print!("{}", mlm_sweep(&trainer.state, &tokenizer, &held_out, &[64, 128], &MlmEvalOptions::default())?.render());

    let dir = std::env::temp_dir().join("longbert-pretrain-example");
    std::fs::create_dir_all(&dir).map_err(|e| longbert::Error::io("creating output dir", e))?;
    let path = dir.join("checkpoint.jbrt");
    save_checkpoint(&path, &trainer.checkpoint(Some(tokenizer.vocab().fingerprint())))?;
    let restored = load_checkpoint::<f32>(&path)?;
    println!("saved {} (step {}), reload identical: {}", path.display(), restored.header.step, restored.state == trainer.state);
    Ok(())
}
