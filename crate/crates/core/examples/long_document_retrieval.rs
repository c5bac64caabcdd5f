//! Retrieval where the answer sits deep inside each document: nDCG@10 as a
//! function of the encoder's input length.
//!
//! `cargo run --release --example long_document_retrieval`

use longbert::embedder::EncodeOptions;
use longbert::encoder::{EncoderState, ModelConfig};
use longbert::eval::retrieval_sweep;
use longbert::synthetic::{keyword_pairs, long_document_retrieval, KeywordSpace};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = KeywordSpace::new(120, 60, &mut rng)?;
    let tokenizer = Tokenizer::new(space.vocabulary()?);
    let pairs = keyword_pairs(&space, 2000, 3, 4, &mut rng);
    let model = ModelConfig::desk(tokenizer.vocab().len());
    let config = TrainConfig {
        model: model.clone(),
        optimizer: OptimizerConfig {
            total_steps: 300,
            warmup_steps: 30,
            ..OptimizerConfig::desk()
        },
        batch_size: 32,
        train_seq_len: 64,
        seed: 3,
        ..TrainConfig::default()
    };
    // Trained on inputs of a few dozen tokens.
    let mut trainer = Trainer::<f32>::new(config, Stage::Pairs, EncoderState::init(model, 3)?)?;
    trainer.run(&tokenizer, &StageData::Pairs(pairs), None)?;

    // 80 filler words, then the topic, then 120 more filler words.
    let task = long_document_retrieval(&space, 100, 3, 80, 120, &mut rng);
    let table = retrieval_sweep(
        &trainer.state,
        &tokenizer,
        &task,
        &[32, 64, 128, 256],
        &[10],
        &EncodeOptions::default(),
    )?;
    print!("{}", table.render());
    Ok(())
}
