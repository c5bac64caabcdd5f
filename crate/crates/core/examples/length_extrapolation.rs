//! Trains two tiny encoders on short repeated-word documents, one with
//! ALiBi and one with learned absolute positions, then measures MLM
//! accuracy on longer documents than either saw in training.
//!
//! `cargo run --release --example length_extrapolation -- [steps]`

use std::time::Instant;

use longbert::encoder::{EncoderState, ModelConfig, PositionScheme};
use longbert::eval::mlm_sweep;
use longbert::mlm::MlmEvalOptions;
use longbert::synthetic::{pseudo_words, repeated_word_corpus, vocabulary};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words = pseudo_words(200, &mut rng)?;
    let tokenizer = Tokenizer::new(vocabulary(&words)?);
    let train = repeated_word_corpus(&words, 4000, 62, 6..=14, &mut rng);
    let held_out = repeated_word_corpus(&words, 48, 600, 6..=14, &mut rng);

    for position in [PositionScheme::Alibi, PositionScheme::Learned { max_positions: 512 }] {
        let model = ModelConfig {
            position,
            ..ModelConfig::desk(tokenizer.vocab().len())
        };
        let config = TrainConfig {
            model: model.clone(),
            optimizer: OptimizerConfig {
                total_steps: steps,
                ..OptimizerConfig::desk()
            },
            batch_size: 16,
            train_seq_len: 64,
            seed: 11,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let mut trainer = Trainer::<f32>::new(config, Stage::Pretrain, EncoderState::init(model, 11)?)?;
        trainer.run(&tokenizer, &StageData::Corpus(train.clone()), None)?;
        let last = trainer.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!("{position:?}: {steps} steps in {:.0?}, final loss {last:.3}", start.elapsed());
        let table = mlm_sweep(&trainer.state, &tokenizer, &held_out, &[64, 128, 512], &MlmEvalOptions::default())?;
        print!("{}", table.render());
    }
    Ok(())
}
