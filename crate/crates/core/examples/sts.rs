//! Semantic textual similarity: Spearman correlation between cosine scores
//! and graded gold labels.
//!
//! `cargo run --release --example sts`

use longbert::data::ScoredPair;
use longbert::embedder::EncodeOptions;
use longbert::encoder::{EncoderState, ModelConfig};
use longbert::eval::{evaluate_sts, pearson, spearman};
use longbert::synthetic::{keyword_pairs, KeywordSpace};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    println!(
        "toy: spearman {:.3}, pearson {:.3}",
        spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0])?,
        pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0])?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let space = KeywordSpace::new(120, 60, &mut rng)?;
    let tokenizer = Tokenizer::new(space.vocabulary()?);
    // Gold score = number of shared keywords out of four.
    let pairs: Vec<ScoredPair> = (0..200)
        .map(|i| {
            let shared = i % 5;
            let a = space.topic(8, &mut rng);
            let mut b: Vec<String> = a[..shared].to_vec();
            let rest: Vec<&String> = space.keywords.iter().filter(|k| !a.contains(k)).collect();
            b.extend(rest.choose_multiple(&mut rng, 4 - shared).map(|s| s.to_string()));
            ScoredPair {
                sentence1: space.text(&a[..4], 3, &mut rng),
                sentence2: space.text(&b, 3, &mut rng),
                score: shared as f64,
            }
        })
        .collect();

    let model = ModelConfig::desk(tokenizer.vocab().len());
    let mut trainer = Trainer::<f32>::new(
        TrainConfig {
            model: model.clone(),
            optimizer: OptimizerConfig {
                total_steps: 200,
                warmup_steps: 20,
                ..OptimizerConfig::desk()
            },
            batch_size: 32,
            train_seq_len: 64,
            seed: 6,
            ..TrainConfig::default()
        },
        Stage::Pairs,
        EncoderState::init(model, 6)?,
    )?;
    let opts = EncodeOptions::default();
    println!("untrained spearman {:.3}", evaluate_sts(&trainer.state, &tokenizer, &pairs, &opts)?);
    trainer.run(&tokenizer, &StageData::Pairs(keyword_pairs(&space, 2000, 3, 2, &mut rng)), None)?;
    println!("trained spearman   {:.3}", evaluate_sts(&trainer.state, &tokenizer, &pairs, &opts)?);
    Ok(())
}
