//! Contrastive fine-tuning: in-batch InfoNCE on text pairs, then the
//! hard-negative stage on triplets.
//!
//! `cargo run --release --example finetune`

use longbert::data::{PairRecord, TripletRecord};
use longbert::embedder::{cosine_similarity, encode, EncodeOptions};
use longbert::encoder::{EncoderState, ModelConfig};
use longbert::synthetic::{keyword_pairs, keyword_triplets, KeywordSpace};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair_gap(state: &EncoderState<f32>, tok: &Tokenizer, pairs: &[PairRecord]) -> longbert::Result<(f64, f64)> {
    let opts = EncodeOptions::default();
    let q: Vec<&str> = pairs.iter().map(|p| p.query.as_str()).collect();
    let t: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
    let (eq, et) = (encode(state, tok, &q, &opts)?, encode(state, tok, &t, &opts)?);
    let n = pairs.len();
    let (mut same, mut other) = (0.0, 0.0);
    for i in 0..n {
        same += cosine_similarity(&eq[i].values, &et[i].values)?;
        other += cosine_similarity(&eq[i].values, &et[(i + 1) % n].values)?;
    }
    Ok((same / n as f64, other / n as f64))
}

fn triplet_wins(state: &EncoderState<f32>, tok: &Tokenizer, records: &[TripletRecord]) -> longbert::Result<usize> {
    let mut wins = 0;
    for r in records {
        let mut texts = vec![r.query.as_str(), r.positive.as_str()];
        texts.extend(r.negatives.iter().map(String::as_str));
        let e = encode(state, tok, &texts, &EncodeOptions::default())?;
        let pos = cosine_similarity(&e[0].values, &e[1].values)?;
        let mut best = f64::NEG_INFINITY;
        for n in &e[2..] {
            best = best.max(cosine_similarity(&e[0].values, &n.values)?);
        }
        wins += usize::from(pos > best);
    }
    Ok(wins)
}

fn main() -> longbert::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = KeywordSpace::new(120, 60, &mut rng)?;
    let tok = Tokenizer::new(space.vocabulary()?);
    let mut pairs = keyword_pairs(&space, 2200, 3, 4, &mut rng);
    let held_pairs = pairs.split_off(2000);
    let mut triplets = keyword_triplets(&space, 1200, 3, &mut rng);
    let held_triplets = triplets.split_off(1000);
    println!("pair example: {:?}", pairs[0]);

    let model = ModelConfig::desk(tok.vocab().len());
    let config = |steps: u64, batch_size| TrainConfig {
        model: model.clone(),
        optimizer: OptimizerConfig {
            total_steps: steps,
            warmup_steps: steps / 10,
            ..OptimizerConfig::desk()
        },
        batch_size,
        train_seq_len: 64,
        seed: 3,
        ..TrainConfig::default()
    };
    let init = EncoderState::init(model.clone(), 3)?;
    let (same, other) = pair_gap(&init, &tok, &held_pairs)?;
    println!("untrained: paired cosine {same:.3}, mismatched {other:.3}");

    let mut pairs_stage = Trainer::<f32>::new(config(300, 32), Stage::Pairs, init)?;
    pairs_stage.run(&tok, &StageData::Pairs(pairs), None)?;
    let (same, other) = pair_gap(&pairs_stage.state, &tok, &held_pairs)?;
    println!("after pairs: paired cosine {same:.3}, mismatched {other:.3}");
    let wins = triplet_wins(&pairs_stage.state, &tok, &held_triplets)?;
    println!("after pairs: triplet wins {wins}/{}", held_triplets.len());

    let mut triplet_stage = Trainer::<f32>::new(config(150, 8), Stage::Triplets, pairs_stage.state)?;
    triplet_stage.run(&tok, &StageData::Triplets(triplets), None)?;
    let wins = triplet_wins(&triplet_stage.state, &tok, &held_triplets)?;
    println!("after triplets: triplet wins {wins}/{}", held_triplets.len());
    Ok(())
}
