//! Mini-batch k-means and V-measure, first on separated blobs, then on
//! embeddings of topical texts.
//!
//! `cargo run --release --example clustering`

use longbert::data::LabeledText;
use longbert::embedder::EncodeOptions;
use longbert::encoder::{EncoderState, ModelConfig};
use longbert::eval::{evaluate_clustering, minibatch_kmeans, v_measure, KMeansOptions};
use longbert::synthetic::{keyword_pairs, KeywordSpace};
use longbert::tokenizer::Tokenizer;
use longbert::trainer::{OptimizerConfig, Stage, StageData, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centres = [[0.0, 0.0], [5.0, 5.0], [0.0, 6.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..100 {
            points.push(vec![centre[0] + rng.gen_range(-1.0f32..1.0), centre[1] + rng.gen_range(-1.0f32..1.0)]);
            truth.push(c);
        }
    }
    let fit = minibatch_kmeans(&points, 3, &KMeansOptions::default())?;
    let v = v_measure(&fit.labels, &truth)?;
    println!(
        "blobs: homogeneity {:.3} completeness {:.3} v-measure {:.3} inertia {:.1}",
        v.homogeneity, v.completeness, v.v_measure, fit.inertia
    );

    // Short topical texts buried in filler, embedded before and after pair training.
    let space = KeywordSpace::new(120, 60, &mut rng)?;
    let tokenizer = Tokenizer::new(space.vocabulary()?);
    let topics: Vec<Vec<String>> = (0..10).map(|_| space.topic(3, &mut rng)).collect();
    let items: Vec<LabeledText> = (0..200)
        .map(|i| LabeledText {
            text: space.text(&topics[i % 10], 10, &mut rng),
            label: format!("topic{}", i % 10),
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
            seed: 4,
            ..TrainConfig::default()
        },
        Stage::Pairs,
        EncoderState::init(model, 4)?,
    )?;
    let opts = EncodeOptions::default();
    let kmeans = KMeansOptions::default();
    let before = evaluate_clustering(&trainer.state, &tokenizer, &items, &opts, &kmeans)?;
    trainer.run(&tokenizer, &StageData::Pairs(keyword_pairs(&space, 2000, 3, 2, &mut rng)), None)?;
    let after = evaluate_clustering(&trainer.state, &tokenizer, &items, &opts, &kmeans)?;
    println!("texts: v-measure untrained {:.3}, after pair training {:.3}", before.v_measure, after.v_measure);
    Ok(())
}
