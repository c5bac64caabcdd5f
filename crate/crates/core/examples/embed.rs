//! Mean-pooled embeddings, cosine similarity and the two output formats.
//!
//! `cargo run --release --example embed`

use longbert::embedder::{
    cosine_similarity, encode, read_embeddings_bin, write_embeddings_bin, write_embeddings_jsonl, EncodeOptions,
};
use longbert::encoder::{EncoderState, ModelConfig};
use longbert::synthetic::{pseudo_words, vocabulary};
use longbert::tokenizer::Tokenizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> longbert::Result<()> {
    let words = pseudo_words(40, &mut ChaCha8Rng::seed_from_u64(2))?;
    let tokenizer = Tokenizer::new(vocabulary(&words)?);
    let state = EncoderState::<f32>::init(ModelConfig::desk(tokenizer.vocab().len()), 2)?;

    let texts = vec![
        words[..6].join(" "),
        words[..5].join(" "),
        words[20..26].join(" "),
        // Long inputs need no special handling.
        words.iter().cycle().take(3000).cloned().collect::<Vec<_>>().join(" "),
    ];
    let opts = EncodeOptions {
        max_len: 4096,
        ..EncodeOptions::default()
    };
    let mut vectors = encode(&state, &tokenizer, &texts, &opts)?;
    for (i, v) in vectors.iter_mut().enumerate() {
        v.source_id = Some(format!("t{i}"));
    }
    println!("dimension {}", vectors[0].dim());
    for i in 0..vectors.len() {
        let row: Vec<String> = (0..vectors.len())
            .map(|j| cosine_similarity(&vectors[i].values, &vectors[j].values).map(|s| format!("{s:6.3}")))
            .collect::<longbert::Result<_>>()?;
        println!("t{i}: {}", row.join(" "));
    }

    let dir = std::env::temp_dir();
    let (bin, jsonl) = (dir.join("longbert-example.bin"), dir.join("longbert-example.jsonl"));
    write_embeddings_bin(&bin, &vectors)?;
    write_embeddings_jsonl(&jsonl, &vectors)?;
    println!("wrote {} and {}", bin.display(), jsonl.display());
    assert_eq!(read_embeddings_bin(&bin)?, vectors);
    Ok(())
}
