//! WordPiece tokenization with whole-word ids, truncation and padding.
//!
//! `cargo run --example tokenize`

use longbert::tokenizer::{pad_batch, Tokenizer, Vocabulary};

fn main() -> longbert::Result<()> {
    let vocab = Vocabulary::with_specials([
        "the", "model", "reads", "long", "un", "##aff", "##able", "doc", "##ument", "##s", ",", ".",
    ])?;
    let tokenizer = Tokenizer::new(vocab);

    let seq = tokenizer.tokenize("The model reads unaffable, long documents.", 32)?;
    for (id, word) in seq.token_ids.iter().zip(&seq.word_ids) {
        let token = tokenizer.vocab().token(*id).unwrap_or("?");
        match word {
            Some(w) => println!("{id:>3}  {token:<8} word {w}"),
            None => println!("{id:>3}  {token:<8} special"),
        }
    }
    println!("round trip: {}", tokenizer.detokenize(&seq.token_ids));

    // Unknown words become a single [UNK]; truncation keeps [SEP].
    let short = tokenizer.tokenize("the zebra reads the documents", 5)?;
    println!("truncated to 5: {}", tokenizer.detokenize(&short.token_ids));

    let a = tokenizer.tokenize("long documents", 16)?;
    let b = tokenizer.tokenize("the model", 16)?;
    let batch = pad_batch(&[a, b], tokenizer.vocab().pad_id())?;
    for row in 0..batch.batch {
        println!("row {row}: ids {:?} mask {:?}", batch.row_ids(row), batch.row_mask(row));
    }
    Ok(())
}
