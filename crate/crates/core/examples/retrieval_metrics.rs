//! Retrieval metrics over a hand-made run: nDCG, MAP, MRR, precision and
//! recall at several cutoffs, plus the TSV formats the CLI reads.
//!
//! `cargo run --example retrieval_metrics`

use longbert::eval::{retrieval_suite, QrelSet, RetrievalRun};

fn main() -> longbert::Result<()> {
    let mut qrels = QrelSet::new();
    qrels.insert("q1", "d3", 1);
    qrels.insert("q1", "d7", 2);
    qrels.insert("q2", "d1", 1);
    // Judged but not relevant.
    qrels.insert("q2", "d4", 0);

    let ranked = |docs: &[&str]| docs.iter().enumerate().map(|(i, d)| (d.to_string(), 1.0 - i as f64 / 10.0)).collect();
    let mut run = RetrievalRun::new();
    run.insert("q1", ranked(&["d1", "d3", "d5", "d7"]))?;
    run.insert("q2", ranked(&["d4", "d2", "d9"]))?;

    for (name, value) in retrieval_suite(&run, &qrels, &[1, 3, 10])? {
        println!("{name:<14} {value:.4}");
    }

    let path = std::env::temp_dir().join("longbert-run.tsv");
    run.write_tsv(&path)?;
    let reread = RetrievalRun::load_tsv(&path)?;
    println!("run TSV round trip equal: {}", reread.ranking("q1") == run.ranking("q1"));
    Ok(())
}
