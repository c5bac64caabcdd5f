//! Evaluation: retrieval metrics, clustering, rank correlation, and sweeps
//! over the tokenizer's maximum sequence length.

mod clustering;
mod correlation;
mod retrieval;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use clustering::{minibatch_kmeans, v_measure, ClusteringTask, KMeansOptions, KMeansResult, VMeasure};
pub use correlation::{average_ranks, pearson, spearman};
pub use retrieval::{
    ap_query, mean_metric, mrr_query, ndcg_at_k, ndcg_query, precision_query, recall_query, retrieval_suite,
    QrelSet, RetrievalMetric, RetrievalRun,
};

use crate::data::{CorpusRecord, LabeledText, ScoredPair};
use crate::embedder::{cosine_similarity, encode, EncodeOptions};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mlm::{mlm_accuracy, MlmEvalOptions};
use crate::tensor::Scalar;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub length: usize,
    pub metric: String,
    pub value: f64,
}

/// Metric values per maximum sequence length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn value(&self, length: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.length == length && r.metric == metric)
            .map(|r| r.value)
    }

    /// `length,metric,value` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.length, r.metric, r.value).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Lengths as rows, metrics as columns.
    pub fn render(&self) -> String {
        let mut metrics: Vec<&str> = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
            if !lengths.contains(&r.length) {
                lengths.push(r.length);
            }
        }
        let mut out = format!("{:>8}", "length");
        for m in &metrics {
            write!(out, " {m:>14}").expect("string write");
        }
        out.push('\n');
        for l in lengths {
            write!(out, "{l:>8}").expect("string write");
            for m in &metrics {
                match self.value(l, m) {
                    Some(v) => write!(out, " {v:>14.6}"),
                    None => write!(out, " {:>14}", "-"),
                }
                .expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `task` once per length; lengths must be strictly ascending.
pub fn length_sweep(
    lengths: &[usize],
    mut task: impl FnMut(usize) -> Result<Vec<(String, f64)>>,
) -> Result<SweepTable> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("sweep lengths must be strictly ascending, got {lengths:?}")));
    }
    let mut table = SweepTable::default();
    for &length in lengths {
        for (metric, value) in task(length)? {
            table.rows.push(SweepRow { length, metric, value });
        }
    }
    Ok(table)
}

pub fn mlm_sweep<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    texts: &[String],
    lengths: &[usize],
    opts: &MlmEvalOptions,
) -> Result<SweepTable> {
    length_sweep(lengths, |len| {
        let acc = mlm_accuracy(state, tokenizer, texts, len, opts)?;
        Ok(vec![("mlm_accuracy".to_string(), acc.accuracy())])
    })
}

/// Queries, documents and judgments for one retrieval task.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub queries: Vec<CorpusRecord>,
    pub corpus: Vec<CorpusRecord>,
    pub qrels: QrelSet,
}

impl RetrievalTask {
    /// Encodes queries and documents, ranks by cosine, and scores the run.
    pub fn run<T: Scalar>(
        &self,
        state: &EncoderState<T>,
        tokenizer: &Tokenizer,
        opts: &EncodeOptions,
        top_k: usize,
    ) -> Result<RetrievalRun> {
        self.qrels.check_queries(self.queries.iter().map(|q| q.id.as_str()))?;
        let embed = |records: &[CorpusRecord]| -> Result<Vec<(String, crate::embedder::EmbeddingVector)>> {
            let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            Ok(records
                .iter()
                .map(|r| r.id.clone())
                .zip(encode(state, tokenizer, &texts, opts)?)
                .collect())
        };
        RetrievalRun::from_embeddings(&embed(&self.queries)?, &embed(&self.corpus)?, top_k)
    }

    pub fn evaluate<T: Scalar>(
        &self,
        state: &EncoderState<T>,
        tokenizer: &Tokenizer,
        opts: &EncodeOptions,
        ks: &[usize],
    ) -> Result<BTreeMap<String, f64>> {
        let top_k = ks.iter().copied().max().unwrap_or(10);
        retrieval_suite(&self.run(state, tokenizer, opts, top_k)?, &self.qrels, ks)
    }
}

pub fn retrieval_sweep<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    task: &RetrievalTask,
    lengths: &[usize],
    ks: &[usize],
    opts: &EncodeOptions,
) -> Result<SweepTable> {
    length_sweep(lengths, |len| {
        let o = EncodeOptions { max_len: len, ..*opts };
        Ok(task.evaluate(state, tokenizer, &o, ks)?.into_iter().collect())
    })
}

/// V-measure of mini-batch k-means over the items' embeddings.
pub fn evaluate_clustering<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    items: &[LabeledText],
    opts: &EncodeOptions,
    kmeans: &KMeansOptions,
) -> Result<VMeasure> {
    if items.is_empty() {
        return Err(Error::Invalid("no clustering items".into()));
    }
    let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
    let task = ClusteringTask {
        embeddings: encode(state, tokenizer, &texts, opts)?.into_iter().map(|e| e.values).collect(),
        labels: items.iter().map(|i| i.label.clone()).collect(),
    };
    task.evaluate(kmeans)
}

/// Spearman correlation between cosine similarity and the gold scores.
pub fn evaluate_sts<T: Scalar>(
    state: &EncoderState<T>,
    tokenizer: &Tokenizer,
    pairs: &[ScoredPair],
    opts: &EncodeOptions,
) -> Result<f64> {
    let a: Vec<&str> = pairs.iter().map(|p| p.sentence1.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.sentence2.as_str()).collect();
    let ea = encode(state, tokenizer, &a, opts)?;
    let eb = encode(state, tokenizer, &b, opts)?;
    let sims = ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| cosine_similarity(&x.values, &y.values))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    spearman(&sims, &gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_requires_ascending() {
        assert!(length_sweep(&[64, 32], |_| Ok(vec![])).is_err());
        let t = length_sweep(&[8, 16], |l| Ok(vec![("m".into(), l as f64)])).unwrap();
        assert_eq!(t.to_csv(), "length,metric,value\n8,m,8\n16,m,16\n");
        assert_eq!(t.value(16, "m"), Some(16.0));
        assert!(t.render().contains("length"));
    }
}
