//! Binary-relevance retrieval metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedder::EmbeddingVector;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Relevant documents per query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QrelSet {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment; only positive relevance is kept.
    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, relevance: i64) {
        let entry = self.relevant.entry(query.into()).or_default();
        if relevance > 0 {
            entry.insert(doc.into());
        }
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    /// Every judged query must appear in `known`.
    pub fn check_queries<'q>(&self, known: impl IntoIterator<Item = &'q str>) -> Result<()> {
        let known: HashSet<&str> = known.into_iter().collect();
        match self.queries().find(|q| !known.contains(q)) {
            Some(q) => Err(Error::Invalid(format!("qrels reference unknown query `{q}`"))),
            None => Ok(()),
        }
    }

    /// Tab-separated `query_id doc_id relevance` lines.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 3 {
                return Err(bad("expected `query_id<TAB>doc_id<TAB>relevance`"));
            }
            let rel: i64 = f[2].trim().parse().map_err(|_| bad("relevance is not an integer"))?;
            out.insert(f[0], f[1], rel);
        }
        Ok(out)
    }
}

/// Ranked documents per query, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalRun {
    ranked: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the ranking for `query`; scores must be nonincreasing and doc
    /// ids unique.
    pub fn insert(&mut self, query: impl Into<String>, ranking: Vec<(String, f64)>) -> Result<()> {
        let query = query.into();
        if ranking.windows(2).any(|w| w[1].1 > w[0].1 || w[1].1.is_nan()) {
            return Err(Error::Invalid(format!("ranking for `{query}` is not sorted by score")));
        }
        let mut seen = HashSet::new();
        if let Some((d, _)) = ranking.iter().find(|(d, _)| !seen.insert(d.as_str())) {
            return Err(Error::Invalid(format!("doc `{d}` ranked twice for `{query}`")));
        }
        self.ranked.insert(query, ranking);
        Ok(())
    }

    pub fn ranking(&self, query: &str) -> &[(String, f64)] {
        self.ranked.get(query).map_or(&[], Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.ranked.keys().map(String::as_str)
    }

    /// Ranks every document for every query by cosine similarity, keeping the
    /// best `top_k`. Ties keep corpus order.
    pub fn from_embeddings(
        queries: &[(String, EmbeddingVector)],
        docs: &[(String, EmbeddingVector)],
        top_k: usize,
    ) -> Result<Self> {
        let unit = |v: &EmbeddingVector| -> Result<Vec<f64>> {
            let n = v.values.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid("cannot rank a zero embedding".into()));
            }
            Ok(v.values.iter().map(|&x| f64::from(x) / n).collect())
        };
        let doc_units = docs.iter().map(|(_, v)| unit(v)).collect::<Result<Vec<_>>>()?;
        let mut run = Self::new();
        for (qid, qv) in queries {
            let q = unit(qv)?;
            if docs.iter().any(|(_, d)| d.dim() != q.len()) {
                return Err(Error::shape("rank", "query and document dimensions differ"));
            }
            let mut scored: Vec<(usize, f64)> = doc_units
                .iter()
                .enumerate()
                .map(|(i, d)| (i, d.iter().zip(&q).map(|(a, b)| a * b).sum()))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(top_k);
            run.insert(qid.clone(), scored.into_iter().map(|(i, s)| (docs[i].0.clone(), s)).collect())?;
        }
        Ok(run)
    }

    /// Tab-separated `query_id doc_id rank score`, rank starting at 1.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 4 {
                return Err(bad("expected `query_id<TAB>doc_id<TAB>rank<TAB>score`"));
            }
            let rank: usize = f[2].trim().parse().map_err(|_| bad("rank is not an integer"))?;
            let score: f64 = f[3].trim().parse().map_err(|_| bad("score is not a number"))?;
            rows.entry(f[0].to_string()).or_default().push((rank, f[1].to_string(), score));
        }
        let mut run = Self::new();
        for (q, mut r) in rows {
            r.sort_by_key(|x| x.0);
            run.insert(q, r.into_iter().map(|(_, d, s)| (d, s)).collect())?;
        }
        Ok(run)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (q, ranking) in &self.ranked {
            for (r, (d, s)) in ranking.iter().enumerate() {
                writeln!(out, "{q}\t{d}\t{}\t{s}", r + 1).expect("string write");
            }
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Relevance flags of the top `k` results.
fn hits(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> Vec<bool> {
    ranking.iter().take(k).map(|(d, _)| relevant.contains(d)).collect()
}

pub fn ndcg_query(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let dcg: f64 = hits(ranking, relevant, k)
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .fold(0.0, |a, b| a + b);
    let ideal: f64 = (0..k.min(relevant.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / ideal
}

pub fn mrr_query(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    hits(ranking, relevant, k)
        .iter()
        .position(|&h| h)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Average precision at `k`, normalized by `min(k, |relevant|)`.
pub fn ap_query(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, h) in hits(ranking, relevant, k).into_iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(relevant.len()) as f64
}

pub fn precision_query(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    hits(ranking, relevant, k).iter().filter(|&&h| h).count() as f64 / k as f64
}

pub fn recall_query(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    hits(ranking, relevant, k).iter().filter(|&&h| h).count() as f64 / relevant.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RetrievalMetric {
    Ndcg,
    Mrr,
    Map,
    Precision,
    Recall,
}

impl RetrievalMetric {
    pub const ALL: [RetrievalMetric; 5] = [Self::Ndcg, Self::Mrr, Self::Map, Self::Precision, Self::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ndcg => "ndcg",
            Self::Mrr => "mrr",
            Self::Map => "map",
            Self::Precision => "precision",
            Self::Recall => "recall",
        }
    }

    fn per_query(self) -> fn(&[(String, f64)], &BTreeSet<String>, usize) -> f64 {
        match self {
            Self::Ndcg => ndcg_query,
            Self::Mrr => mrr_query,
            Self::Map => ap_query,
            Self::Precision => precision_query,
            Self::Recall => recall_query,
        }
    }
}

/// Mean of `metric@k` over judged queries that have at least one relevant
/// document. Judged queries missing from the run score 0.
pub fn mean_metric(run: &RetrievalRun, qrels: &QrelSet, metric: RetrievalMetric, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be at least 1".into()));
    }
    if qrels.is_empty() {
        return Err(Error::Invalid("qrels are empty".into()));
    }
    let f = metric.per_query();
    let scores: Vec<f64> = qrels
        .relevant
        .iter()
        .filter(|(_, rel)| !rel.is_empty())
        .map(|(q, rel)| f(run.ranking(q), rel, k))
        .collect();
    if scores.is_empty() {
        return Err(Error::Invalid("no judged query has a relevant document".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn ndcg_at_k(run: &RetrievalRun, qrels: &QrelSet, k: usize) -> Result<f64> {
    mean_metric(run, qrels, RetrievalMetric::Ndcg, k)
}

/// `metric@k` for every metric and cutoff, keyed by name (`"ndcg@10"`).
pub fn retrieval_suite(run: &RetrievalRun, qrels: &QrelSet, ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for m in RetrievalMetric::ALL {
        for &k in ks {
            out.insert(format!("{}@{k}", m.name()), mean_metric(run, qrels, m, k)?);
        }
    }
    Ok(out)
}
