//! Seeded toy corpora for desk-scale experiments: pseudo-word vocabularies,
//! repeated-word documents for MLM, keyword pairs and triplets for the
//! contrastive stages, and a long-document retrieval set.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{CorpusRecord, PairRecord, TripletRecord, NUM_NEGATIVES};
use crate::error::{Error, Result};
use crate::eval::{QrelSet, RetrievalTask};
use crate::tokenizer::Vocabulary;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// `n` distinct two-syllable pseudo-words such as `bako` or `tesu`.
pub fn pseudo_words<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<String>> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let max = syllables.len() * syllables.len();
    if n > max {
        return Err(Error::Invalid(format!("at most {max} pseudo-words are available, asked for {n}")));
    }
    let mut all: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    Ok(all)
}

/// Special tokens followed by the words, each a whole-word entry.
pub fn vocabulary(words: &[String]) -> Result<Vocabulary> {
    Vocabulary::with_specials(words.iter().map(String::as_str))
}

/// Documents made of runs of one repeated word. A masked word can be
/// recovered from its immediate neighbours, so the task rewards local
/// attention and nothing else.
pub fn repeated_word_corpus<R: Rng + ?Sized>(
    words: &[String],
    docs: usize,
    words_per_doc: usize,
    run: std::ops::RangeInclusive<usize>,
    rng: &mut R,
) -> Vec<String> {
    (0..docs)
        .map(|_| {
            let mut out: Vec<&str> = Vec::with_capacity(words_per_doc);
            while out.len() < words_per_doc {
                let w = words.choose(rng).expect("non-empty word list");
                let n = rng.gen_range(run.clone()).min(words_per_doc - out.len());
                out.extend(std::iter::repeat_n(w.as_str(), n));
            }
            out.join(" ")
        })
        .collect()
}

/// Word pools for the contrastive toys: topical keywords and shared filler.
#[derive(Clone, Debug)]
pub struct KeywordSpace {
    pub keywords: Vec<String>,
    pub filler: Vec<String>,
}

impl KeywordSpace {
    pub fn new<R: Rng + ?Sized>(keywords: usize, filler: usize, rng: &mut R) -> Result<Self> {
        let mut words = pseudo_words(keywords + filler, rng)?;
        let filler = words.split_off(keywords);
        Ok(Self { keywords: words, filler })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let all: Vec<String> = self.keywords.iter().chain(&self.filler).cloned().collect();
        vocabulary(&all)
    }

    /// `n` distinct keywords.
    pub fn topic<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<String> {
        self.keywords.choose_multiple(rng, n).cloned().collect()
    }

    /// The topic's words mixed into `filler` random filler words, in random order.
    pub fn text<R: Rng + ?Sized>(&self, topic: &[String], filler: usize, rng: &mut R) -> String {
        let mut words: Vec<&str> = topic.iter().map(String::as_str).collect();
        words.extend((0..filler).map(|_| self.filler.choose(rng).expect("filler").as_str()));
        words.shuffle(rng);
        words.join(" ")
    }

    fn filler_text<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&str> {
        (0..n).map(|_| self.filler.choose(rng).expect("filler").as_str()).collect()
    }
}

/// Query/target pairs that share a keyword topic, drawn round-robin from
/// `sources` named sources.
pub fn keyword_pairs<R: Rng + ?Sized>(
    space: &KeywordSpace,
    n: usize,
    topic_size: usize,
    sources: usize,
    rng: &mut R,
) -> Vec<PairRecord> {
    (0..n)
        .map(|i| {
            let topic = space.topic(topic_size, rng);
            PairRecord {
                query: space.text(&topic, 2, rng),
                target: space.text(&topic, 6, rng),
                source: format!("toy{}", i % sources.max(1)),
            }
        })
        .collect()
}

/// Triplets whose positive shares the query's topic and whose negatives
/// share nothing with it.
pub fn keyword_triplets<R: Rng + ?Sized>(
    space: &KeywordSpace,
    n: usize,
    topic_size: usize,
    rng: &mut R,
) -> Vec<TripletRecord> {
    (0..n)
        .map(|_| {
            let topic = space.topic(topic_size, rng);
            let used: BTreeSet<&String> = topic.iter().collect();
            let others: Vec<String> = space.keywords.iter().filter(|k| !used.contains(k)).cloned().collect();
            let negatives = (0..NUM_NEGATIVES)
                .map(|_| {
                    let t: Vec<String> = others.choose_multiple(rng, topic_size).cloned().collect();
                    space.text(&t, 6, rng)
                })
                .collect();
            TripletRecord {
                query: space.text(&topic, 2, rng),
                positive: space.text(&topic, 6, rng),
                negatives,
            }
        })
        .collect()
}

/// Retrieval set of `docs` long documents, each with one query. Every
/// document opens with `prefix_words` filler words; its topic keywords sit
/// after that prefix, followed by `tail_words` more filler.
pub fn long_document_retrieval<R: Rng + ?Sized>(
    space: &KeywordSpace,
    docs: usize,
    topic_size: usize,
    prefix_words: usize,
    tail_words: usize,
    rng: &mut R,
) -> RetrievalTask {
    let mut queries = Vec::with_capacity(docs);
    let mut corpus = Vec::with_capacity(docs);
    let mut qrels = QrelSet::default();
    for i in 0..docs {
        let topic = space.topic(topic_size, rng);
        let mut words = space.filler_text(prefix_words, rng);
        let mut span = space.filler_text(topic_size, rng);
        span.extend(topic.iter().map(String::as_str));
        span.shuffle(rng);
        words.extend(span);
        words.extend(space.filler_text(tail_words, rng));
        let (qid, did) = (format!("q{i}"), format!("d{i}"));
        queries.push(CorpusRecord {
            id: qid.clone(),
            text: space.text(&topic, 2, rng),
        });
        corpus.push(CorpusRecord {
            id: did.clone(),
            text: words.join(" "),
        });
        qrels.insert(&qid, &did, 1);
    }
    RetrievalTask { queries, corpus, qrels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn words_are_distinct_and_seeded() {
        let a = pseudo_words(300, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = pseudo_words(300, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 300);
        assert!(pseudo_words(10_000, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn corpus_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = pseudo_words(20, &mut rng).unwrap();
        let docs = repeated_word_corpus(&words, 5, 37, 4..=9, &mut rng);
        assert!(docs.iter().all(|d| d.split(' ').count() == 37));
    }

    #[test]
    fn triplets_are_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = KeywordSpace::new(50, 20, &mut rng).unwrap();
        for t in keyword_triplets(&space, 10, 3, &mut rng) {
            assert_eq!(t.negatives.len(), NUM_NEGATIVES);
            let q: BTreeSet<&str> = t.query.split(' ').filter(|w| space.keywords.iter().any(|k| k == w)).collect();
            assert_eq!(q.len(), 3);
            assert!(q.iter().all(|w| t.positive.split(' ').any(|p| p == *w)));
            for n in &t.negatives {
                assert!(q.iter().all(|w| !n.split(' ').any(|p| p == *w)));
            }
        }
    }
}
