//! Mini-batch k-means and V-measure.

use std::collections::HashMap;
use std::hash::Hash;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansOptions {
    pub batch_size: usize,
    /// Budget in passes over the data: `epochs * n / batch_size` updates.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut centroids = vec![x[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(x[pick].clone());
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Mini-batch k-means with per-centroid learning rate `1/count`.
pub fn minibatch_kmeans(data: &[Vec<f32>], k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means needs 1 <= k <= {n} items, got k = {k}")));
    }
    let dim = data[0].len();
    if data.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("minibatch_kmeans", "items have different dimensions"));
    }
    let x: Vec<Vec<f64>> = data.iter().map(|v| v.iter().map(|&a| f64::from(a)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = seed_centroids(&x, k, &mut rng);
    let mut counts = vec![0u64; k];
    let b = opts.batch_size.clamp(1, n);
    let iterations = (opts.epochs * n).div_ceil(b);
    for _ in 0..iterations {
        let batch = sample(&mut rng, n, b).into_vec();
        let assigned: Vec<usize> = batch.iter().map(|&i| nearest(&x[i], &centroids).0).collect();
        for (&i, &c) in batch.iter().zip(&assigned) {
            counts[c] += 1;
            let lr = 1.0 / counts[c] as f64;
            for (cj, xj) in centroids[c].iter_mut().zip(&x[i]) {
                *cj += lr * (xj - *cj);
            }
        }
    }
    let mut inertia = 0.0;
    let labels = x
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, &centroids);
            inertia += d;
            c
        })
        .collect();
    Ok(KMeansResult {
        labels,
        centroids,
        inertia,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn sorted_counts<K: Eq + Hash>(m: &HashMap<K, usize>) -> Vec<usize> {
    let mut v: Vec<usize> = m.values().copied().collect();
    v.sort_unstable();
    v
}

/// Homogeneity, completeness and their harmonic mean from the contingency
/// table of `pred` against `truth`. Sums run over sorted counts, so the
/// result depends only on the table's shape, never on the label values.
pub fn v_measure<A: Eq + Hash, B: Eq + Hash>(pred: &[A], truth: &[B]) -> Result<VMeasure> {
    if pred.len() != truth.len() {
        return Err(Error::shape("v_measure", format!("{} vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("v_measure of empty labelings".into()));
    }
    let n = pred.len() as f64;
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    let mut by_pred: HashMap<&A, usize> = HashMap::new();
    let mut by_true: HashMap<&B, usize> = HashMap::new();
    for (p, t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *by_pred.entry(p).or_default() += 1;
        *by_true.entry(t).or_default() += 1;
    }
    let h_true = entropy(&sorted_counts(&by_true), n);
    let h_pred = entropy(&sorted_counts(&by_pred), n);
    let mut cells: Vec<(usize, usize, usize)> = joint
        .iter()
        .map(|(&(p, t), &c)| (c, by_pred[p], by_true[t]))
        .collect();
    cells.sort_unstable();
    // H(C|K) and H(K|C)
    let mut h_true_given_pred = 0.0;
    let mut h_pred_given_true = 0.0;
    for (c, np, nt) in cells {
        let c = c as f64;
        h_true_given_pred -= c / n * (c / np as f64).ln();
        h_pred_given_true -= c / n * (c / nt as f64).ln();
    }
    let homogeneity = if h_true == 0.0 { 1.0 } else { 1.0 - h_true_given_pred / h_true };
    let completeness = if h_pred == 0.0 { 1.0 } else { 1.0 - h_pred_given_true / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v_measure,
    })
}

/// Embeddings with gold labels; `k` is the number of distinct labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringTask {
    pub embeddings: Vec<Vec<f32>>,
    pub labels: Vec<String>,
}

impl ClusteringTask {
    pub fn k(&self) -> usize {
        let mut l: Vec<&String> = self.labels.iter().collect();
        l.sort();
        l.dedup();
        l.len()
    }

    pub fn evaluate(&self, opts: &KMeansOptions) -> Result<VMeasure> {
        if self.embeddings.len() != self.labels.len() {
            return Err(Error::shape("clustering", "one label per embedding required"));
        }
        let result = minibatch_kmeans(&self.embeddings, self.k(), opts)?;
        v_measure(&result.labels, &self.labels)
    }
}
