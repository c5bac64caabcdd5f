//! Reference implementations shared by the integration tests: a central
//! finite-difference gradient checker and brute-force retrieval, clustering
//! and correlation metrics written independently of the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use longbert::alibi::{AlibiSlopes, AttentionBias, BiasVariant};
use longbert::contrastive::{hard_negative_loss, pair_info_nce};
use longbert::data::NUM_NEGATIVES;
use longbert::embedder::{embed_on_tape, PoolingConfig};
use longbert::encoder::{BoundEncoder, EncoderState, GluVariant, ModelConfig, PositionScheme};
use longbert::mlm::{apply_whole_word_masking, mlm_loss, MaskedBatch, MaskingConfig};
use longbert::synthetic::{pseudo_words, vocabulary};
use longbert::tensor::{AttentionInputs, Tape, Tensor, Var};
use longbert::tokenizer::{PaddedBatch, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Entries smaller than this are compared on an absolute scale
/// (`FD_TOLERANCE * FD_FLOOR` = 1e-9). Rounding in the difference quotient
/// is about `eps * |loss| / h`, a few 1e-10 for the losses checked here, so
/// exact zeros (biases feeding a layer norm, saturated softmax rows) would
/// otherwise fail on noise alone.
pub const FD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel: f64,
    pub entries: usize,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.entries > 0 && self.max_rel < FD_TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed, uneven weights so that every
/// output entry contributes a distinct amount.
fn project(tape: &Tape<'_, f64>, out: Var) -> Var {
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let n = shape.iter().product::<usize>();
    let w: Vec<f64> = (0..n).map(|i| (0.37 * i as f64 + 0.1).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    tape.sum(tape.mul(out, w).unwrap())
}

/// Checks d(f)/d(inputs) against central differences. `f` must be
/// deterministic; anything random inside it must come from a fixed seed.
pub fn check_fn<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F) -> GradCheck
where
    F: for<'a> Fn(&Tape<'a, f64>, &[Var]) -> longbert::Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = inputs.into_iter().map(Tensor::trainable).collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars).unwrap();
        let root = project(&tape, out);
        tape.scalar(root)
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars).unwrap();
    let root = project(&tape, out);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    let mut worst = (0.0, 0.0);
    let mut xs = inputs.clone();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i][j], numeric);
            if e > max_rel {
                max_rel = e;
                worst = (analytic[i][j], numeric);
            }
            entries += 1;
        }
    }
    GradCheck {
        name: name.to_string(),
        max_rel,
        entries,
        worst,
    }
}

/// Checks the gradient of `loss` with respect to every parameter of `state`.
pub fn check_model<F>(name: &str, mut state: EncoderState<f64>, loss: F) -> GradCheck
where
    F: for<'a> Fn(&'a EncoderState<f64>, &Tape<'a, f64>, &BoundEncoder) -> longbert::Result<Var>,
{
    let value = |s: &EncoderState<f64>| -> f64 {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let l = loss(s, &tape, &bound).unwrap();
        tape.scalar(l)
    };
    let analytic = {
        let tape = Tape::new();
        let bound = state.bind(&tape);
        let l = loss(&state, &tape, &bound).unwrap();
        tape.backward(l).unwrap();
        bound.gradients(&tape)
    };
    let sizes: Vec<usize> = state.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    assert_eq!(sizes.len(), analytic.len());
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    let mut worst = (0.0, 0.0);
    for (p, &n) in sizes.iter().enumerate() {
        assert_eq!(analytic[p].len(), n);
        for j in 0..n {
            let nudge = |s: &mut EncoderState<f64>, d: f64| {
                s.named_parameters_mut()[p].1.data_mut()[j] += d;
            };
            let orig = state.named_parameters()[p].1.data()[j];
            nudge(&mut state, FD_STEP);
            let up = value(&state);
            nudge(&mut state, -2.0 * FD_STEP);
            let down = value(&state);
            state.named_parameters_mut()[p].1.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[p][j], numeric);
            if e > max_rel {
                max_rel = e;
                worst = (analytic[p][j], numeric);
            }
            entries += 1;
        }
    }
    GradCheck {
        name: name.to_string(),
        max_rel,
        entries,
        worst,
    }
}

/// One check per differentiable tape operation.
pub fn op_checks() -> Vec<GradCheck> {
    let mut r = rng(42);
    let mut t = |shape: &[usize]| random_tensor(shape, -1.0, 1.0, &mut r);
    let mut out = vec![
        check_fn("matmul", vec![t(&[3, 4]), t(&[4, 5])], |tp, v| tp.matmul(v[0], v[1])),
        check_fn("matmul_nt", vec![t(&[3, 4]), t(&[5, 4])], |tp, v| tp.matmul_nt(v[0], v[1])),
        check_fn("add", vec![t(&[3, 4]), t(&[3, 4])], |tp, v| tp.add(v[0], v[1])),
        check_fn("mul", vec![t(&[3, 4]), t(&[3, 4])], |tp, v| tp.mul(v[0], v[1])),
        check_fn("add_row", vec![t(&[3, 4]), t(&[4])], |tp, v| tp.add_row(v[0], v[1])),
        check_fn("scale", vec![t(&[3, 4])], |tp, v| Ok(tp.scale(v[0], -0.7))),
        check_fn("softmax_lastdim", vec![t(&[3, 5])], |tp, v| tp.softmax_lastdim(v[0])),
        check_fn("layer_norm", vec![t(&[3, 6]), t(&[6]), t(&[6])], |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        check_fn("gather_rows", vec![t(&[5, 3])], |tp, v| tp.gather_rows(v[0], &[0, 2, 2, 4])),
        check_fn("dropout", vec![t(&[4, 5])], |tp, v| Ok(tp.dropout(v[0], 0.3, &mut rng(9)))),
        check_fn("cross_entropy", vec![t(&[4, 6])], |tp, v| tp.cross_entropy(v[0], &[1, 0, 5, 3])),
        check_fn("masked_mean", vec![t(&[6, 3])], |tp, v| tp.masked_mean(v[0], &[1, 1, 0, 1, 0, 1], 2)),
        check_fn("l2_normalize_rows", vec![t(&[3, 4])], |tp, v| tp.l2_normalize_rows(v[0])),
        check_fn("concat_rows", vec![t(&[2, 3]), t(&[3, 3])], |tp, v| tp.concat_rows(&[v[0], v[1]])),
        check_fn("slice_rows", vec![t(&[5, 3])], |tp, v| tp.slice_rows(v[0], 1, 4)),
        check_fn("sum", vec![t(&[3, 4])], |tp, v| Ok(tp.sum(v[0]))),
        check_fn("mean", vec![t(&[3, 4])], |tp, v| Ok(tp.mean(v[0]))),
    ];
    let mut r = rng(43);
    out.push(check_fn("gelu", vec![random_tensor(&[3, 4], -3.0, 3.0, &mut r)], |tp, v| Ok(tp.gelu(v[0]))));
    // Away from the kink at zero.
    let mut x = random_tensor(&[3, 4], 0.1, 1.0, &mut r);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    out.push(check_fn("relu", vec![x], |tp, v| Ok(tp.relu(v[0]))));

    let bias = AttentionBias::build(&AlibiSlopes::compute(2).unwrap(), 4, BiasVariant::Encoder).unwrap();
    let key_mask = [1u8, 1, 1, 1, 1, 1, 1, 0];
    for (name, with_bias, dropout) in [
        ("attention", false, 0.0),
        ("attention+alibi", true, 0.0),
        ("attention+alibi+dropout", true, 0.2),
    ] {
        let qkv = vec![
            random_tensor(&[8, 6], -1.0, 1.0, &mut r),
            random_tensor(&[8, 6], -1.0, 1.0, &mut r),
            random_tensor(&[8, 6], -1.0, 1.0, &mut r),
        ];
        let bias = &bias;
        out.push(check_fn(name, qkv, move |tp, v| {
            let inputs = AttentionInputs {
                batch: 2,
                len: 4,
                heads: 2,
                head_dim: 3,
                key_mask: &key_mask,
                bias: with_bias.then_some(bias),
                dropout,
            };
            tp.attention(v[0], v[1], v[2], &inputs, Some(&mut rng(5)))
        }));
    }
    out
}

/// Two-layer encoder small enough to perturb every parameter.
pub fn tiny_config(vocab_size: usize, position: PositionScheme, glu: GluVariant) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        head_dim: 4,
        ffn_inner: 16,
        glu_variant: glu,
        vocab_size,
        dropout: 0.1,
        attention_dropout: 0.1,
        position,
        // Large enough that normalization does not swamp the perturbation.
        init_std: 0.5,
        ..ModelConfig::desk(vocab_size)
    }
}

pub fn tiny_tokenizer() -> Tokenizer {
    let words = pseudo_words(16, &mut rng(1)).unwrap();
    Tokenizer::new(vocabulary(&words).unwrap())
}

fn texts(tok: &Tokenizer, n: usize, len: usize, r: &mut ChaCha8Rng) -> Vec<String> {
    let words: Vec<&str> = tok.vocab().tokens().iter().filter(|w| !w.starts_with('[')).map(String::as_str).collect();
    (0..n)
        .map(|i| {
            (0..len - i % 2)
                .map(|_| words[r.gen_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn padded(tok: &Tokenizer, texts: &[String]) -> PaddedBatch {
    tok.tokenize_batch(texts, 16).unwrap()
}

/// The full encoder under the MLM loss, the pair loss and the
/// hard-negative loss.
pub fn model_checks() -> Vec<GradCheck> {
    let tok = tiny_tokenizer();
    let v = tok.vocab().len();
    let mut r = rng(77);
    let masking = MaskingConfig {
        rate: 0.4,
        ..MaskingConfig::default()
    };
    let masked: Vec<_> = texts(&tok, 2, 5, &mut r)
        .iter()
        .map(|t| apply_whole_word_masking(&tok.tokenize(t, 16).unwrap(), tok.vocab(), &masking, &mut r))
        .collect();
    let mlm_batch = MaskedBatch::collate(&masked, tok.vocab().pad_id()).unwrap();
    assert!(mlm_batch.masked_count() > 0);

    let q = padded(&tok, &texts(&tok, 2, 4, &mut r));
    let p = padded(&tok, &texts(&tok, 2, 5, &mut r));
    let n = padded(&tok, &texts(&tok, 2 * NUM_NEGATIVES, 3, &mut r));
    let pool = PoolingConfig::default();

    let mut out = Vec::new();
    for (label, position, glu) in [
        ("alibi/geglu", PositionScheme::Alibi, GluVariant::Geglu),
        ("learned/geglu", PositionScheme::Learned { max_positions: 16 }, GluVariant::Geglu),
    ] {
        let state = EncoderState::<f64>::init(tiny_config(v, position, glu), 3).unwrap();
        out.push(check_model(&format!("encoder+mlm_loss [{label}]"), state.clone(), |s, tape, b| {
            mlm_loss(s, tape, b, &mlm_batch, Some(&mut rng(11)))
        }));
        if position != PositionScheme::Alibi {
            continue;
        }
        out.push(check_model("encoder+pair_info_nce", state.clone(), |s, tape, b| {
            let mut g = rng(12);
            let eq = embed_on_tape(s, tape, b, &q, &pool, Some(&mut g))?;
            let ep = embed_on_tape(s, tape, b, &p, &pool, Some(&mut g))?;
            pair_info_nce(tape, eq, ep, 0.05)
        }));
        out.push(check_model("encoder+hard_negative_loss", state, |s, tape, b| {
            let mut g = rng(13);
            let eq = embed_on_tape(s, tape, b, &q, &pool, Some(&mut g))?;
            let ep = embed_on_tape(s, tape, b, &p, &pool, Some(&mut g))?;
            let en = embed_on_tape(s, tape, b, &n, &pool, Some(&mut g))?;
            hard_negative_loss(tape, eq, ep, en, 0.05)
        }));
    }
    let mut r = rng(78);
    let mut t = |shape: &[usize]| random_tensor(shape, -1.0, 1.0, &mut r);
    out.push(check_fn("pair_info_nce", vec![t(&[4, 6]), t(&[4, 6])], |tp, v| {
        pair_info_nce(tp, v[0], v[1], 0.05)
    }));
    out.push(check_fn(
        "hard_negative_loss",
        vec![t(&[2, 6]), t(&[2, 6]), t(&[2 * NUM_NEGATIVES, 6])],
        |tp, v| hard_negative_loss(tp, v[0], v[1], v[2], 0.05),
    ));
    out
}

// ---- brute-force retrieval metrics ----

/// One random retrieval instance: judgments and a ranked run.
pub struct RetrievalInstance {
    pub qrels: BTreeMap<String, BTreeMap<String, i64>>,
    pub run: BTreeMap<String, Vec<(String, f64)>>,
}

pub fn random_retrieval(r: &mut ChaCha8Rng) -> RetrievalInstance {
    let docs: Vec<String> = (0..r.gen_range(5..40)).map(|i| format!("d{i}")).collect();
    let mut qrels = BTreeMap::new();
    let mut run = BTreeMap::new();
    for q in 0..r.gen_range(1..12) {
        let qid = format!("q{q}");
        let mut judged = BTreeMap::new();
        for d in &docs {
            if r.gen_bool(0.25) {
                // Some judged documents are explicitly non-relevant.
                judged.insert(d.clone(), if r.gen_bool(0.7) { r.gen_range(1..3) } else { 0 });
            }
        }
        qrels.insert(qid.clone(), judged);
        // A few judged queries are absent from the run.
        if r.gen_bool(0.9) {
            let mut ranked: Vec<(String, f64)> = docs
                .iter()
                .filter_map(|d| r.gen_bool(0.8).then(|| (d.clone(), r.gen::<f64>())))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            run.insert(qid, ranked);
        }
    }
    RetrievalInstance { qrels, run }
}

fn relevant_set(judged: &BTreeMap<String, i64>) -> BTreeSet<&str> {
    judged.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect()
}

/// Gain vector of the top `k` of the run (1 relevant, 0 otherwise).
fn gains(ranked: &[(String, f64)], rel: &BTreeSet<&str>, k: usize) -> Vec<f64> {
    ranked.iter().take(k).map(|(d, _)| if rel.contains(d.as_str()) { 1.0 } else { 0.0 }).collect()
}

fn dcg(g: &[f64]) -> f64 {
    g.iter().enumerate().map(|(i, x)| x / (i as f64 + 2.0).log2()).sum()
}

/// Per-query reference values for `metric@k`; queries without a relevant
/// document are skipped, unranked queries score zero.
pub fn brute_metric(inst: &RetrievalInstance, metric: &str, k: usize) -> Option<f64> {
    let empty = Vec::new();
    let mut scores = Vec::new();
    for (q, judged) in &inst.qrels {
        let rel = relevant_set(judged);
        if rel.is_empty() {
            continue;
        }
        let ranked = inst.run.get(q).unwrap_or(&empty);
        let g = gains(ranked, &rel, k);
        let hits: f64 = g.iter().sum();
        let s = match metric {
            "ndcg" => {
                // Best achievable ordering: every relevant document first.
                let mut ideal = vec![1.0; rel.len()];
                ideal.resize(ideal.len().max(k), 0.0);
                ideal.truncate(k);
                dcg(&g) / dcg(&ideal)
            }
            "mrr" => g.iter().position(|&x| x > 0.0).map_or(0.0, |i| 1.0 / (i as f64 + 1.0)),
            "map" => {
                let mut total = 0.0;
                for i in 0..g.len() {
                    if g[i] > 0.0 {
                        total += g[..=i].iter().sum::<f64>() / (i as f64 + 1.0);
                    }
                }
                total / (k.min(rel.len()) as f64)
            }
            "precision" => hits / k as f64,
            "recall" => hits / rel.len() as f64,
            _ => unreachable!(),
        };
        scores.push(s);
    }
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

// ---- brute-force V-measure and Spearman ----

fn plogp_sum(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// V-measure through mutual information: homogeneity = I(C;K)/H(C),
/// completeness = I(C;K)/H(K).
pub fn brute_v_measure(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    let clusters: BTreeSet<usize> = pred.iter().copied().collect();
    let count = |c: Option<usize>, k: Option<usize>| -> f64 {
        pred.iter()
            .zip(truth)
            .filter(|(&p, &t)| c.is_none_or(|c| c == t) && k.is_none_or(|k| k == p))
            .count() as f64
    };
    let h_c = plogp_sum(classes.iter().map(|&c| count(Some(c), None)), n);
    let h_k = plogp_sum(clusters.iter().map(|&k| count(None, Some(k))), n);
    let mut mi = 0.0;
    for &c in &classes {
        for &k in &clusters {
            let nck = count(Some(c), Some(k));
            if nck > 0.0 {
                mi += nck / n * (n * nck / (count(Some(c), None) * count(None, Some(k)))).ln();
            }
        }
    }
    let h = if h_c == 0.0 { 1.0 } else { mi / h_c };
    let c = if h_k == 0.0 { 1.0 } else { mi / h_k };
    if h + c == 0.0 {
        0.0
    } else {
        2.0 * h * c / (h + c)
    }
}

/// Ranks by counting: 1 + (values below) + (ties - 1) / 2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let below = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (brute_ranks(x), brute_ranks(y));
    let n = x.len() as f64;
    let distinct = |v: &[f64]| v.iter().map(|a| a.to_bits()).collect::<BTreeSet<_>>().len() == v.len();
    if distinct(x) && distinct(y) {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    }
    let (sx, sy): (f64, f64) = (rx.iter().sum(), ry.iter().sum());
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Outcome of comparing the library's metrics with the references above.
#[derive(Debug, Default)]
pub struct MetricOracleReport {
    /// Largest absolute difference per metric name.
    pub max_diff: BTreeMap<String, f64>,
    /// Relabelings where V-measure changed.
    pub relabel_failures: usize,
}

pub fn metric_oracles(instances: usize, seed: u64) -> MetricOracleReport {
    use longbert::eval::{mean_metric, spearman, v_measure, QrelSet, RetrievalMetric, RetrievalRun};
    let mut r = rng(seed);
    let mut report = MetricOracleReport::default();
    let mut note = |name: &str, d: f64| {
        let e = report.max_diff.entry(name.to_string()).or_insert(0.0);
        *e = e.max(if d.is_nan() { f64::INFINITY } else { d });
    };
    let mut done = 0;
    while done < instances {
        let inst = random_retrieval(&mut r);
        let mut qrels = QrelSet::new();
        for (q, judged) in &inst.qrels {
            for (d, &g) in judged {
                qrels.insert(q.as_str(), d.as_str(), g);
            }
        }
        let mut run = RetrievalRun::new();
        for (q, ranked) in &inst.run {
            run.insert(q.as_str(), ranked.clone()).unwrap();
        }
        if brute_metric(&inst, "mrr", 1).is_none() {
            continue;
        }
        done += 1;
        for m in RetrievalMetric::ALL {
            for k in [1, 3, 5, 10, 20] {
                let want = brute_metric(&inst, m.name(), k).unwrap();
                let got = mean_metric(&run, &qrels, m, k).unwrap();
                note(&format!("{}@{k}", m.name()), (want - got).abs());
            }
        }
    }
    for _ in 0..instances {
        let n = r.gen_range(2..60);
        let k = r.gen_range(1..6);
        let c = r.gen_range(1..6);
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let got = v_measure(&pred, &truth).unwrap().v_measure;
        note("v_measure", (got - brute_v_measure(&pred, &truth)).abs());
        // Renaming clusters must not change the score.
        let mut names: Vec<usize> = (0..k).map(|i| 100 + 7 * i).collect();
        rand::seq::SliceRandom::shuffle(names.as_mut_slice(), &mut r);
        let renamed: Vec<usize> = pred.iter().map(|&p| names[p]).collect();
        if v_measure(&renamed, &truth).unwrap().v_measure != got {
            report.relabel_failures += 1;
        }
    }
    let mut done = 0;
    while done < instances {
        let n = r.gen_range(3..50);
        let tied = done % 2 == 1;
        let draw = |r: &mut ChaCha8Rng| {
            if tied {
                f64::from(r.gen_range(0..6))
            } else {
                r.gen::<f64>()
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let Ok(got) = spearman(&x, &y) else {
            // Constant input; the reference divides by zero as well.
            continue;
        };
        done += 1;
        note("spearman", (got - brute_spearman(&x, &y)).abs());
    }
    report
}

/// Tolerance per metric name.
pub fn metric_tolerance(name: &str) -> f64 {
    if name == "spearman" {
        1e-12
    } else {
        1e-9
    }
}
