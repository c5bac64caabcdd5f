//! BERT-style encoder with ALiBi attention, gated feedforward sublayers and
//! post-layer-norm residual blocks.
//!
//! Token embeddings go straight into the stack; position information enters
//! only through the attention bias, so the forward pass accepts any length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alibi::{AlibiSlopes, AttentionBias, BiasVariant};
use crate::error::{Error, Result};
use crate::tensor::{AttentionInputs, Scalar, Tape, Tensor, Var};
use crate::tokenizer::PaddedBatch;

pub const DEFAULT_VOCAB_SIZE: usize = 30_522;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GluVariant {
    #[default]
    Geglu,
    Reglu,
}

/// Where position information comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PositionScheme {
    #[default]
    Alibi,
    /// Learned absolute embeddings, kept for extrapolation comparisons.
    Learned { max_positions: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_inner: usize,
    pub glu_variant: GluVariant,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub alibi_variant: BiasVariant,
    pub canonical_alibi_slopes: bool,
    pub tie_mlm_head: bool,
    pub position: PositionScheme,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ModelConfig {
    fn preset(layers: usize, hidden: usize, glu_variant: GluVariant) -> Self {
        Self {
            layers,
            hidden,
            heads: hidden / 64,
            head_dim: 64,
            ffn_inner: 4 * hidden,
            glu_variant,
            vocab_size: DEFAULT_VOCAB_SIZE,
            dropout: 0.1,
            attention_dropout: 0.1,
            alibi_variant: BiasVariant::Encoder,
            canonical_alibi_slopes: false,
            tie_mlm_head: true,
            position: PositionScheme::Alibi,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn small() -> Self {
        Self::preset(4, 512, GluVariant::Geglu)
    }

    pub fn base() -> Self {
        Self::preset(12, 768, GluVariant::Geglu)
    }

    /// The large preset gates with ReLU.
    pub fn large() -> Self {
        Self::preset(24, 1024, GluVariant::Reglu)
    }

    /// Desk-scale model: 2 layers, hidden 128, 2 heads of 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::preset(2, 128, GluVariant::Geglu)
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            "desk" => Some(Self::desk(DEFAULT_VOCAB_SIZE)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_inner", self.ffn_inner),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal hidden ({})",
                self.heads, self.head_dim, self.hidden
            )));
        }
        for (name, r) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if let PositionScheme::Learned { max_positions: 0 } = self.position {
            return Err(Error::Config("max_positions must be at least 1".into()));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("layer_norm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (h, f, v) = (self.hidden, self.ffn_inner, self.vocab_size);
        let linear = |i: usize, o: usize| i * o + o;
        let norm = 2 * h;
        let embeddings = v * h
            + norm
            + match self.position {
                PositionScheme::Alibi => 0,
                PositionScheme::Learned { max_positions } => max_positions * h,
            };
        let attention = 4 * linear(h, h) + norm;
        let ffn = 2 * linear(h, f) + linear(f, h) + norm;
        let head = linear(h, h) + norm + v + if self.tie_mlm_head { 0 } else { h * v };
        embeddings + self.layers * (attention + ffn) + head
    }

    pub fn slopes(&self) -> Result<AlibiSlopes> {
        AlibiSlopes::for_heads(self.heads, self.canonical_alibi_slopes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: Norm<T>,
    pub ffn_gate: Linear<T>,
    pub ffn_value: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead<T: Scalar> {
    pub transform: Linear<T>,
    pub norm: Norm<T>,
    /// `[hidden, vocab]` when untied; the word embeddings are used otherwise.
    pub decoder: Option<Tensor<T>>,
    pub decoder_bias: Tensor<T>,
}

/// All weights of an encoder; shapes are a function of the config alone.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T: Scalar> {
    pub config: ModelConfig,
    pub word_embeddings: Tensor<T>,
    pub position_embeddings: Option<Tensor<T>>,
    pub embedding_norm: Norm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_head: MlmHead<T>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

struct Init {
    /// `None` leaves matrices at zero.
    rng: Option<ChaCha8Rng>,
    std: f64,
}

impl Init {
    /// Normal(0, std) truncated to ±2 std.
    fn truncated<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let Some(rng) = self.rng.as_mut() else {
            return Tensor::zeros(shape.to_vec()).trainable();
        };
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = standard_normal(rng);
                if z.abs() <= 2.0 {
                    break T::of(z * self.std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches").trainable()
    }

    fn linear<T: Scalar>(&mut self, i: usize, o: usize) -> Linear<T> {
        Linear {
            weight: self.truncated(&[i, o]),
            bias: Tensor::zeros([o]).trainable(),
        }
    }

    fn norm<T: Scalar>(h: usize) -> Norm<T> {
        Norm {
            gain: Tensor::full([h], T::one()).trainable(),
            bias: Tensor::zeros([h]).trainable(),
        }
    }
}

#[derive(Clone, Copy)]
struct BoundLinear {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct BoundNorm {
    g: Var,
    b: Var,
}

struct BoundLayer {
    q: BoundLinear,
    k: BoundLinear,
    v: BoundLinear,
    o: BoundLinear,
    attn_norm: BoundNorm,
    gate: BoundLinear,
    value: BoundLinear,
    out: BoundLinear,
    ffn_norm: BoundNorm,
}

/// Encoder weights registered as leaves on one tape.
pub struct BoundEncoder {
    word: Var,
    position: Option<Var>,
    emb_norm: BoundNorm,
    layers: Vec<BoundLayer>,
    head_transform: BoundLinear,
    head_norm: BoundNorm,
    decoder: Option<Var>,
    decoder_bias: Var,
    params: Vec<Var>,
}

impl BoundEncoder {
    /// Leaf handles in the same order as [`EncoderState::named_parameters`].
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Gradients per parameter after `tape.backward`, zeros where untouched.
    pub fn gradients<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]))
            .collect()
    }
}

impl<T: Scalar> EncoderState<T> {
    /// Fresh weights: truncated normal (std from the config) for matrices,
    /// unit gains and zero biases. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Correctly shaped state with zero matrices, unit gains and zero biases,
    /// to be filled from a checkpoint.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng,
            std: config.init_std,
        };
        let (h, f, v) = (config.hidden, config.ffn_inner, config.vocab_size);
        let word_embeddings = init.truncated(&[v, h]);
        let position_embeddings = match config.position {
            PositionScheme::Alibi => None,
            PositionScheme::Learned { max_positions } => Some(init.truncated(&[max_positions, h])),
        };
        let embedding_norm = Init::norm(h);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                query: init.linear(h, h),
                key: init.linear(h, h),
                value: init.linear(h, h),
                attn_out: init.linear(h, h),
                attn_norm: Init::norm(h),
                ffn_gate: init.linear(h, f),
                ffn_value: init.linear(h, f),
                ffn_out: init.linear(f, h),
                ffn_norm: Init::norm(h),
            })
            .collect();
        let mlm_head = MlmHead {
            transform: init.linear(h, h),
            norm: Init::norm(h),
            decoder: (!config.tie_mlm_head).then(|| init.truncated(&[h, v])),
            decoder_bias: Tensor::zeros([v]).trainable(),
        };
        Ok(Self {
            config,
            word_embeddings,
            position_embeddings,
            embedding_norm,
            layers,
            mlm_head,
        })
    }

    /// Every weight tensor with a stable dotted name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("embeddings.word".into(), &self.word_embeddings)];
        if let Some(p) = &self.position_embeddings {
            out.push(("embeddings.position".into(), p));
        }
        out.push(("embeddings.norm.gain".into(), &self.embedding_norm.gain));
        out.push(("embeddings.norm.bias".into(), &self.embedding_norm.bias));
        for (i, l) in self.layers.iter().enumerate() {
            let linears = [
                ("attn.query", &l.query),
                ("attn.key", &l.key),
                ("attn.value", &l.value),
                ("attn.out", &l.attn_out),
            ];
            for (n, lin) in linears {
                out.push((format!("layers.{i}.{n}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{n}.bias"), &lin.bias));
            }
            out.push((format!("layers.{i}.attn.norm.gain"), &l.attn_norm.gain));
            out.push((format!("layers.{i}.attn.norm.bias"), &l.attn_norm.bias));
            for (n, lin) in [("ffn.gate", &l.ffn_gate), ("ffn.value", &l.ffn_value), ("ffn.out", &l.ffn_out)] {
                out.push((format!("layers.{i}.{n}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{n}.bias"), &lin.bias));
            }
            out.push((format!("layers.{i}.ffn.norm.gain"), &l.ffn_norm.gain));
            out.push((format!("layers.{i}.ffn.norm.bias"), &l.ffn_norm.bias));
        }
        let head = &self.mlm_head;
        out.push(("mlm.transform.weight".into(), &head.transform.weight));
        out.push(("mlm.transform.bias".into(), &head.transform.bias));
        out.push(("mlm.norm.gain".into(), &head.norm.gain));
        out.push(("mlm.norm.bias".into(), &head.norm.bias));
        if let Some(d) = &head.decoder {
            out.push(("mlm.decoder.weight".into(), d));
        }
        out.push(("mlm.decoder.bias".into(), &head.decoder_bias));
        out
    }

    /// Mutable counterpart of [`Self::named_parameters`], same order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("embeddings.word".into(), &mut self.word_embeddings)];
        if let Some(p) = &mut self.position_embeddings {
            out.push(("embeddings.position".into(), p));
        }
        out.push(("embeddings.norm.gain".into(), &mut self.embedding_norm.gain));
        out.push(("embeddings.norm.bias".into(), &mut self.embedding_norm.bias));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let EncoderLayer {
                query,
                key,
                value,
                attn_out,
                attn_norm,
                ffn_gate,
                ffn_value,
                ffn_out,
                ffn_norm,
            } = l;
            for (n, lin) in [("attn.query", query), ("attn.key", key), ("attn.value", value), ("attn.out", attn_out)] {
                out.push((format!("layers.{i}.{n}.weight"), &mut lin.weight));
                out.push((format!("layers.{i}.{n}.bias"), &mut lin.bias));
            }
            out.push((format!("layers.{i}.attn.norm.gain"), &mut attn_norm.gain));
            out.push((format!("layers.{i}.attn.norm.bias"), &mut attn_norm.bias));
            for (n, lin) in [("ffn.gate", ffn_gate), ("ffn.value", ffn_value), ("ffn.out", ffn_out)] {
                out.push((format!("layers.{i}.{n}.weight"), &mut lin.weight));
                out.push((format!("layers.{i}.{n}.bias"), &mut lin.bias));
            }
            out.push((format!("layers.{i}.ffn.norm.gain"), &mut ffn_norm.gain));
            out.push((format!("layers.{i}.ffn.norm.bias"), &mut ffn_norm.bias));
        }
        let MlmHead {
            transform,
            norm,
            decoder,
            decoder_bias,
        } = &mut self.mlm_head;
        out.push(("mlm.transform.weight".into(), &mut transform.weight));
        out.push(("mlm.transform.bias".into(), &mut transform.bias));
        out.push(("mlm.norm.gain".into(), &mut norm.gain));
        out.push(("mlm.norm.bias".into(), &mut norm.bias));
        if let Some(d) = decoder {
            out.push(("mlm.decoder.weight".into(), d));
        }
        out.push(("mlm.decoder.bias".into(), decoder_bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
        };
        EncoderState {
            config: self.config.clone(),
            word_embeddings: self.word_embeddings.cast(),
            position_embeddings: self.position_embeddings.as_ref().map(Tensor::cast),
            embedding_norm: norm(&self.embedding_norm),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    query: lin(&l.query),
                    key: lin(&l.key),
                    value: lin(&l.value),
                    attn_out: lin(&l.attn_out),
                    attn_norm: norm(&l.attn_norm),
                    ffn_gate: lin(&l.ffn_gate),
                    ffn_value: lin(&l.ffn_value),
                    ffn_out: lin(&l.ffn_out),
                    ffn_norm: norm(&l.ffn_norm),
                })
                .collect(),
            mlm_head: MlmHead {
                transform: lin(&self.mlm_head.transform),
                norm: norm(&self.mlm_head.norm),
                decoder: self.mlm_head.decoder.as_ref().map(Tensor::cast),
                decoder_bias: self.mlm_head.decoder_bias.cast(),
            },
        }
    }

    /// Registers every weight on `tape`, in [`Self::named_parameters`] order.
    pub fn bind<'a>(&'a self, tape: &Tape<'a, T>) -> BoundEncoder {
        let mut params = Vec::new();
        let mut leaf = |t: &'a Tensor<T>| {
            let v = tape.leaf(t);
            params.push(v);
            v
        };
        let word = leaf(&self.word_embeddings);
        let position = self.position_embeddings.as_ref().map(&mut leaf);
        let emb_norm = BoundNorm {
            g: leaf(&self.embedding_norm.gain),
            b: leaf(&self.embedding_norm.bias),
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut lin = |x: &'a Linear<T>| BoundLinear {
                w: leaf(&x.weight),
                b: leaf(&x.bias),
            };
            let q = lin(&l.query);
            let k = lin(&l.key);
            let v = lin(&l.value);
            let o = lin(&l.attn_out);
            let attn_norm = BoundNorm {
                g: leaf(&l.attn_norm.gain),
                b: leaf(&l.attn_norm.bias),
            };
            let mut lin = |x: &'a Linear<T>| BoundLinear {
                w: leaf(&x.weight),
                b: leaf(&x.bias),
            };
            let gate = lin(&l.ffn_gate);
            let value = lin(&l.ffn_value);
            let out = lin(&l.ffn_out);
            let ffn_norm = BoundNorm {
                g: leaf(&l.ffn_norm.gain),
                b: leaf(&l.ffn_norm.bias),
            };
            layers.push(BoundLayer {
                q,
                k,
                v,
                o,
                attn_norm,
                gate,
                value,
                out,
                ffn_norm,
            });
        }
        let head = &self.mlm_head;
        let head_transform = BoundLinear {
            w: leaf(&head.transform.weight),
            b: leaf(&head.transform.bias),
        };
        let head_norm = BoundNorm {
            g: leaf(&head.norm.gain),
            b: leaf(&head.norm.bias),
        };
        let decoder = head.decoder.as_ref().map(&mut leaf);
        let decoder_bias = leaf(&head.decoder_bias);
        BoundEncoder {
            word,
            position,
            emb_norm,
            layers,
            head_transform,
            head_norm,
            decoder,
            decoder_bias,
            params,
        }
    }

    /// Hidden states `[batch * seq_len, hidden]` on `tape`. Dropout is active
    /// only when `rng` is given.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &Tape<'_, T>,
        bound: &BoundEncoder,
        batch: &PaddedBatch,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let ids: Vec<usize> = batch.token_ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::OutOfRange {
                op: "forward",
                index: bad,
                extent: cfg.vocab_size,
            });
        }
        let mut x = tape.gather_rows(bound.word, &ids)?;
        if let (Some(pos), PositionScheme::Learned { max_positions }) = (bound.position, cfg.position) {
            if batch.seq_len > max_positions {
                return Err(Error::OutOfRange {
                    op: "position embedding",
                    index: batch.seq_len - 1,
                    extent: max_positions,
                });
            }
            let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
            let p = tape.gather_rows(pos, &positions)?;
            x = tape.add(x, p)?;
        }
        x = tape.layer_norm(x, bound.emb_norm.g, bound.emb_norm.b, cfg.layer_norm_eps)?;
        x = self.maybe_dropout(tape, x, cfg.dropout, rng.as_deref_mut());

        let bias = match cfg.position {
            PositionScheme::Alibi => Some(AttentionBias::build(&cfg.slopes()?, batch.seq_len, cfg.alibi_variant)?),
            PositionScheme::Learned { .. } => None,
        };
        for layer in &bound.layers {
            x = self.attention_block(tape, layer, x, batch, bias.as_ref(), rng.as_deref_mut())?;
            x = self.feedforward_block(tape, layer, x, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    fn maybe_dropout<R: Rng + ?Sized>(&self, tape: &Tape<'_, T>, x: Var, p: f64, rng: Option<&mut R>) -> Var {
        match rng {
            Some(r) if p > 0.0 => tape.dropout(x, p, r),
            _ => x,
        }
    }

    fn linear(&self, tape: &Tape<'_, T>, x: Var, l: BoundLinear) -> Result<Var> {
        let y = tape.matmul(x, l.w)?;
        tape.add_row(y, l.b)
    }

    fn attention_block<R: Rng + ?Sized>(
        &self,
        tape: &Tape<'_, T>,
        layer: &BoundLayer,
        x: Var,
        batch: &PaddedBatch,
        bias: Option<&AttentionBias>,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let q = self.linear(tape, x, layer.q)?;
        let k = self.linear(tape, x, layer.k)?;
        let v = self.linear(tape, x, layer.v)?;
        let inputs = AttentionInputs {
            batch: batch.batch,
            len: batch.seq_len,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            key_mask: &batch.attention_mask,
            bias,
            dropout: cfg.attention_dropout,
        };
        let ctx = tape.attention(q, k, v, &inputs, rng.as_deref_mut())?;
        let out = self.linear(tape, ctx, layer.o)?;
        let out = self.maybe_dropout(tape, out, cfg.dropout, rng);
        let sum = tape.add(x, out)?;
        tape.layer_norm(sum, layer.attn_norm.g, layer.attn_norm.b, cfg.layer_norm_eps)
    }

    fn feedforward_block<R: Rng + ?Sized>(
        &self,
        tape: &Tape<'_, T>,
        layer: &BoundLayer,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let gate = self.linear(tape, x, layer.gate)?;
        let gate = match cfg.glu_variant {
            GluVariant::Geglu => tape.gelu(gate),
            GluVariant::Reglu => tape.relu(gate),
        };
        let value = self.linear(tape, x, layer.value)?;
        let mixed = tape.mul(gate, value)?;
        let out = self.linear(tape, mixed, layer.out)?;
        let out = self.maybe_dropout(tape, out, cfg.dropout, rng);
        let sum = tape.add(x, out)?;
        tape.layer_norm(sum, layer.ffn_norm.g, layer.ffn_norm.b, cfg.layer_norm_eps)
    }

    /// Vocabulary logits `[rows.len(), vocab]` for the given flat positions
    /// of `hidden`.
    pub fn mlm_logits(&self, tape: &Tape<'_, T>, bound: &BoundEncoder, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        let h = self.linear(tape, h, bound.head_transform)?;
        let h = tape.gelu(h);
        let h = tape.layer_norm(h, bound.head_norm.g, bound.head_norm.b, self.config.layer_norm_eps)?;
        let logits = match bound.decoder {
            Some(d) => tape.matmul(h, d)?,
            None => tape.matmul_nt(h, bound.word)?,
        };
        tape.add_row(logits, bound.decoder_bias)
    }

    /// Inference forward pass returning `[batch, seq_len, hidden]`.
    pub fn forward(&self, batch: &PaddedBatch) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let out = self.forward_on_tape::<ChaCha8Rng>(&tape, &bound, batch, None)?;
        tape.tensor(out).reshape([batch.batch, batch.seq_len, self.config.hidden])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{pad_batch, TokenizedSequence};

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            head_dim: 8,
            ffn_inner: 32,
            vocab_size: vocab,
            dropout: 0.0,
            attention_dropout: 0.0,
            ..ModelConfig::desk(vocab)
        }
    }

    fn seq(ids: &[u32]) -> TokenizedSequence {
        TokenizedSequence {
            token_ids: ids.to_vec(),
            word_ids: vec![None; ids.len()],
            attention_mask: vec![1; ids.len()],
        }
    }

    #[test]
    fn preset_parameter_counts() {
        let base = ModelConfig::base().parameter_count() as f64;
        let small = ModelConfig::small().parameter_count() as f64;
        let large = ModelConfig::large().parameter_count() as f64;
        assert!((base / 137e6 - 1.0).abs() < 0.03, "{base}");
        assert!((small / 33e6 - 1.0).abs() < 0.05, "{small}");
        assert!((large / 455e6 - 1.0).abs() < 0.07, "{large}");
    }

    #[test]
    fn counted_tensors_match_formula() {
        for cfg in [tiny(50), ModelConfig { tie_mlm_head: false, ..tiny(50) }, ModelConfig {
            position: PositionScheme::Learned { max_positions: 12 },
            ..tiny(50)
        }] {
            let s = EncoderState::<f32>::init(cfg.clone(), 1).unwrap();
            assert_eq!(s.num_parameters(), cfg.parameter_count());
            assert_eq!(s.named_parameters().len(), s.clone().named_parameters_mut().len());
        }
    }

    #[test]
    fn ffn_parameters_per_layer() {
        let cfg = tiny(50);
        let s = EncoderState::<f32>::init(cfg.clone(), 1).unwrap();
        let l = &s.layers[0];
        let weights = l.ffn_gate.weight.numel() + l.ffn_value.weight.numel() + l.ffn_out.weight.numel();
        assert_eq!(weights, 3 * cfg.hidden * cfg.ffn_inner);
    }

    #[test]
    fn bind_order_matches_names() {
        let s = EncoderState::<f64>::init(ModelConfig { tie_mlm_head: false, ..tiny(30) }, 3).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let named = s.named_parameters();
        assert_eq!(bound.params().len(), named.len());
        for (v, (_, t)) in bound.params().iter().zip(named) {
            assert_eq!(tape.shape(*v), t.shape());
            assert_eq!(&*tape.value(*v), t.data());
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { head_dim: 7, ..tiny(10) };
        assert!(EncoderState::<f32>::init(cfg, 0).is_err());
        let cfg = ModelConfig { dropout: 1.0, ..tiny(10) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EncoderState::<f32>::init(tiny(40), 9).unwrap();
        let b = EncoderState::<f32>::init(tiny(40), 9).unwrap();
        let c = EncoderState::<f32>::init(tiny(40), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_token_is_finite() {
        let s = EncoderState::<f32>::init(tiny(20), 0).unwrap();
        let out = s.forward(&pad_batch(&[seq(&[5])], 0).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_id_rejected() {
        let s = EncoderState::<f32>::init(tiny(20), 0).unwrap();
        let err = s.forward(&pad_batch(&[seq(&[2, 25, 3])], 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { index: 25, .. }), "{err}");
    }

    #[test]
    fn padding_does_not_change_real_tokens() {
        let s = EncoderState::<f64>::init(tiny(20), 4).unwrap();
        let short = s.forward(&pad_batch(&[seq(&[2, 7, 8, 9, 3])], 0).unwrap()).unwrap();
        let padded = s
            .forward(&pad_batch(&[seq(&[2, 7, 8, 9, 3]), seq(&[2, 1, 1, 1, 1, 1, 1, 1, 3])], 0).unwrap())
            .unwrap();
        let h = 16;
        for i in 0..5 * h {
            assert!((short.data()[i] - padded.data()[i]).abs() < 1e-10);
        }
    }
}
