use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use rand::Rng;

use super::kernels::{gelu_exact, gelu_exact_grad, gemm_view, softmax_row, View};
use super::{Scalar, Tensor};
use crate::alibi::AttentionBias;
use crate::error::{Error, Result};

/// Additive score for masked-out keys; stands in for negative infinity.
pub const MASK_PENALTY: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        drop_mask: Option<Vec<T>>,
        batch: usize,
        len: usize,
        heads: usize,
        head_dim: usize,
        scale: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedMean {
        x: Var,
        weights: Vec<T>,
        len: usize,
    },
    L2Normalize {
        x: Var,
        inv_norms: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    leaf_grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Inputs to the fused multi-head attention operation.
///
/// `q`, `k` and `v` are `[batch * len, heads * head_dim]` with rows grouped by
/// sequence. `key_mask` holds one entry per row, `1` for real tokens.
pub struct AttentionInputs<'b> {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub key_mask: &'b [u8],
    pub bias: Option<&'b AttentionBias>,
    pub dropout: f64,
}

/// Records differentiable operations for a single forward/backward pass.
///
/// Operations append nodes in execution order, so replaying indices in
/// reverse is a valid topological order for the chain rule. Leaves may borrow
/// their data from long-lived parameter tensors.
pub struct Tape<'a, T: Scalar> {
    nodes: RefCell<Vec<Node<'a, T>>>,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; no backward data is retained.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Cow<'a, [T]>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Constant
        };
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            leaf_grad: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn tracks(&self, inputs: &[bool]) -> bool {
        self.grad_enabled && inputs.iter().any(|&b| b)
    }

    /// Registers a borrowed tensor as a leaf. It receives a gradient when
    /// `tensor.requires_grad` is set and the tape records.
    pub fn leaf(&self, tensor: &'a Tensor<T>) -> Var {
        let rg = self.grad_enabled && tensor.requires_grad;
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            rg,
            if rg { Op::Leaf } else { Op::Constant },
        )
    }

    /// Registers an owned tensor as a leaf.
    pub fn var(&self, tensor: Tensor<T>) -> Var {
        let rg = self.grad_enabled && tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(
            shape,
            Cow::Owned(tensor.into_data()),
            rg,
            if rg { Op::Leaf } else { Op::Constant },
        )
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Ref<'_, [T]> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.nodes.borrow()[v.0].leaf_grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.leaf_grad = None;
        }
    }

    fn unary_map(&self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(Var) -> Op<T>) -> Var {
        let (shape, out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let out: Vec<T> = n.value.iter().map(|&v| f(v)).collect();
            (n.shape.clone(), out, self.tracks(&[n.requires_grad]))
        };
        self.push(shape, Cow::Owned(out), rg, op(x))
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (shape, out, rg, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 {
                return Err(Error::shape(
                    "matmul",
                    format!("expected matrices, got {:?} and {:?}", na.shape, nb.shape),
                ));
            }
            let (m, k) = (na.shape[0], na.shape[1]);
            let (kb, n) = if trans_b {
                (nb.shape[1], nb.shape[0])
            } else {
                (nb.shape[0], nb.shape[1])
            };
            if k != kb {
                return Err(Error::shape(
                    "matmul",
                    format!(
                        "inner extents disagree: {:?} x {:?}{}",
                        na.shape,
                        nb.shape,
                        if trans_b { "ᵀ" } else { "" }
                    ),
                ));
            }
            let bv = if trans_b {
                View::transposed(k)
            } else {
                View::rows(n)
            };
            let mut out = vec![T::zero(); m * n];
            gemm_view(
                m,
                k,
                n,
                T::one(),
                &na.value,
                View::rows(k),
                &nb.value,
                bv,
                T::zero(),
                &mut out,
                View::rows(n),
            );
            let rg = self.tracks(&[na.requires_grad, nb.requires_grad]);
            (vec![m, n], out, rg, m, k, n)
        };
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn binary_same(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>, bool)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let out = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out, self.tracks(&[na.requires_grad, nb.requires_grad])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, rg) = self.binary_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, rg) = self.binary_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Mul(a, b)))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, out, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            let (_, cols) = rows_cols(&nx.shape);
            if nb.value.len() != cols {
                return Err(Error::shape(
                    "add_row",
                    format!("bias {:?} for input {:?}", nb.shape, nx.shape),
                ));
            }
            let mut out = nx.value.to_vec();
            for row in out.chunks_mut(cols) {
                row.iter_mut().zip(nb.value.iter()).for_each(|(a, &b)| *a += b);
            }
            (nx.shape.clone(), out, self.tracks(&[nx.requires_grad, nb.requires_grad]))
        };
        Ok(self.push(shape, Cow::Owned(out), rg, Op::AddRow { x, bias }))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.unary_map(x, |v| v * f, |x| Op::Scale { x, factor: f })
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary_map(x, gelu_exact, Op::Gelu)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary_map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&self, x: Var) -> Result<Var> {
        let (shape, out, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_finite("softmax_lastdim", &n.value)?;
            let (_, cols) = rows_cols(&n.shape);
            let mut out = n.value.to_vec();
            out.chunks_mut(cols).for_each(softmax_row);
            (n.shape.clone(), out, self.tracks(&[n.requires_grad]))
        };
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Softmax(x)))
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (shape, out, rg, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            let (rows, cols) = rows_cols(&nx.shape);
            if ng.value.len() != cols || nb.value.len() != cols {
                return Err(Error::shape(
                    "layer_norm",
                    format!("gain {:?} / bias {:?} for input {:?}", ng.shape, nb.shape, nx.shape),
                ));
            }
            let eps = T::of(eps);
            let inv_cols = T::of(1.0 / cols as f64);
            let mut xhat = vec![T::zero(); rows * cols];
            let mut inv_std = vec![T::zero(); rows];
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let row = &nx.value[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() * inv_cols;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_cols;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * ng.value[c] + nb.value[c];
                }
            }
            let rg = self.tracks(&[nx.requires_grad, ng.requires_grad, nb.requires_grad]);
            (nx.shape.clone(), out, rg, xhat, inv_std)
        };
        let op = if rg {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            }
        } else {
            Op::Constant
        };
        Ok(self.push(shape, Cow::Owned(out), rg, op))
    }

    /// Selects rows of a `[rows, cols]` table; the embedding lookup.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (shape, out, rg) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table.0];
            let (rows, cols) = rows_cols(&nt.shape);
            if ids.is_empty() {
                return Err(Error::shape("gather_rows", "empty index list"));
            }
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::OutOfRange {
                        op: "gather_rows",
                        index: id,
                        extent: rows,
                    });
                }
                out.extend_from_slice(&nt.value[id * cols..(id + 1) * cols]);
            }
            (vec![ids.len(), cols], out, self.tracks(&[nt.requires_grad]))
        };
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (shape, out, rg, mask) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let keep = T::of(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..n.value.len())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            let out = n.value.iter().zip(&mask).map(|(&a, &b)| a * b).collect();
            (n.shape.clone(), out, self.tracks(&[n.requires_grad]), mask)
        };
        self.push(shape, Cow::Owned(out), rg, Op::Dropout { x, mask })
    }

    /// Fused multi-head scaled dot-product attention with an additive
    /// position bias and key padding mask.
    ///
    /// Per head: `softmax(Q Kᵀ / √d + bias + mask) V`, with heads concatenated
    /// back into `[batch * len, heads * head_dim]`.
    pub fn attention<R: Rng + ?Sized>(
        &self,
        q: Var,
        k: Var,
        v: Var,
        inputs: &AttentionInputs<'_>,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let AttentionInputs {
            batch,
            len,
            heads,
            head_dim,
            key_mask,
            bias,
            dropout,
        } = *inputs;
        let width = heads * head_dim;
        let rows = batch * len;
        let (out, rg, probs, drop_mask, scale) = {
            let nodes = self.nodes.borrow();
            let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
            for (name, n) in [("q", nq), ("k", nk), ("v", nv)] {
                if n.shape != [rows, width] {
                    return Err(Error::shape(
                        "attention",
                        format!("{name} has shape {:?}, expected [{rows}, {width}]", n.shape),
                    ));
                }
            }
            if key_mask.len() != rows {
                return Err(Error::shape(
                    "attention",
                    format!("key mask has {} entries for {rows} rows", key_mask.len()),
                ));
            }
            if let Some(b) = bias {
                if b.heads() != heads || b.seq_len() < len {
                    return Err(Error::shape(
                        "attention",
                        format!(
                            "bias built for {} heads at length {}, attention needs {heads} heads at length {len}",
                            b.heads(),
                            b.seq_len()
                        ),
                    ));
                }
            }
            let rg = self.tracks(&[nq.requires_grad, nk.requires_grad, nv.requires_grad]);
            let scale = T::of(1.0 / (head_dim as f64).sqrt());
            let use_dropout = dropout > 0.0 && rng.is_some();
            let block = len * len;
            let mut probs = if rg { vec![T::zero(); batch * heads * block] } else { Vec::new() };
            let mut drop_mask = if use_dropout && rg {
                Some(vec![T::zero(); batch * heads * block])
            } else {
                None
            };
            let mut rng = rng;
            let keep = T::of(1.0 / (1.0 - dropout));
            let penalty = T::of(MASK_PENALTY);
            let mut scores = vec![T::zero(); block];
            let mut out = vec![T::zero(); rows * width];
            let mut bias_row = vec![T::zero(); len];
            for b in 0..batch {
                let base = b * len * width;
                let kmask = &key_mask[b * len..(b + 1) * len];
                for h in 0..heads {
                    let col = h * head_dim;
                    gemm_view(
                        len,
                        head_dim,
                        len,
                        scale,
                        &nq.value,
                        View { offset: base + col, rs: width, cs: 1 },
                        &nk.value,
                        View { offset: base + col, rs: 1, cs: width },
                        T::zero(),
                        &mut scores,
                        View::rows(len),
                    );
                    for i in 0..len {
                        if let Some(bias) = bias {
                            bias.fill_row(h, i, &mut bias_row);
                        }
                        let row = &mut scores[i * len..(i + 1) * len];
                        for j in 0..len {
                            if bias.is_some() {
                                row[j] += bias_row[j];
                            }
                            if kmask[j] == 0 {
                                row[j] += penalty;
                            }
                        }
                        softmax_row(row);
                    }
                    let off = (b * heads + h) * block;
                    if rg {
                        probs[off..off + block].copy_from_slice(&scores);
                    }
                    if use_dropout {
                        let r = rng.as_deref_mut().expect("checked above");
                        for (idx, s) in scores.iter_mut().enumerate() {
                            let m = if r.gen::<f64>() < dropout { T::zero() } else { keep };
                            *s *= m;
                            if let Some(dm) = drop_mask.as_mut() {
                                dm[off + idx] = m;
                            }
                        }
                    }
                    gemm_view(
                        len,
                        len,
                        head_dim,
                        T::one(),
                        &scores,
                        View::rows(len),
                        &nv.value,
                        View { offset: base + col, rs: width, cs: 1 },
                        T::zero(),
                        &mut out,
                        View { offset: base + col, rs: width, cs: 1 },
                    );
                }
            }
            (out, rg, probs, drop_mask, scale)
        };
        Ok(self.push(
            vec![rows, width],
            Cow::Owned(out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                probs,
                drop_mask,
                batch,
                len,
                heads,
                head_dim,
                scale,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.0];
            if n.shape.len() != 2 || n.shape[0] != targets.len() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits {:?} for {} targets", n.shape, targets.len()),
                ));
            }
            let (rows, classes) = (n.shape[0], n.shape[1]);
            let mut probs = n.value.to_vec();
            let mut total = 0.0f64;
            for (r, &t) in targets.iter().enumerate() {
                if t >= classes {
                    return Err(Error::OutOfRange {
                        op: "cross_entropy",
                        index: t,
                        extent: classes,
                    });
                }
                let row = &mut probs[r * classes..(r + 1) * classes];
                let logit_t = row[t].as_f64();
                let max = row.iter().fold(row[0], |m, &v| m.max(v)).as_f64();
                let sum: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
                total += (max - logit_t) + sum.ln();
                softmax_row(row);
            }
            let rg = self.tracks(&[n.requires_grad]);
            (T::of(total / rows as f64), probs, rg)
        };
        let op = if rg {
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            }
        } else {
            Op::Constant
        };
        Ok(self.push(vec![1], Cow::Owned(vec![value]), rg, op))
    }

    /// Masked mean over positions of each sequence in a `[batch * len, cols]`
    /// input, producing `[batch, cols]`.
    pub fn masked_mean(&self, x: Var, mask: &[u8], batch: usize) -> Result<Var> {
        let (out, rg, weights, len, cols) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (rows, cols) = rows_cols(&n.shape);
            if batch == 0 || rows % batch != 0 || mask.len() != rows {
                return Err(Error::shape(
                    "masked_mean",
                    format!("input {:?}, mask {}, batch {batch}", n.shape, mask.len()),
                ));
            }
            let len = rows / batch;
            let mut weights = vec![T::zero(); rows];
            let mut out = vec![T::zero(); batch * cols];
            for b in 0..batch {
                let m = &mask[b * len..(b + 1) * len];
                let count = m.iter().filter(|&&v| v != 0).count();
                if count == 0 {
                    return Err(Error::Invalid(format!(
                        "masked_mean: sequence {b} has no unmasked positions"
                    )));
                }
                let w = T::of(1.0 / count as f64);
                let dst = &mut out[b * cols..(b + 1) * cols];
                for (i, &mv) in m.iter().enumerate() {
                    if mv != 0 {
                        weights[b * len + i] = w;
                        let src = &n.value[(b * len + i) * cols..(b * len + i + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
                dst.iter_mut().for_each(|d| *d *= w);
            }
            (out, self.tracks(&[n.requires_grad]), weights, len, cols)
        };
        Ok(self.push(
            vec![batch, cols],
            Cow::Owned(out),
            rg,
            Op::MaskedMean { x, weights, len },
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (shape, out, rg, inv_norms) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (rows, cols) = rows_cols(&n.shape);
            let mut out = n.value.to_vec();
            let mut inv_norms = Vec::with_capacity(rows);
            for (r, row) in out.chunks_mut(cols).enumerate() {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(norm > T::zero()) || !norm.is_finite() {
                    return Err(Error::Invalid(format!(
                        "l2_normalize_rows: row {r} has zero or non-finite norm"
                    )));
                }
                let inv = T::one() / norm;
                row.iter_mut().for_each(|v| *v *= inv);
                inv_norms.push(inv);
            }
            (n.shape.clone(), out, self.tracks(&[n.requires_grad]), inv_norms)
        };
        Ok(self.push(shape, Cow::Owned(out), rg, Op::L2Normalize { x, inv_norms }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, out, rg) = {
            let nodes = self.nodes.borrow();
            if parts.is_empty() {
                return Err(Error::shape("concat_rows", "no inputs"));
            }
            let cols = rows_cols(&nodes[parts[0].0].shape).1;
            let mut out = Vec::new();
            let mut rows = 0;
            let mut flags = Vec::with_capacity(parts.len());
            for p in parts {
                let n = &nodes[p.0];
                let (r, c) = rows_cols(&n.shape);
                if c != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        format!("column count {c} differs from {cols}"),
                    ));
                }
                rows += r;
                out.extend_from_slice(&n.value);
                flags.push(n.requires_grad);
            }
            (vec![rows, cols], out, self.tracks(&flags))
        };
        Ok(self.push(shape, Cow::Owned(out), rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (out, rg, cols) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (rows, cols) = rows_cols(&n.shape);
            if start >= end || end > rows {
                return Err(Error::shape(
                    "slice_rows",
                    format!("range {start}..{end} of {rows} rows"),
                ));
            }
            (n.value[start * cols..end * cols].to_vec(), self.tracks(&[n.requires_grad]), cols)
        };
        Ok(self.push(vec![end - start, cols], Cow::Owned(out), rg, Op::SliceRows { x, start }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.value.iter().copied().sum::<T>(), self.tracks(&[n.requires_grad]))
        };
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let len = T::of(n.value.len() as f64);
            (n.value.iter().copied().sum::<T>() / len, self.tracks(&[n.requires_grad]))
        };
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Mean(x))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`];
    /// intermediate gradients are recomputed each time.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut leaf_updates: Vec<(usize, Vec<T>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let rn = &nodes[root.0];
            if rn.value.len() != 1 {
                return Err(Error::NotScalar(rn.shape.clone()));
            }
            if !rn.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<T>>> = Vec::new();
            grads.resize_with(root.0 + 1, || None);
            grads[root.0] = Some(vec![T::one()]);
            for id in (0..=root.0).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_updates.push((id, g));
                    continue;
                }
                for (input, delta) in self.node_backward(&nodes, node, &g) {
                    if nodes[input.0].requires_grad {
                        accumulate(&mut grads[input.0], delta);
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            accumulate(&mut nodes[id].leaf_grad, g);
        }
        Ok(())
    }

    fn node_backward(&self, nodes: &[Node<'a, T>], node: &Node<'a, T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    let bv = if trans_b {
                        View::rows(k)
                    } else {
                        View::transposed(n)
                    };
                    gemm_view(m, n, k, T::one(), g, View::rows(n), val(b), bv, T::zero(), &mut da, View::rows(k));
                    out.push((a, da));
                }
                if needs(b) {
                    if trans_b {
                        let mut db = vec![T::zero(); n * k];
                        gemm_view(
                            n,
                            m,
                            k,
                            T::one(),
                            g,
                            View::transposed(n),
                            val(a),
                            View::rows(k),
                            T::zero(),
                            &mut db,
                            View::rows(k),
                        );
                        out.push((b, db));
                    } else {
                        let mut db = vec![T::zero(); k * n];
                        gemm_view(
                            k,
                            m,
                            n,
                            T::one(),
                            val(a),
                            View::transposed(k),
                            g,
                            View::rows(n),
                            T::zero(),
                            &mut db,
                            View::rows(n),
                        );
                        out.push((b, db));
                    }
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            &Op::AddRow { x, bias } => {
                if needs(bias) {
                    let cols = val(bias).len();
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((bias, db));
                }
                out.push((x, g.to_vec()));
            }
            &Op::Scale { x, factor } => out.push((x, g.iter().map(|&v| v * factor).collect())),
            &Op::Gelu(x) => out.push((
                x,
                g.iter().zip(val(x)).map(|(&g, &v)| g * gelu_exact_grad(v)).collect(),
            )),
            &Op::Relu(x) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            &Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(node.value.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dxr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let cols = gv.len();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    out.push((*gain, dg));
                    out.push((*bias, db));
                }
                if needs(*x) {
                    let inv_n = T::of(1.0 / cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dh = vec![T::zero(); cols];
                    for (r, ((dxr, gr), hr)) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..cols {
                            dh[c] = gr[c] * gv[c];
                            sum_dh += dh[c];
                            sum_dh_h += dh[c] * hr[c];
                        }
                        for c in 0..cols {
                            dxr[c] = inv_std[r] * (dh[c] - inv_n * sum_dh - hr[c] * inv_n * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let cols = *nodes[table.0].shape.last().unwrap_or(&1);
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * cols..(id + 1) * cols];
                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, &v)| *d += v);
                }
                out.push((*table, dt));
            }
            Op::Dropout { x, mask } => out.push((*x, g.iter().zip(mask).map(|(&a, &b)| a * b).collect())),
            Op::Attention {
                q,
                k,
                v,
                probs,
                drop_mask,
                batch,
                len,
                heads,
                head_dim,
                scale,
            } => {
                let (batch, len, heads, hd, scale) = (*batch, *len, *heads, *head_dim, *scale);
                let width = heads * hd;
                let block = len * len;
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut p_drop = vec![T::zero(); block];
                let mut dp = vec![T::zero(); block];
                for b in 0..batch {
                    let base = b * len * width;
                    for h in 0..heads {
                        let off = (b * heads + h) * block;
                        let p = &probs[off..off + block];
                        let head = View { offset: base + h * hd, rs: width, cs: 1 };
                        match drop_mask {
                            Some(dm) => {
                                for i in 0..block {
                                    p_drop[i] = p[i] * dm[off + i];
                                }
                            }
                            None => p_drop.copy_from_slice(p),
                        }
                        gemm_view(len, len, hd, T::one(), &p_drop, View::transposed(len), g, head, T::one(), &mut dv, head);
                        gemm_view(
                            len,
                            hd,
                            len,
                            T::one(),
                            g,
                            head,
                            vv,
                            View { offset: base + h * hd, rs: 1, cs: width },
                            T::zero(),
                            &mut dp,
                            View::rows(len),
                        );
                        if let Some(dm) = drop_mask {
                            for i in 0..block {
                                dp[i] *= dm[off + i];
                            }
                        }
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        gemm_view(len, len, hd, scale, &dp, View::rows(len), kv, head, T::one(), &mut dq, head);
                        gemm_view(len, len, hd, scale, &dp, View::transposed(len), qv, head, T::one(), &mut dk, head);
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = probs.len() / targets.len();
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, d));
            }
            Op::MaskedMean { x, weights, len } => {
                let cols = *node.shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); weights.len() * cols];
                for (r, &w) in weights.iter().enumerate() {
                    if w != T::zero() {
                        let b = r / len;
                        let src = &g[b * cols..(b + 1) * cols];
                        dx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(d, &s)| *d = s * w);
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, inv_norms } => {
                let cols = *node.shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((dxr, gr), yr)) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(node.value.chunks(cols)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dxr[c] = (gr[c] - yr[c] * dot) * inv_norms[r];
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if needs(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = *node.shape.last().unwrap_or(&1);
                let mut dx = vec![T::zero(); val(x).len()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean(x) => {
                let n = val(x).len();
                out.push((x, vec![g[0] / T::of(n as f64); n]));
            }
        }
        out
    }
}
