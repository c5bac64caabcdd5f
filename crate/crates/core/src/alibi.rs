//! Attention with linear biases.
//!
//! Each head `i` of `n` gets a slope `m_i`; the attention score between
//! positions `i` and `j` is penalized by `m · |i − j|` (encoder) or
//! `m · (i − j)` with future positions masked (causal). No table indexed by
//! absolute position exists, so any sequence length can be scored.
//!
//! Slopes follow the per-head rule with heads numbered `1..=n`:
//!
//! ```text
//! a = 2^floor(log2 n)        b = 2^(-8 / 2^ceil(log2 n))
//! m_i = b^(2i)               if i <  a
//! m_i = b^(1 + 2(i - a))     if i >= a
//! ```
//!
//! [`AlibiSlopes::canonical`] offers the geometric recipe from the original
//! causal-LM implementation for side-by-side comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::MASK_PENALTY;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BiasVariant {
    /// Symmetric `−m·|i−j|`; every token attends to every other.
    #[default]
    Encoder,
    /// `−m·(i−j)` for `j ≤ i`, masked for `j > i`.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlopeRecipe {
    PerHeadRule,
    Canonical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlibiSlopes {
    slopes: Vec<f64>,
    a: f64,
    b: f64,
    recipe: SlopeRecipe,
}

fn floor_log2(n: usize) -> u32 {
    usize::BITS - 1 - n.leading_zeros()
}

fn ceil_log2(n: usize) -> u32 {
    if n.is_power_of_two() {
        floor_log2(n)
    } else {
        floor_log2(n) + 1
    }
}

/// `2^(-8 · e / 2^c)`, i.e. `b^e` for `b = 2^(-8/2^c)`.
fn b_pow(e: u32, c: u32) -> f64 {
    (-8.0 * f64::from(e) / f64::from(1u32 << c)).exp2()
}

impl AlibiSlopes {
    /// Slopes from the per-head rule, heads indexed from 1.
    pub fn compute(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("ALiBi needs at least one head".into()));
        }
        let fl = floor_log2(n);
        let cl = ceil_log2(n);
        let a = 1usize << fl;
        let slopes = (1..=n)
            .map(|i| {
                let e = if i < a { 2 * i } else { 1 + 2 * (i - a) };
                b_pow(e as u32, cl)
            })
            .collect();
        Ok(Self {
            slopes,
            a: a as f64,
            b: b_pow(1, cl),
            recipe: SlopeRecipe::PerHeadRule,
        })
    }

    /// The original ALiBi geometric sequence `2^(-8k/n)`, with interleaving
    /// for head counts that are not powers of two.
    pub fn canonical(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("ALiBi needs at least one head".into()));
        }
        fn pow2_slopes(n: usize) -> Vec<f64> {
            (1..=n).map(|k| (-8.0 * k as f64 / n as f64).exp2()).collect()
        }
        let closest = 1usize << floor_log2(n);
        let mut slopes = pow2_slopes(closest);
        if closest < n {
            slopes.extend(pow2_slopes(2 * closest).into_iter().step_by(2).take(n - closest));
        }
        let cl = ceil_log2(n);
        Ok(Self {
            slopes,
            a: closest as f64,
            b: b_pow(1, cl),
            recipe: SlopeRecipe::Canonical,
        })
    }

    pub fn for_heads(n: usize, canonical: bool) -> Result<Self> {
        if canonical {
            Self::canonical(n)
        } else {
            Self::compute(n)
        }
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn heads(&self) -> usize {
        self.slopes.len()
    }

    /// `2^floor(log2 n)`.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// `2^(-8 / 2^ceil(log2 n))`.
    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn recipe(&self) -> SlopeRecipe {
        self.recipe
    }
}

/// Per-head bias over a `seq_len × seq_len` score matrix.
///
/// Entries are produced on demand from the slopes; [`AttentionBias::matrix`]
/// materializes one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    slopes: Vec<f64>,
    seq_len: usize,
    variant: BiasVariant,
}

impl AttentionBias {
    pub fn build(slopes: &AlibiSlopes, seq_len: usize, variant: BiasVariant) -> Result<Self> {
        Self::from_slopes(slopes.slopes().to_vec(), seq_len, variant)
    }

    /// Bias from arbitrary slopes, e.g. all zeros to disable locality.
    pub fn from_slopes(slopes: Vec<f64>, seq_len: usize, variant: BiasVariant) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("bias needs seq_len >= 1".into()));
        }
        if slopes.is_empty() {
            return Err(Error::Config("bias needs at least one head".into()));
        }
        Ok(Self {
            slopes,
            seq_len,
            variant,
        })
    }

    pub fn heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn variant(&self) -> BiasVariant {
        self.variant
    }

    #[inline]
    pub fn value(&self, head: usize, i: usize, j: usize) -> f64 {
        let m = self.slopes[head];
        match self.variant {
            BiasVariant::Encoder => -m * i.abs_diff(j) as f64,
            BiasVariant::Causal if j > i => MASK_PENALTY,
            BiasVariant::Causal => -m * (i - j) as f64,
        }
    }

    /// Writes row `i` of head `head` into `out` (length = number of keys).
    pub fn fill_row<T: Scalar>(&self, head: usize, i: usize, out: &mut [T]) {
        let m = self.slopes[head];
        match self.variant {
            BiasVariant::Encoder => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = T::of(-m * i.abs_diff(j) as f64);
                }
            }
            BiasVariant::Causal => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = T::of(if j > i { MASK_PENALTY } else { -m * (i - j) as f64 });
                }
            }
        }
    }

    pub fn matrix(&self, head: usize) -> Vec<f64> {
        let l = self.seq_len;
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            self.fill_row(head, i, &mut out[i * l..(i + 1) * l]);
        }
        out
    }
}
