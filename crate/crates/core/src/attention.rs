//! Key-only attention and the dot-product baseline it replaces.
//!
//! Key-only attention never forms the `N×N` query-key matrix. Per head:
//!
//! * a saliency gate turns keys into one weight per position,
//!   `A = softmax(K·w / sqrt(d_h))` over positions;
//! * the global context is the gated sum of keys, `G = Σ_i A_i K_i`;
//! * each value is modulated by the context, `G ⊙ V_i`.
//!
//! Heads are concatenated and mixed by `Y = ((G⊙V)·U1 + K)·U2`, where `K`
//! is the head-concatenated key matrix. Cost and memory are linear in `N`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CounterRng, Element, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

fn check_input<T: Element>(x: &Var<T>, in_dim: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != in_dim {
        return Err(Error::shape(format!("attention expects [b, N, {in_dim}] input, got {s:?}")));
    }
    if !x.value().all_finite() {
        return Err(Error::Numeric("attention input contains NaN or infinite values".into()));
    }
    Ok((s[0], s[1]))
}

/// `[b, N, h·dh] → [b, h, N, dh]`
fn split_heads<T: Element>(tape: &Tape<T>, x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    let r = tape.reshape(x, vec![s[0], s[1], heads, s[2] / heads])?;
    tape.permute(&r, &[0, 2, 1, 3])
}

/// `[b, h, N, dh] → [b, N, h·dh]`
fn merge_heads<T: Element>(tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(&p, vec![s[0], s[2], s[1] * s[3]])
}

/// Attention weights from keys alone.
///
/// `keys [b, h, N, dh]`, `w_saliency [h, dh]` → `[b, h, N]`, each `(b, h)`
/// row a distribution over positions.
pub fn saliency_gate<T: Element>(tape: &Tape<T>, keys: &Var<T>, w_saliency: &Var<T>) -> Result<Var<T>> {
    let ks = keys.shape();
    if ks.len() != 4 {
        return Err(Error::shape(format!("saliency gate expects [b,h,N,dh] keys, got {ks:?}")));
    }
    let (b, h, n, dh) = (ks[0], ks[1], ks[2], ks[3]);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if w_saliency.shape() != [h, dh] {
        return Err(Error::shape(format!(
            "saliency vector {:?} does not match {h} heads of width {dh}",
            w_saliency.shape()
        )));
    }
    let w = tape.reshape(w_saliency, vec![1, h, 1, dh])?;
    let logits = tape.sum_axis(&tape.mul(keys, &w)?, 3, false)?;
    debug_assert_eq!(logits.shape(), [b, h, n]);
    let scaled = tape.scale(&logits, T::one() / T::from_usize(dh).unwrap().sqrt())?;
    tape.softmax(&scaled, 2)
}

/// Gate-weighted sum of keys: `weights [b,h,N]`, `keys [b,h,N,dh]` → `[b,h,dh]`.
pub fn global_context<T: Element>(tape: &Tape<T>, weights: &Var<T>, keys: &Var<T>) -> Result<Var<T>> {
    let (ws, ks) = (weights.shape(), keys.shape());
    if ws.len() != 3 || ks.len() != 4 || ws != &ks[..3] {
        return Err(Error::shape(format!(
            "global context: weights {ws:?} do not match keys {ks:?}"
        )));
    }
    let (b, h, n, dh) = (ks[0], ks[1], ks[2], ks[3]);
    let row = tape.reshape(weights, vec![b, h, 1, n])?;
    let g = tape.matmul(&row, keys)?;
    tape.reshape(&g, vec![b, h, dh])
}

/// Parameter layout of one key-only attention layer: `w_k`, `w_v` (`F×D`),
/// `w_saliency` (`h × D/h`), `u1`, `u2` (`D×D`). No biases.
#[derive(Debug, Clone)]
pub struct KeyOnlyAttention {
    pub prefix: String,
    pub in_dim: usize,
    pub dim: usize,
    pub heads: usize,
}

impl KeyOnlyAttention {
    pub fn new(prefix: impl Into<String>, in_dim: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("attention width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            prefix: prefix.into(),
            in_dim,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, d) = (self.in_dim, self.dim);
        vec![
            (self.name("w_k"), vec![f, d]),
            (self.name("w_v"), vec![f, d]),
            (self.name("w_saliency"), vec![self.heads, self.head_dim()]),
            (self.name("u1"), vec![d, d]),
            (self.name("u2"), vec![d, d]),
        ]
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = rng.stream(&name).trunc_normal(&shape, INIT_STD)?;
            store.insert(name, t);
        }
        Ok(())
    }

    /// `x [b, N, F]` → `[b, N, D]`.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let (b, n) = check_input(x, self.in_dim)?;
        let bind = |leaf: &str| store.bind(tape, &self.name(leaf));
        let (w_k, w_v, w_s) = (bind("w_k")?, bind("w_v")?, bind("w_saliency")?);
        let (u1, u2) = (bind("u1")?, bind("u2")?);

        let k = tape.matmul(x, &w_k)?;
        let v = tape.matmul(x, &w_v)?;
        let kh = split_heads(tape, &k, self.heads)?;
        let vh = split_heads(tape, &v, self.heads)?;

        let a = saliency_gate(tape, &kh, &w_s)?;
        let g = global_context(tape, &a, &kh)?;
        let g = tape.reshape(&g, vec![b, self.heads, 1, self.head_dim()])?;
        let local_global = merge_heads(tape, &tape.mul(&vh, &g)?)?;
        debug_assert_eq!(local_global.shape(), [b, n, self.dim]);

        let mixed = tape.add(&tape.matmul(&local_global, &u1)?, &k)?;
        tape.matmul(&mixed, &u2)
    }
}

/// Parameter layout of multi-head dot-product attention: `w_q`, `w_k`
/// (`F×D`) and `w_v` (`F×M`).
#[derive(Debug, Clone)]
pub struct DotProductAttention {
    pub prefix: String,
    pub in_dim: usize,
    pub dim: usize,
    pub value_dim: usize,
    pub heads: usize,
}

impl DotProductAttention {
    pub fn new(prefix: impl Into<String>, in_dim: usize, dim: usize, value_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) || !value_dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention widths {dim}/{value_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            in_dim,
            dim,
            value_dim,
            heads,
        })
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (self.name("w_q"), vec![self.in_dim, self.dim]),
            (self.name("w_k"), vec![self.in_dim, self.dim]),
            (self.name("w_v"), vec![self.in_dim, self.value_dim]),
        ]
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = rng.stream(&name).trunc_normal(&shape, INIT_STD)?;
            store.insert(name, t);
        }
        Ok(())
    }

    /// `x [b, N, F]` → `[b, N, M]`.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        check_input(x, self.in_dim)?;
        let bind = |leaf: &str| store.bind(tape, &self.name(leaf));
        let q = split_heads(tape, &tape.matmul(x, &bind("w_q")?)?, self.heads)?;
        let k = split_heads(tape, &tape.matmul(x, &bind("w_k")?)?, self.heads)?;
        let v = split_heads(tape, &tape.matmul(x, &bind("w_v")?)?, self.heads)?;
        let dh = T::from_usize(self.dim / self.heads).unwrap();
        let scores = tape.scale(&tape.matmul_nt(&q, &k)?, T::one() / dh.sqrt())?;
        let probs = tape.softmax(&scores, 3)?;
        merge_heads(tape, &tape.matmul(&probs, &v)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    KeyOnly,
    DotProduct,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::KeyOnly => "key_only",
            AttentionKind::DotProduct => "dot_product",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key_only" | "key-only" => Ok(AttentionKind::KeyOnly),
            "dot_product" | "dot-product" => Ok(AttentionKind::DotProduct),
            other => Err(Error::Usage(format!(
                "unknown attention kind `{other}` (expected key_only or dot_product)"
            ))),
        }
    }
}

/// Analytic count of scalar multiplications (a multiply-add counts once) for
/// one sample, mirroring what the engine's kernels perform. The dot-product
/// value width equals `d`.
///
/// * key-only: `2NFD` projections, `ND` gate logits, `2Nh` gate scale and
///   normalization, `ND` context, `ND` modulation, `2ND²` for `U1`, `U2`.
/// * dot-product: `3NFD` projections, `2N²D` for scores and value mixing,
///   `2hN²` for score scale and normalization.
pub fn attention_flops(kind: AttentionKind, n: usize, f: usize, d: usize, h: usize) -> Result<u64> {
    if n == 0 || f == 0 || d == 0 || h == 0 {
        return Err(Error::Usage("attention_flops needs positive N, F, D, h".into()));
    }
    if !d.is_multiple_of(h) {
        return Err(Error::Usage(format!("D = {d} not divisible by {h} heads")));
    }
    let (n, f, d, h) = (n as u64, f as u64, d as u64, h as u64);
    Ok(match kind {
        AttentionKind::KeyOnly => 2 * n * f * d + 3 * n * d + 2 * n * h + 2 * n * d * d,
        AttentionKind::DotProduct => 3 * n * f * d + 2 * n * n * d + 2 * h * n * n,
    })
}

/// Random parameters for a standalone attention layer of either kind.
pub fn init_attention<T: Element>(
    kind: AttentionKind,
    in_dim: usize,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<(AttentionLayer, ParamStore<T>)> {
    let rng = CounterRng::new(seed);
    let mut store = ParamStore::new();
    let layer = match kind {
        AttentionKind::KeyOnly => {
            let l = KeyOnlyAttention::new("attn", in_dim, dim, heads)?;
            l.init(&mut store, &rng)?;
            AttentionLayer::KeyOnly(l)
        }
        AttentionKind::DotProduct => {
            let l = DotProductAttention::new("attn", in_dim, dim, dim, heads)?;
            l.init(&mut store, &rng)?;
            AttentionLayer::DotProduct(l)
        }
    };
    Ok((layer, store))
}

#[derive(Debug, Clone)]
pub enum AttentionLayer {
    KeyOnly(KeyOnlyAttention),
    DotProduct(DotProductAttention),
}

impl AttentionLayer {
    pub fn forward<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            AttentionLayer::KeyOnly(l) => l.forward(tape, store, x),
            AttentionLayer::DotProduct(l) => l.forward(tape, store, x),
        }
    }

    /// Forward on a plain tensor with no gradient tracking.
    pub fn infer<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, store, &tape.constant(x.clone()))?.into_value())
    }
}
