//! Self-checks shared by the command-line tool and the acceptance suite:
//! the catalogue of gradient-check problems and the randomized comparison of
//! both attention kinds against the scalar oracles.

use std::fmt;
use std::str::FromStr;

use crate::attention::{init_attention, AttentionKind};
use crate::backbone::{synthetic_patterns, Backbone, BackboneConfig, Downsample, EncoderBlock, SeConvBlock, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Conv2dSpec, CounterRng, ParamStore, Tape, Tensor, Var};
use crate::posenc::{make_cpe_variant, CpeKind};
use crate::reference::{self, DotProductWeights, KeyOnlyWeights};

pub type LossFn = Box<dyn Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var<f64>>>;

/// One gradient-check problem: parameters (inputs included) and a scalar loss.
pub struct GradCase {
    pub name: String,
    pub params: ParamStore<f64>,
    pub loss: LossFn,
}

impl GradCase {
    fn new(name: &str, params: ParamStore<f64>, loss: LossFn) -> Self {
        Self {
            name: name.to_string(),
            params,
            loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Op, Scope::Block, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(Error::Usage(format!("unknown scope `{other}` (expected op, block or model)"))),
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    CounterRng::new(seed).normal(shape, 1.0)
}

/// Contract `y` with a fixed random tensor so every output element matters.
fn probe(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = tape.constant(CounterRng::new(seed).stream("probe").normal(y.shape(), 1.0)?);
    tape.sum_all(&tape.mul(y, &r)?)
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t);
    }
    s
}

/// Replace every tensor with unit-scale values (norm gains near 1) so the
/// check is not dominated by the tiny initialization scale.
pub fn scramble(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let entries: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in entries.into_iter().enumerate() {
        let gain = name.ends_with("gamma");
        let t = randn(&shape, seed.wrapping_mul(7919).wrapping_add(i as u64))?
            .map(|v| if gain { 1.0 + 0.3 * v } else { 0.5 * v })?;
        store.insert(name, t);
    }
    Ok(())
}

fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let ab = |a: &[usize], b: &[usize], k| -> Result<ParamStore<f64>> {
        Ok(store_of(vec![("a", randn(a, s(k))?), ("b", randn(b, s(k + 100))?)]))
    };
    let a = |shape: &[usize], k| -> Result<ParamStore<f64>> { Ok(store_of(vec![("a", randn(shape, s(k))?)])) };
    let p = s(500);

    Ok(vec![
        GradCase::new("matmul", ab(&[2, 3, 4], &[4, 2], 1)?, Box::new(move |t, st| probe(t, &t.matmul(&st.bind(t, "a")?, &st.bind(t, "b")?)?, p))),
        GradCase::new("matmul_nt", ab(&[2, 3, 4], &[2, 5, 4], 2)?, Box::new(move |t, st| probe(t, &t.matmul_nt(&st.bind(t, "a")?, &st.bind(t, "b")?)?, p))),
        GradCase::new("add", ab(&[2, 3], &[1, 3], 3)?, Box::new(move |t, st| probe(t, &t.add(&st.bind(t, "a")?, &st.bind(t, "b")?)?, p))),
        GradCase::new("sub", ab(&[2, 3], &[2, 1], 4)?, Box::new(move |t, st| probe(t, &t.sub(&st.bind(t, "a")?, &st.bind(t, "b")?)?, p))),
        GradCase::new("mul", ab(&[2, 3], &[2, 3], 5)?, Box::new(move |t, st| probe(t, &t.mul(&st.bind(t, "a")?, &st.bind(t, "b")?)?, p))),
        GradCase::new("scale", a(&[4, 3], 6)?, Box::new(move |t, st| probe(t, &t.scale(&st.bind(t, "a")?, -1.7)?, p))),
        GradCase::new("sum_axis", a(&[3, 4, 2], 7)?, Box::new(move |t, st| probe(t, &t.sum_axis(&st.bind(t, "a")?, 1, false)?, p))),
        GradCase::new("mean_axis", a(&[3, 4, 2], 8)?, Box::new(move |t, st| probe(t, &t.mean_axis(&st.bind(t, "a")?, 2, true)?, p))),
        GradCase::new("softmax", a(&[3, 5], 9)?, Box::new(move |t, st| probe(t, &t.softmax(&st.bind(t, "a")?, 1)?, p))),
        GradCase::new("gelu", a(&[3, 5], 10)?, Box::new(move |t, st| probe(t, &t.gelu(&st.bind(t, "a")?)?, p))),
        GradCase::new("sigmoid", a(&[3, 5], 11)?, Box::new(move |t, st| probe(t, &t.sigmoid(&st.bind(t, "a")?)?, p))),
        GradCase::new("reshape", a(&[3, 4], 12)?, Box::new(move |t, st| probe(t, &t.reshape(&st.bind(t, "a")?, vec![2, 6])?, p))),
        GradCase::new("permute", a(&[2, 3, 4], 13)?, Box::new(move |t, st| probe(t, &t.permute(&st.bind(t, "a")?, &[2, 0, 1])?, p))),
        GradCase::new(
            "layernorm",
            store_of(vec![("x", randn(&[3, 6], s(14))?), ("gamma", randn(&[6], s(15))?), ("beta", randn(&[6], s(16))?)]),
            Box::new(move |t, st| {
                let y = t.layernorm(&st.bind(t, "x")?, &st.bind(t, "gamma")?, &st.bind(t, "beta")?, 1e-5)?;
                probe(t, &y, p)
            }),
        ),
        GradCase::new(
            "conv2d",
            store_of(vec![("x", randn(&[1, 4, 5, 5], s(17))?), ("weight", randn(&[2, 2, 3, 3], s(18))?), ("bias", randn(&[2], s(19))?)]),
            Box::new(move |t, st| {
                let spec = Conv2dSpec::new(2, 1, 2);
                probe(t, &t.conv2d(&st.bind(t, "x")?, &st.bind(t, "weight")?, Some(&st.bind(t, "bias")?), spec)?, p)
            }),
        ),
        GradCase::new("cross_entropy", a(&[4, 3], 20)?, Box::new(|t, st| t.cross_entropy(&st.bind(t, "a")?, &[2, 0, 1, 1]))),
    ])
}

fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let p = s(500);
    let mut cases = Vec::new();

    for kind in [AttentionKind::KeyOnly, AttentionKind::DotProduct] {
        let (layer, mut store) = init_attention::<f64>(kind, 4, 4, 2, s(1))?;
        scramble(&mut store, s(2))?;
        store.insert("x", randn(&[2, 3, 4], s(3))?);
        let name = format!("{kind}_attention");
        cases.push(GradCase::new(&name, store, Box::new(move |t, st| probe(t, &layer.forward(t, st, &st.bind(t, "x")?)?, p))));
    }

    let cpe = make_cpe_variant(CpeKind::RpCpe, "cpe", 2, 4)?;
    let mut store = ParamStore::new();
    cpe.init(&mut store, &CounterRng::new(s(4)))?;
    scramble(&mut store, s(5))?;
    store.insert("x", randn(&[1, 2, 4, 4], s(6))?);
    cases.push(GradCase::new("rp_cpe", store, Box::new(move |t, st| probe(t, &cpe.forward_train(t, st, &st.bind(t, "x")?)?, p))));

    let blk = EncoderBlock::new("blk", 4, 2, 8, Some((CpeKind::RpCpe, 4)));
    let mut store = ParamStore::new();
    blk.init(&mut store, &CounterRng::new(s(7)))?;
    scramble(&mut store, s(8))?;
    store.insert("x", randn(&[1, 6, 4], s(9))?);
    cases.push(GradCase::new(
        "encoder_block",
        store,
        Box::new(move |t, st| probe(t, &blk.forward(t, st, &st.bind(t, "x")?, (3, 2))?, p)),
    ));

    let se = SeConvBlock::new("se_blk", 4, 3);
    let mut store = ParamStore::new();
    se.init(&mut store, &CounterRng::new(s(10)))?;
    scramble(&mut store, s(11))?;
    store.insert("x", randn(&[1, 4, 3, 3], s(12))?);
    cases.push(GradCase::new("se_conv_block", store, Box::new(move |t, st| probe(t, &se.forward(t, st, &st.bind(t, "x")?)?, p))));

    let down = Downsample {
        prefix: "down".into(),
        in_channels: 3,
        out_channels: 4,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let mut store = ParamStore::new();
    down.init(&mut store, &CounterRng::new(s(13)))?;
    scramble(&mut store, s(14))?;
    store.insert("x", randn(&[1, 3, 5, 5], s(15))?);
    cases.push(GradCase::new(
        "downsample",
        store,
        Box::new(move |t, st| probe(t, &down.forward(t, st, &st.bind(t, "x")?)?.0, p)),
    ));
    Ok(cases)
}

fn model_cases(seed: u64) -> Result<Vec<GradCase>> {
    let micro = Backbone::new(BackboneConfig::from_variant(Variant::Micro)?)?;
    let mut store = micro.init::<f64>(seed)?;
    scramble(&mut store, seed.wrapping_add(1))?;
    let (x, y) = synthetic_patterns::<f64>(2, 4, 32, seed)?;
    Ok(vec![GradCase::new(
        "micro_backbone",
        store,
        Box::new(move |t, st| t.cross_entropy(&micro.logits(t, st, &t.constant(x.clone()))?, &y)),
    )])
}

/// Gradient-check problems at one scope. Every engine op, every block type,
/// or the micro backbone end to end under cross-entropy.
pub fn gradient_cases(scope: Scope, seed: u64) -> Result<Vec<GradCase>> {
    match scope {
        Scope::Op => op_cases(seed),
        Scope::Block => block_cases(seed),
        Scope::Model => model_cases(seed),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSummary {
    pub kind: AttentionKind,
    pub instances: usize,
    pub max_abs_diff: f64,
}

/// Run `instances` random problems (N, F, D ≤ 16, 1, 2 or 4 heads) through
/// the engine and the scalar oracle and report the largest difference.
pub fn oracle_check(kind: AttentionKind, instances: usize, seed: u64) -> Result<OracleSummary> {
    let mut rng = CounterRng::new(seed).stream(&format!("oracle/{kind}"));
    let mut worst: f64 = 0.0;
    for case in 0..instances as u64 {
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(16 / heads));
        let f = 1 + rng.below(16);
        let n = 1 + rng.below(16);
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(case);
        let x = randn(&[1, n, f], case_seed)?;
        let (layer, mut store) = init_attention::<f64>(kind, f, d, heads, case_seed)?;
        scramble(&mut store, case_seed)?;
        let w = |k: &str| -> Result<Vec<f64>> { Ok(store.get(&format!("attn.{k}"))?.to_vec()) };
        let want = match kind {
            AttentionKind::KeyOnly => {
                let (w_k, w_v, w_s, u1, u2) = (w("w_k")?, w("w_v")?, w("w_saliency")?, w("u1")?, w("u2")?);
                let p = KeyOnlyWeights {
                    w_k: &w_k,
                    w_v: &w_v,
                    w_saliency: &w_s,
                    u1: &u1,
                    u2: &u2,
                    heads,
                };
                reference::key_only_attention(x.data(), n, f, d, &p)
            }
            AttentionKind::DotProduct => {
                let (w_q, w_k, w_v) = (w("w_q")?, w("w_k")?, w("w_v")?);
                let p = DotProductWeights {
                    w_q: &w_q,
                    w_k: &w_k,
                    w_v: &w_v,
                    heads,
                };
                reference::dot_product_attention(x.data(), n, f, d, d, &p)
            }
        };
        let got = layer.infer(&store, &x)?;
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(OracleSummary {
        kind,
        instances,
        max_abs_diff: worst,
    })
}
