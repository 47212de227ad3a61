use linglo_core::attention::{
    attention_flops, global_context, init_attention, saliency_gate, AttentionKind, AttentionLayer,
};
use linglo_core::numerics::{gradcheck, meter, CounterRng, GradcheckConfig, ParamStore, Tape, Tensor};
use linglo_core::reference::{self, DotProductWeights, KeyOnlyWeights};
use linglo_core::Error;
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    CounterRng::new(seed).normal(shape, 1.0).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gate(keys: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    saliency_gate(&tape, &tape.constant(keys.clone()), &tape.constant(w.clone()))
        .unwrap()
        .into_value()
}

fn context(a: &Tensor<f64>, keys: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    global_context(&tape, &tape.constant(a.clone()), &tape.constant(keys.clone()))
        .unwrap()
        .into_value()
}

/// Random key-only layer whose weights are unit-variance so the oracle
/// comparison exercises every term at a visible scale.
fn key_only(f: usize, d: usize, h: usize, seed: u64) -> (AttentionLayer, ParamStore<f64>) {
    let (layer, mut store) = init_attention::<f64>(AttentionKind::KeyOnly, f, d, h, seed).unwrap();
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        let scale = 1.0 / (shape[0] as f64).sqrt();
        store.insert(name, CounterRng::new(seed + i as u64).normal(&shape, scale).unwrap());
    }
    (layer, store)
}

fn dot_product(f: usize, d: usize, h: usize, seed: u64) -> (AttentionLayer, ParamStore<f64>) {
    let (layer, mut store) = init_attention::<f64>(AttentionKind::DotProduct, f, d, h, seed).unwrap();
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        store.insert(name, CounterRng::new(seed + 100 + i as u64).normal(&shape, 0.5).unwrap());
    }
    (layer, store)
}

fn key_only_oracle(store: &ParamStore<f64>, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (b, n, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let g = |k: &str| store.get(&format!("attn.{k}")).unwrap().data().to_vec();
    let (w_k, w_v, w_s, u1, u2) = (g("w_k"), g("w_v"), g("w_saliency"), g("u1"), g("u2"));
    let d = u1.len().isqrt();
    let p = KeyOnlyWeights {
        w_k: &w_k,
        w_v: &w_v,
        w_saliency: &w_s,
        u1: &u1,
        u2: &u2,
        heads,
    };
    (0..b)
        .flat_map(|i| reference::key_only_attention(&x.data()[i * n * f..(i + 1) * n * f], n, f, d, &p))
        .collect()
}

fn dot_product_oracle(store: &ParamStore<f64>, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (b, n, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let g = |k: &str| store.get(&format!("attn.{k}")).unwrap().clone();
    let (w_q, w_k, w_v) = (g("w_q"), g("w_k"), g("w_v"));
    let (d, m) = (w_q.shape()[1], w_v.shape()[1]);
    let p = DotProductWeights {
        w_q: w_q.data(),
        w_k: w_k.data(),
        w_v: w_v.data(),
        heads,
    };
    (0..b)
        .flat_map(|i| reference::dot_product_attention(&x.data()[i * n * f..(i + 1) * n * f], n, f, d, m, &p))
        .collect()
}

// ── Saliency gate and global context ───────────────────────────────────────

#[test]
fn gate_on_identical_rows_is_uniform() {
    let row = randn(&[4], 1).to_vec();
    let keys = Tensor::from_vec(vec![1, 1, 6, 4], row.repeat(6)).unwrap();
    let a = gate(&keys, &randn(&[1, 4], 2));
    assert!(a.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn gate_on_single_position_is_one() {
    let a = gate(&randn(&[2, 3, 1, 4], 3), &randn(&[3, 4], 4));
    assert!(a.data().iter().all(|&v| v == 1.0));
}

#[test]
fn gate_matches_scalar_loop() {
    let (b, h, n, dh) = (2, 2, 5, 4);
    let keys = randn(&[b, h, n, dh], 5);
    let w = randn(&[h, dh], 6);
    let a = gate(&keys, &w);
    for bh in 0..b * h {
        let head = bh % h;
        let want = reference::saliency_gate(&keys.data()[bh * n * dh..(bh + 1) * n * dh], &w.data()[head * dh..(head + 1) * dh], n, dh);
        assert!(max_diff(&a.data()[bh * n..(bh + 1) * n], &want) <= 1e-6);
    }
}

#[test]
fn context_special_cases() {
    let keys = randn(&[1, 1, 5, 3], 7);
    let mut one_hot = vec![0.0; 5];
    one_hot[2] = 1.0;
    let g = context(&Tensor::from_vec(vec![1, 1, 5], one_hot).unwrap(), &keys);
    assert_eq!(g.data(), &keys.data()[6..9]);

    let g = context(&Tensor::full(vec![1, 1, 5], 0.2).unwrap(), &keys);
    let mean: Vec<f64> = (0..3).map(|j| (0..5).map(|i| keys.data()[i * 3 + j]).sum::<f64>() / 5.0).collect();
    assert!(max_diff(g.data(), &mean) < 1e-15);
}

#[test]
fn context_matches_accumulation_loop() {
    let (b, h, n, dh) = (2, 3, 7, 4);
    let keys = randn(&[b, h, n, dh], 8);
    let a = randn(&[b, h, n], 9);
    let g = context(&a, &keys);
    let mut want = vec![0.0; b * h * dh];
    for bh in 0..b * h {
        for i in 0..n {
            for j in 0..dh {
                want[bh * dh + j] += a.data()[bh * n + i] * keys.data()[(bh * n + i) * dh + j];
            }
        }
    }
    assert!(max_diff(g.data(), &want) <= 1e-6);
}

#[test]
fn context_shape_mismatch() {
    let tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::zeros(vec![1, 2, 4]).unwrap());
    let k = tape.constant(Tensor::zeros(vec![1, 2, 5, 3]).unwrap());
    assert!(matches!(global_context(&tape, &a, &k), Err(Error::Shape(_))));
}

// ── Key-only attention ──────────────────────────────────────────────────────

#[test]
fn keys_pass_through_when_u1_is_zero() {
    let (layer, mut store) = key_only(6, 8, 2, 10);
    store.insert("attn.u1", Tensor::zeros(vec![8, 8]).unwrap());
    store.insert("attn.u2", Tensor::eye(8).unwrap());
    let x = randn(&[2, 5, 6], 11);
    let y = layer.infer(&store, &x).unwrap();
    let k = linglo_core::numerics::matmul(&x, store.get("attn.w_k").unwrap()).unwrap();
    assert!(max_diff(y.data(), k.data()) < 1e-14);
}

#[test]
fn single_position_single_head_by_hand() {
    let (layer, store) = key_only(3, 2, 1, 12);
    let x = randn(&[1, 1, 3], 13);
    let y = layer.infer(&store, &x).unwrap();
    let w = |k: &str| store.get(&format!("attn.{k}")).unwrap().data().to_vec();
    let (wk, wv, u1, u2) = (w("w_k"), w("w_v"), w("u1"), w("u2"));
    let xv = x.data();
    let k: Vec<f64> = (0..2).map(|j| (0..3).map(|i| xv[i] * wk[i * 2 + j]).sum()).collect();
    let v: Vec<f64> = (0..2).map(|j| (0..3).map(|i| xv[i] * wv[i * 2 + j]).sum()).collect();
    // With one position the gate is 1 and G = K_1.
    let kv = [k[0] * v[0], k[1] * v[1]];
    let inner: Vec<f64> = (0..2).map(|j| kv[0] * u1[j] + kv[1] * u1[2 + j] + k[j]).collect();
    let want: Vec<f64> = (0..2).map(|j| inner[0] * u2[j] + inner[1] * u2[2 + j]).collect();
    assert!(max_diff(y.data(), &want) < 1e-14);
}

#[test]
fn key_only_matches_straight_line_oracle() {
    let (layer, store) = key_only(8, 8, 2, 14);
    let x = randn(&[2, 6, 8], 15);
    let y = layer.infer(&store, &x).unwrap();
    assert!(max_diff(y.data(), &key_only_oracle(&store, &x, 2)) <= 1e-6);

    let store32: ParamStore<f32> = store.cast().unwrap();
    let y32 = layer.infer(&store32, &x.cast().unwrap()).unwrap();
    assert!(max_diff(&y32.to_f64_vec(), &key_only_oracle(&store, &x, 2)) <= 1e-4);
}

#[test]
fn random_instances_match_oracles() {
    let mut rng = CounterRng::new(77);
    for case in 0..60u64 {
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(16 / heads));
        let f = 1 + rng.below(16);
        let n = 1 + rng.below(16);
        let b = 1 + rng.below(2);
        let x = randn(&[b, n, f], 1000 + case);

        let (layer, store) = key_only(f, d, heads, case);
        let y = layer.infer(&store, &x).unwrap();
        assert!(max_diff(y.data(), &key_only_oracle(&store, &x, heads)) <= 1e-6, "key-only case {case}");

        let (layer, store) = dot_product(f, d, heads, case);
        let y = layer.infer(&store, &x).unwrap();
        assert!(max_diff(y.data(), &dot_product_oracle(&store, &x, heads)) <= 1e-6, "dot-product case {case}");
    }
}

#[test]
fn nan_input_is_numeric_error() {
    let (layer, store) = key_only(4, 4, 1, 0);
    let mut v = randn(&[1, 3, 4], 16).to_vec();
    v[5] = f64::NAN;
    let x = Tensor::from_vec(vec![1, 3, 4], v).unwrap();
    assert!(matches!(layer.infer(&store, &x), Err(Error::Numeric(_))));
}

#[test]
fn key_only_gradients_pass_finite_differences() {
    let (layer, mut store) = key_only(4, 4, 2, 17);
    store.insert("x", randn(&[2, 3, 4], 18));
    let r = randn(&[2, 3, 4], 19);
    let report = gradcheck(
        &store,
        |tape, s| {
            let y = layer.forward(tape, s, &s.bind(tape, "x")?)?;
            tape.sum_all(&tape.mul(&y, &tape.constant(r.clone()))?)
        },
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    assert!(report.tensors.iter().any(|t| t.name == "attn.w_saliency"));
}

// ── Dot-product attention ───────────────────────────────────────────────────

#[test]
fn single_position_returns_values() {
    let (layer, store) = dot_product(5, 4, 2, 20);
    let x = randn(&[2, 1, 5], 21);
    let y = layer.infer(&store, &x).unwrap();
    let v = linglo_core::numerics::matmul(&x, store.get("attn.w_v").unwrap()).unwrap();
    assert!(max_diff(y.data(), v.data()) < 1e-15);
}

#[test]
fn identical_keys_average_values() {
    let (layer, mut store) = dot_product(3, 4, 1, 22);
    // Zero out the key projection of the last input feature, then vary only that feature.
    let mut wk = store.get("attn.w_k").unwrap().to_vec();
    wk[8..12].iter_mut().for_each(|v| *v = 0.0);
    store.insert("attn.w_k", Tensor::from_vec(vec![3, 4], wk).unwrap());
    let mut x = Vec::new();
    for i in 0..4 {
        x.extend([0.3, -0.7, i as f64]);
    }
    let x = Tensor::from_vec(vec![1, 4, 3], x).unwrap();
    let y = layer.infer(&store, &x).unwrap();
    let v = linglo_core::numerics::matmul(&x, store.get("attn.w_v").unwrap()).unwrap();
    let mean: Vec<f64> = (0..4).map(|j| (0..4).map(|i| v.data()[i * 4 + j]).sum::<f64>() / 4.0).collect();
    for i in 0..4 {
        assert!(max_diff(&y.data()[i * 4..(i + 1) * 4], &mean) < 1e-14);
    }
}

#[test]
fn dot_product_gradients_pass_finite_differences() {
    let (layer, mut store) = dot_product(4, 4, 2, 23);
    store.insert("x", randn(&[1, 3, 4], 24));
    let r = randn(&[1, 3, 4], 25);
    let report = gradcheck(
        &store,
        |tape, s| {
            let y = layer.forward(tape, s, &s.bind(tape, "x")?)?;
            tape.sum_all(&tape.mul(&y, &tape.constant(r.clone()))?)
        },
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

// ── Operation counts ────────────────────────────────────────────────────────

#[test]
fn key_only_count_is_linear_in_n() {
    for (f, d, h) in [(64, 64, 1), (32, 64, 4), (7, 10, 5)] {
        let c = |n| attention_flops(AttentionKind::KeyOnly, n, f, d, h).unwrap() as i128;
        for n in [1, 13, 196, 4096] {
            assert_eq!(c(2 * n) - c(n), c(3 * n) - c(2 * n));
        }
    }
}

#[test]
fn dot_product_count_is_quadratic_beyond_projections() {
    let (f, d, h) = (64u64, 64u64, 2u64);
    let quad = |n: u64| attention_flops(AttentionKind::DotProduct, n as usize, 64, 64, 2).unwrap() - 3 * n * f * d;
    let c = quad(1);
    for n in [2, 16, 196, 1024] {
        assert_eq!(quad(n), c * n * n);
    }
    assert_eq!(c, 2 * d + 2 * h);
}

#[test]
fn counts_match_instrumented_forward() {
    for kind in [AttentionKind::KeyOnly, AttentionKind::DotProduct] {
        for heads in [1, 4] {
            let (layer, store) = init_attention::<f32>(kind, 64, 64, heads, 3).unwrap();
            let x: Tensor<f32> = CounterRng::new(4).normal(&[1, 196, 64], 1.0).unwrap();
            meter::reset_macs();
            layer.infer(&store, &x).unwrap();
            assert_eq!(meter::macs(), attention_flops(kind, 196, 64, 64, heads).unwrap(), "{kind} h={heads}");
        }
    }
}

#[test]
fn count_argument_errors() {
    assert!(matches!(attention_flops(AttentionKind::KeyOnly, 0, 4, 4, 1), Err(Error::Usage(_))));
    assert!(matches!(attention_flops(AttentionKind::KeyOnly, 4, 4, 6, 4), Err(Error::Usage(_))));
    assert!(matches!("linear".parse::<AttentionKind>(), Err(Error::Usage(_))));
}

// ── Properties ──────────────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_rows_sum_to_one(n in 1usize..=64, dh in 1usize..=8, seed in any::<u64>()) {
        let a = gate(&randn(&[2, 2, n, dh], seed), &CounterRng::new(seed ^ 9).normal(&[2, dh], 3.0).unwrap());
        for row in a.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn gate_is_invariant_to_reciprocal_scaling(n in 1usize..=32, s in 0.05f64..20.0, seed in any::<u64>()) {
        let keys = randn(&[1, 2, n, 4], seed);
        let w = randn(&[2, 4], seed ^ 5);
        let a = gate(&keys, &w);
        let b = gate(&keys.map(|v| v / s).unwrap(), &w.map(|v| v * s).unwrap());
        prop_assert!(max_diff(a.data(), b.data()) <= 1e-6);
    }

    #[test]
    fn key_only_is_permutation_equivariant(n in 2usize..=12, seed in any::<u64>()) {
        let (layer, store) = key_only(6, 8, 2, seed % 1000);
        let x = randn(&[1, n, 6], seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = CounterRng::new(seed).stream("perm");
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 6..(i + 1) * 6].to_vec()).collect();
        let y = layer.infer(&store, &x).unwrap();
        let yp = layer.infer(&store, &Tensor::from_vec(vec![1, n, 6], permuted).unwrap()).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            prop_assert!(max_diff(&yp.data()[row * 8..(row + 1) * 8], &y.data()[src * 8..(src + 1) * 8]) <= 1e-6);
        }
    }
}
