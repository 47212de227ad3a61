//! Straight-line scalar implementations used as independent oracles.
//!
//! Nothing here touches the tensor engine: inputs are flat row-major `f64`
//! slices, every product is an explicit loop. The test suites and the
//! `oracle-check` command compare the engine against these.

/// `a [m,k] · b [k,n]` by the triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Stable softmax of one vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Layer norm over rows of width `c`, two-pass mean then variance.
pub fn layernorm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / c {
        let row = &x[r * c..(r + 1) * c];
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= c as f64;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        var /= c as f64;
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

/// Φ(x) by composite Simpson integration of the standard normal density
/// from 0 to x (plus the exact half-mass below zero).
pub fn normal_cdf_quadrature(x: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

pub fn gelu_quadrature(x: f64) -> f64 {
    x * normal_cdf_quadrature(x, 2000)
}

/// Six-nested-loop grouped convolution with zero padding.
/// `x [b,c_in,h,w]`, `weight [c_out, c_in/groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    dims: [usize; 4],
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c_in, h, w] = dims;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let mut out = vec![0.0; b * c_out * ho * wo];
    for n in 0..b {
        for o in 0..c_out {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * c_in + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * c_out + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, c_out, ho, wo])
}

/// Weights of key-only attention, flat row-major.
pub struct KeyOnlyWeights<'a> {
    pub w_k: &'a [f64],
    pub w_v: &'a [f64],
    /// `[heads, D/heads]`
    pub w_saliency: &'a [f64],
    pub u1: &'a [f64],
    pub u2: &'a [f64],
    pub heads: usize,
}

/// Saliency gate for one head: logits `K_i · w / sqrt(dh)` then softmax
/// over positions. `k` is `[n, dh]`.
pub fn saliency_gate(k: &[f64], w: &[f64], n: usize, dh: usize) -> Vec<f64> {
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..dh {
            acc += k[i * dh + j] * w[j];
        }
        logits[i] = acc / (dh as f64).sqrt();
    }
    softmax(&logits)
}

/// Key-only attention on one sample `x [n, f]`, returning `[n, d]`.
pub fn key_only_attention(x: &[f64], n: usize, f: usize, d: usize, p: &KeyOnlyWeights) -> Vec<f64> {
    let h = p.heads;
    let dh = d / h;
    let k = matmul(x, p.w_k, n, f, d);
    let v = matmul(x, p.w_v, n, f, d);
    let mut mixed = vec![0.0; n * d];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        let mut kh = vec![0.0; n * dh];
        for i in 0..n {
            for (j, c) in cols.clone().enumerate() {
                kh[i * dh + j] = k[i * d + c];
            }
        }
        let a = saliency_gate(&kh, &p.w_saliency[head * dh..(head + 1) * dh], n, dh);
        let mut g = vec![0.0; dh];
        for i in 0..n {
            for j in 0..dh {
                g[j] += a[i] * kh[i * dh + j];
            }
        }
        for i in 0..n {
            for (j, c) in cols.clone().enumerate() {
                mixed[i * d + c] = g[j] * v[i * d + c];
            }
        }
    }
    let mut inner = matmul(&mixed, p.u1, n, d, d);
    for (o, kv) in inner.iter_mut().zip(&k) {
        *o += kv;
    }
    matmul(&inner, p.u2, n, d, d)
}

pub struct DotProductWeights<'a> {
    pub w_q: &'a [f64],
    pub w_k: &'a [f64],
    pub w_v: &'a [f64],
    pub heads: usize,
}

/// Multi-head scaled dot-product attention on one sample `x [n, f]`,
/// returning `[n, m]`. Scores are scaled by the per-head width.
pub fn dot_product_attention(
    x: &[f64],
    n: usize,
    f: usize,
    d: usize,
    m: usize,
    p: &DotProductWeights,
) -> Vec<f64> {
    let h = p.heads;
    let (dh, mh) = (d / h, m / h);
    let q = matmul(x, p.w_q, n, f, d);
    let k = matmul(x, p.w_k, n, f, d);
    let v = matmul(x, p.w_v, n, f, m);
    let mut out = vec![0.0; n * m];
    for head in 0..h {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += q[i * d + head * dh + c] * k[j * d + head * dh + c];
                }
                *s = acc / (dh as f64).sqrt();
            }
            let a = softmax(&scores);
            for c in 0..mh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a[j] * v[j * m + head * mh + c];
                }
                out[i * m + head * mh + c] = acc;
            }
        }
    }
    out
}
