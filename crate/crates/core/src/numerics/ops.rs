//! Forward kernels and the vector-Jacobian helpers the tape builds on.
//!
//! Everything here is a pure function of its inputs.

use super::element::Element;
use super::meter;
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

fn dims_mismatch<T: Element>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::shape(format!(
        "{what}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

fn check_axis(rank: usize, axis: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::shape(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(())
}

/// (outer, extent, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ── Matrix products ─────────────────────────────────────────────────────────

/// Batched product `op(a) · op(b)` where `op` optionally transposes the last
/// two axes. `b` may be rank 2, in which case it is shared across the batch.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(dims_mismatch("matmul", a, b));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, ka) = if trans_a {
        (a.shape()[ar - 1], a.shape()[ar - 2])
    } else {
        (a.shape()[ar - 2], a.shape()[ar - 1])
    };
    let (kb, n) = if trans_b {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    if ka != kb {
        return Err(dims_mismatch("matmul", a, b));
    }
    let k = ka;
    let lead = &a.shape()[..ar - 2];
    let shared_b = br == 2;
    if !shared_b && b.shape()[..br - 2] != *lead {
        return Err(dims_mismatch("matmul", a, b));
    }
    let batch: usize = lead.iter().product();
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];

    // Stored (rows, cols) of each operand's trailing matrix.
    let (a_rows, a_cols) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (b_rows, b_cols) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let a_step = a_rows * a_cols;
    let b_step = if shared_b { 0 } else { b_rows * b_cols };

    if shared_b && !trans_a {
        // Fold the batch into the row dimension: one large product.
        T::gemm(
            batch * m,
            k,
            n,
            T::one(),
            a.data(),
            rsa,
            csa,
            b.data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
    } else {
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * a_step..(i + 1) * a_step],
                rsa,
                csa,
                &b.data()[i * b_step..i * b_step + b_rows * b_cols],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
    }
    meter::count_macs(batch * m * n * k);
    Tensor::from_vec(out_shape, out)
}

/// Standard (batched) matrix product.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    bmm(a, b, false, false)
}

/// Σ over the batch of `aᵀ·g`, producing the gradient of a shared rank-2 operand.
pub(crate) fn shared_weight_grad<T: Element>(a: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *a.shape().last().unwrap();
    let n = *g.shape().last().unwrap();
    let rows = a.numel() / k;
    let a2 = a.reshape(vec![rows, k])?;
    let g2 = g.reshape(vec![rows, n])?;
    bmm(&a2, &g2, true, false)
}

// ── Broadcasting elementwise ────────────────────────────────────────────────

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn binary<T: Element>(
    what: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| dims_mismatch(what, a, b))?;
    let n = numel_of(&out_shape);
    // Common case: `b` repeats over the leading axes of `a` (bias, gating).
    if a.shape() == out_shape.as_slice() && a.shape().ends_with(b.shape()) {
        let inner = b.numel();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|i| f(ad[i], bd[i % inner])).collect();
        return Tensor::from_vec(out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(ad[ia], bd[ib]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = binary("mul", a, b, |x, y| x * y)?;
    meter::count_macs(out.numel());
    Ok(out)
}

/// Sum `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let out_shape = g.shape();
    let n_out = numel_of(shape);
    if out_shape.ends_with(shape) {
        let mut acc = vec![T::zero(); n_out];
        for (i, &v) in g.data().iter().enumerate() {
            acc[i % n_out] = acc[i % n_out] + v;
        }
        return Tensor::from_vec(shape.to_vec(), acc);
    }
    let strides = broadcast_strides(shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut target = 0usize;
    let mut acc = vec![T::zero(); n_out];
    for &v in g.data() {
        acc[target] = acc[target] + v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            target += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            target -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(shape.to_vec(), acc)
}

pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    meter::count_macs(x.numel());
    x.map(|v| v * s)
}

// ── Reductions ──────────────────────────────────────────────────────────────

pub fn sum_axis<T: Element>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    check_axis(x.rank(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (acc, &v) in dst.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if keepdim || shape.len() == 1 {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::from_vec(shape, out)
}

/// Repeat `g` (the result of reducing `axis` away) back to `shape`.
pub(crate) fn expand_axis<T: Element>(g: &Tensor<T>, shape: &[usize], axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

// ── Softmax ─────────────────────────────────────────────────────────────────

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.rank(), axis)?;
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = d[at(0)];
            for j in 1..len {
                max = max.max(d[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                out[at(j)] = out[at(j)] * inv;
            }
        }
    }
    meter::count_macs(d.len());
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// VJP of softmax given its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), out)
}

// ── Layer normalization ─────────────────────────────────────────────────────

/// Saved statistics for the layer-norm backward pass.
pub(crate) struct LayerNormCache<T: Element> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalize over the last axis, then apply `gamma`, `beta`.
pub fn layernorm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layernorm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layernorm_with_cache<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layernorm: gamma {:?} / beta {:?} must match last axis of {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    let rows = x.numel() / c;
    let (d, gd, bd) = (x.data(), gamma.data(), beta.data());
    let cn = T::from_usize(c).unwrap();
    let eps = T::from_f64_lossy(eps);
    let mut y = vec![T::zero(); d.len()];
    let mut xhat = vec![T::zero(); d.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &d[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gd[j] + bd[j];
        }
    }
    meter::count_macs(2 * d.len());
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), y)?,
        LayerNormCache {
            xhat: Tensor::from_vec(shape, xhat)?,
            rstd,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layernorm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let rows = g.numel() / c;
    let (xh, gd, gm) = (cache.xhat.data(), g.data(), gamma.data());
    let cn = T::from_usize(c).unwrap();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let o = r * c;
        let mut mean_gy = T::zero();
        let mut mean_gy_xh = T::zero();
        for j in 0..c {
            let gy = gd[o + j] * gm[j];
            mean_gy = mean_gy + gy;
            mean_gy_xh = mean_gy_xh + gy * xh[o + j];
            dgamma[j] = dgamma[j] + gd[o + j] * xh[o + j];
            dbeta[j] = dbeta[j] + gd[o + j];
        }
        mean_gy = mean_gy / cn;
        mean_gy_xh = mean_gy_xh / cn;
        let rs = cache.rstd[r];
        for j in 0..c {
            let gy = gd[o + j] * gm[j];
            dx[o + j] = rs * (gy - mean_gy - xh[o + j] * mean_gy_xh);
        }
    }
    Ok((
        Tensor::from_vec(g.shape().to_vec(), dx)?,
        Tensor::from_vec(vec![c], dgamma)?,
        Tensor::from_vec(vec![c], dbeta)?,
    ))
}

// ── Activations ─────────────────────────────────────────────────────────────

fn std_normal_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    meter::count_macs(x.numel());
    x.map(|v| v * std_normal_cdf(v))
}

pub(crate) fn gelu_derivative<T: Element>(x: T) -> T {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

// ── Layout ──────────────────────────────────────────────────────────────────

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!("invalid permutation {axes:?} for rank {rank}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    // Moving only unit axes leaves the memory order unchanged.
    let moved: Vec<usize> = axes.iter().copied().filter(|&a| x.shape()[a] != 1).collect();
    if moved.windows(2).all(|w| w[0] < w[1]) {
        return x.reshape(out_shape);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let d = x.data();
    let mut out = Vec::with_capacity(n);
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    for _ in 0..n / inner_len {
        for j in 0..inner_len {
            out.push(d[base + j * inner_stride]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

// ── Loss ────────────────────────────────────────────────────────────────────

/// Mean cross-entropy of `logits [b, classes]` against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross-entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let probs = softmax(logits, 1)?;
    let p = probs.data();
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        loss = loss - p[i * classes + l].max(T::min_positive_value()).ln();
    }
    Ok((loss / T::from_usize(labels.len()).unwrap(), probs))
}
