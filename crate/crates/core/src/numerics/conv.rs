//! Grouped 2-D cross-correlation with zero padding, lowered per group to
//! im2col + gemm. `groups == channels` gives a depthwise convolution.

use super::element::Element;
use super::meter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn geometry<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Geometry> {
    if x.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects [b,c,h,w] input and [o,c/g,kh,kw] kernel, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let [batch, c_in, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let [c_out, cin_g, kh, kw]: [usize; 4] = weight.shape().try_into().unwrap();
    let groups = spec.groups;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
        return Err(Error::config(format!(
            "conv2d: {c_in} input / {c_out} output channels inconsistent with {groups} groups and kernel {:?}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    let ho = conv_out_extent(h, kh, spec.stride, spec.padding);
    let wo = conv_out_extent(w, kw, spec.stride, spec.padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(format!(
            "conv2d: input {h}x{w} (padding {}) smaller than kernel {kh}x{kw}",
            spec.padding
        )));
    };
    Ok(Geometry {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        ho,
        wo,
        groups,
        stride: spec.stride,
        padding: spec.padding,
    })
}

/// Gather the receptive fields of one group of one image into `[K, L]`.
fn im2col<T: Element>(g: &Geometry, img: &[T], group: usize, cols: &mut [T]) {
    let l = g.l();
    let c0 = group * g.cin_g();
    for c in 0..g.cin_g() {
        let plane = &img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `[K, L]` columns back into one group of an image gradient.
fn col2im<T: Element>(g: &Geometry, cols: &[T], group: usize, img: &mut [T]) {
    let l = g.l();
    let c0 = group * g.cin_g();
    for c in 0..g.cin_g() {
        let plane = &mut img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let p = iy as usize * g.w + ix as usize;
                            plane[p] = plane[p] + cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extents are `floor((in + 2p − k) / s) + 1`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, bias, spec)?;
    let (k, l, cout_g) = (g.k(), g.l(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.c_out * l];
    let mut cols = vec![T::zero(); k * l];
    let img_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let img = &x.data()[b * img_len..(b + 1) * img_len];
        for grp in 0..g.groups {
            im2col(&g, img, grp, &mut cols);
            let wg = &weight.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let o0 = (b * g.c_out + grp * cout_g) * l;
            T::gemm(
                cout_g,
                k,
                l,
                T::one(),
                wg,
                k as isize,
                1,
                &cols,
                l as isize,
                1,
                T::zero(),
                &mut out[o0..o0 + cout_g * l],
                l as isize,
                1,
            );
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(l).enumerate() {
            let bv = bias.data()[i % g.c_out];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    meter::count_macs(g.batch * g.c_out * l * k);
    Tensor::from_vec(vec![g.batch, g.c_out, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = geometry(x, weight, None, spec)?;
    let (k, l, cout_g) = (g.k(), g.l(), g.cout_g());
    let img_len = g.c_in * g.h * g.w;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); g.c_out];
    let mut cols = vec![T::zero(); k * l];
    let mut dcols = vec![T::zero(); k * l];
    let gd = gout.data();
    for b in 0..g.batch {
        let img = &x.data()[b * img_len..(b + 1) * img_len];
        for grp in 0..g.groups {
            im2col(&g, img, grp, &mut cols);
            let o0 = (b * g.c_out + grp * cout_g) * l;
            let go = &gd[o0..o0 + cout_g * l];
            let w0 = grp * cout_g * k;
            // dW_g += gout_g · colsᵀ
            T::gemm(
                cout_g,
                l,
                k,
                T::one(),
                go,
                l as isize,
                1,
                &cols,
                1,
                l as isize,
                T::one(),
                &mut dw[w0..w0 + cout_g * k],
                k as isize,
                1,
            );
            // dcols = W_gᵀ · gout_g
            T::gemm(
                k,
                cout_g,
                l,
                T::one(),
                &weight.data()[w0..w0 + cout_g * k],
                1,
                k as isize,
                go,
                l as isize,
                1,
                T::zero(),
                &mut dcols,
                l as isize,
                1,
            );
            col2im(&g, &dcols, grp, &mut dx[b * img_len..(b + 1) * img_len]);
        }
        for (c, acc) in db.iter_mut().enumerate() {
            let o0 = (b * g.c_out + c) * l;
            *acc = *acc + gd[o0..o0 + l].iter().copied().sum::<T>();
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec(weight.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![g.c_out], db)?,
    ))
}
