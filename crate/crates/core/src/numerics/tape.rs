//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] records an op only when one of its inputs requires a gradient,
//! so inference through a non-recording tape keeps no intermediates alive.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::conv::{conv2d, conv2d_backward, Conv2dSpec};
use super::element::Element;
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A value flowing through the tape. `id` is set when it requires a gradient.
#[derive(Clone, Debug)]
pub struct Var<T: Element> {
    value: Tensor<T>,
    id: Option<usize>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }
}

/// Vector-Jacobian product: maps the output gradient to one optional
/// gradient per parent.
pub type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Element> {
    parents: Vec<Option<usize>>,
    backward: Option<Backward<T>>,
    name: Option<String>,
    shape: Vec<usize>,
}

pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Element> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Mutable access, used by gradient-check fault injection.
    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.by_name.insert(name, grad);
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value, id: None }
    }

    /// A named trainable leaf. On a non-recording tape this is a constant.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            name: Some(name.to_string()),
            shape: value.shape().to_vec(),
        });
        Var { value, id: Some(id) }
    }

    /// Record a custom op. The VJP runs only if a parent requires a gradient.
    pub fn custom(&self, value: Tensor<T>, parents: &[&Var<T>], backward: Backward<T>) -> Var<T> {
        if !self.recording || parents.iter().all(|p| p.id.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(backward),
            name: None,
            shape: value.shape().to_vec(),
        });
        Var { value, id: Some(id) }
    }

    fn tracks(&self, parents: &[&Var<T>]) -> bool {
        self.recording && parents.iter().any(|p| p.id.is_some())
    }

    /// Back-propagate from a scalar `loss`. Every named leaf receives a
    /// gradient; leaves the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if let Some(id) = loss.id {
            grads[id] = Some(Tensor::ones(loss.shape().to_vec())?);
        }
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                Some(vjp) => {
                    for (parent, pg) in node.parents.iter().zip(vjp(&g)?) {
                        let (Some(p), Some(pg)) = (parent, pg) else { continue };
                        grads[*p] = Some(match grads[*p].take() {
                            Some(acc) => ops::add(&acc, &pg)?,
                            None => pg,
                        });
                    }
                }
                None => grads[i] = Some(g),
            }
        }
        let mut out = Gradients::default();
        for (node, g) in nodes.iter().zip(grads) {
            if let Some(name) = &node.name {
                let g = match g {
                    Some(g) => g,
                    None => Tensor::zeros(node.shape.clone())?,
                };
                out.by_name.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    // ── Differentiable ops ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.bmm(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.bmm(a, b, true)
    }

    fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let value = ops::bmm(&a.value, &b.value, false, trans_b)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (av, bv) = (a.value.clone(), b.value.clone());
        let (need_a, need_b) = (a.id.is_some(), b.id.is_some());
        let shared = bv.rank() == 2 && av.rank() > 2;
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(move |g| {
                // y = a·op(b):  da = g·op(b)ᵀ,  d op(b) = aᵀ·g
                let da = if need_a {
                    Some(ops::bmm(g, &bv, false, !trans_b)?)
                } else {
                    None
                };
                let db = if !need_b {
                    None
                } else if shared {
                    let d = ops::shared_weight_grad(&av, g)?;
                    Some(if trans_b { ops::permute(&d, &[1, 0])? } else { d })
                } else if trans_b {
                    Some(ops::bmm(g, &av, true, false)?)
                } else {
                    Some(ops::bmm(&av, g, true, false)?)
                };
                Ok(vec![da, db])
            }),
        ))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = ops::add(&a.value, &b.value)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(move |g| Ok(vec![Some(ops::sum_to_shape(g, &sa)?), Some(ops::sum_to_shape(g, &sb)?)])),
        ))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = ops::sub(&a.value, &b.value)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(move |g| {
                let gb = ops::scale(&ops::sum_to_shape(g, &sb)?, -T::one())?;
                Ok(vec![Some(ops::sum_to_shape(g, &sa)?), Some(gb)])
            }),
        ))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = ops::mul(&a.value, &b.value)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (av, bv) = (a.value.clone(), b.value.clone());
        let (need_a, need_b) = (a.id.is_some(), b.id.is_some());
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(move |g| {
                let da = if need_a {
                    Some(ops::sum_to_shape(&ops::mul(g, &bv)?, av.shape())?)
                } else {
                    None
                };
                let db = if need_b {
                    Some(ops::sum_to_shape(&ops::mul(g, &av)?, bv.shape())?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }),
        ))
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Result<Var<T>> {
        let value = ops::scale(&x.value, s)?;
        Ok(self.custom(value, &[x], Box::new(move |g| Ok(vec![Some(ops::scale(g, s)?)]))))
    }

    pub fn sum_axis(&self, x: &Var<T>, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let value = ops::sum_axis(&x.value, axis, keepdim)?;
        let shape = x.shape().to_vec();
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g| Ok(vec![Some(ops::expand_axis(g, &shape, axis)?)])),
        ))
    }

    pub fn mean_axis(&self, x: &Var<T>, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let n = *x
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range for {:?}", x.shape())))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(&s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn sum_all(&self, x: &Var<T>) -> Result<Var<T>> {
        let flat = self.reshape(x, vec![x.value.numel()])?;
        self.sum_axis(&flat, 0, true)
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let value = ops::softmax(&x.value, axis)?;
        let y = value.clone();
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g| Ok(vec![Some(ops::softmax_backward(&y, g, axis)?)])),
        ))
    }

    pub fn layernorm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (value, cache) = ops::layernorm_with_cache(&x.value, &gamma.value, &beta.value, eps)?;
        if !self.tracks(&[x, gamma, beta]) {
            return Ok(self.constant(value));
        }
        let gv = gamma.value.clone();
        Ok(self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |g| {
                let (dx, dg, db) = ops::layernorm_backward(&cache, &gv, g)?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }),
        ))
    }

    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = ops::gelu(&x.value)?;
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xv = x.value.clone();
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g| {
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * ops::gelu_derivative(x))
                    .collect();
                Ok(vec![Some(Tensor::from_vec(xv.shape().to_vec(), d)?)])
            }),
        ))
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = ops::sigmoid(&x.value)?;
        let y = value.clone();
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g| {
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                Ok(vec![Some(Tensor::from_vec(y.shape().to_vec(), d)?)])
            }),
        ))
    }

    pub fn reshape(&self, x: &Var<T>, shape: Vec<usize>) -> Result<Var<T>> {
        let value = x.value.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.custom(value, &[x], Box::new(move |g| Ok(vec![Some(g.reshape(orig.clone())?)]))))
    }

    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let value = ops::permute(&x.value, axes)?;
        let inv = ops::inverse_permutation(axes);
        Ok(self.custom(value, &[x], Box::new(move |g| Ok(vec![Some(ops::permute(g, &inv)?)]))))
    }

    pub fn conv2d(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        let value = conv2d(&x.value, &weight.value, bias.map(|b| &b.value), spec)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        if !self.tracks(&parents) {
            return Ok(self.constant(value));
        }
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let has_bias = bias.is_some();
        Ok(self.custom(
            value,
            &parents,
            Box::new(move |g| {
                let (dx, dw, db) = conv2d_backward(&xv, &wv, spec, g)?;
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    out.push(Some(db));
                }
                Ok(out)
            }),
        ))
    }

    /// Mean cross-entropy over the batch; returns a `[1]` loss.
    pub fn cross_entropy(&self, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let (loss, probs) = ops::cross_entropy(&logits.value, labels)?;
        let value = Tensor::scalar(loss)?;
        let labels = labels.to_vec();
        Ok(self.custom(
            value,
            &[logits],
            Box::new(move |g| {
                let classes = probs.shape()[1];
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] = d[i * classes + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * scale);
                Ok(vec![Some(Tensor::from_vec(probs.shape().to_vec(), d)?)])
            }),
        ))
    }
}
