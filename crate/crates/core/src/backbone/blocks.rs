//! Building blocks of the backbone: the hybrid encoder block, the SE
//! convolution block and the down-sampling embedding.

use crate::attention::{KeyOnlyAttention, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Conv2dSpec, CounterRng, Element, ParamStore, Tape, Tensor, Var};
use crate::posenc::{make_cpe_variant, CpeKind, RpCpe};

pub const LN_EPS: f64 = 1e-6;
/// Channel reduction of the squeeze-excitation bottleneck.
pub const SE_REDUCTION: usize = 4;

pub type ParamShapes = Vec<(String, Vec<usize>)>;

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

pub(crate) fn count(shapes: &ParamShapes) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Fill every listed tensor: weights of rank ≥ 2 from a truncated normal
/// (`conv_std` for rank-4 kernels, [`INIT_STD`] otherwise), `gamma` with
/// ones, everything else with zeros.
pub(crate) fn init_shapes<T: Element>(
    shapes: &ParamShapes,
    store: &mut ParamStore<T>,
    rng: &CounterRng,
    conv_std: impl Fn(&[usize]) -> f64,
) -> Result<()> {
    for (name, shape) in shapes {
        let t = if shape.len() >= 2 {
            let std = if shape.len() == 4 { conv_std(shape) } else { INIT_STD };
            rng.stream(name).trunc_normal(shape, std)?
        } else if name.ends_with(".gamma") {
            Tensor::ones(shape.clone())?
        } else {
            Tensor::zeros(shape.clone())?
        };
        store.insert(name.clone(), t);
    }
    Ok(())
}

/// Fan-out scaled standard deviation for a `[out, in/groups, k, k]` kernel.
pub(crate) fn fan_out_std(shape: &[usize]) -> f64 {
    (2.0 / (shape[0] * shape[2] * shape[3]) as f64).sqrt()
}

fn linear_shapes(prefix: &str, fan_in: usize, fan_out: usize) -> ParamShapes {
    vec![
        (join(prefix, "weight"), vec![fan_in, fan_out]),
        (join(prefix, "bias"), vec![fan_out]),
    ]
}

fn norm_shapes(prefix: &str, width: usize) -> ParamShapes {
    vec![
        (join(prefix, "gamma"), vec![width]),
        (join(prefix, "beta"), vec![width]),
    ]
}

/// `x [.., in] · W [in, out] + b`.
pub fn linear<T: Element>(tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
    let w = store.bind(tape, &join(prefix, "weight"))?;
    let b = store.bind(tape, &join(prefix, "bias"))?;
    tape.add(&tape.matmul(x, &w)?, &b)
}

/// Layer norm over the last axis.
pub fn layer_norm<T: Element>(tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
    let gamma = store.bind(tape, &join(prefix, "gamma"))?;
    let beta = store.bind(tape, &join(prefix, "beta"))?;
    tape.layernorm(x, &gamma, &beta, LN_EPS)
}

/// `[b, h·w, c]` → `[b, c, h, w]`.
pub fn tokens_to_map<T: Element>(tape: &Tape<T>, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let &[b, n, c] = x.shape() else {
        return Err(Error::shape(format!("expected tokens [b, N, c], got {:?}", x.shape())));
    };
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens do not tile a {h}×{w} map")));
    }
    let x = tape.reshape(x, vec![b, h, w, c])?;
    tape.permute(&x, &[0, 3, 1, 2])
}

/// `[b, c, h, w]` → `[b, h·w, c]`.
pub fn map_to_tokens<T: Element>(tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("expected a map [b, c, h, w], got {:?}", x.shape())));
    };
    let x = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(&x, vec![b, h * w, c])
}

/// Global average pool `[b, c, h, w]` → `[b, c]`.
pub fn global_pool<T: Element>(tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("pooling expects [b, c, h, w], got {:?}", x.shape())));
    };
    tape.mean_axis(&tape.reshape(x, vec![b, c, h * w])?, 2, false)
}

/// Pre-norm encoder block: `x + Attn(LN x)`, then `+ FFN(LN ·)` where the
/// FFN is `fc1 → positional conv on the h×w map → GELU → fc2`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub prefix: String,
    pub channels: usize,
    pub hidden: usize,
    pub attn: KeyOnlyAttention,
    pub cpe: Option<RpCpe>,
}

impl EncoderBlock {
    /// `cpe = None` gives a plain two-layer FFN.
    pub fn new(prefix: &str, channels: usize, heads: usize, hidden: usize, cpe: Option<(CpeKind, usize)>) -> Self {
        let attn = KeyOnlyAttention {
            prefix: join(prefix, "attn"),
            in_dim: channels,
            dim: channels,
            heads,
        };
        let cpe = cpe.map(|(kind, n)| RpCpe {
            prefix: join(prefix, "ffn.cpe"),
            ..make_cpe_variant(kind, "", hidden, n.max(1)).expect("branch count is positive")
        });
        Self {
            prefix: prefix.to_string(),
            channels,
            hidden,
            attn,
            cpe,
        }
    }

    fn name(&self, leaf: &str) -> String {
        join(&self.prefix, leaf)
    }

    pub fn param_shapes(&self, merged: bool) -> ParamShapes {
        let (c, hid) = (self.channels, self.hidden);
        let mut shapes = norm_shapes(&self.name("norm1"), c);
        shapes.extend(self.attn.param_shapes());
        shapes.extend(norm_shapes(&self.name("norm2"), c));
        shapes.extend(linear_shapes(&self.name("ffn.fc1"), c, hid));
        if let Some(cpe) = &self.cpe {
            shapes.extend(cpe.param_shapes(merged));
        }
        shapes.extend(linear_shapes(&self.name("ffn.fc2"), hid, c));
        shapes
    }

    pub fn param_count(&self) -> usize {
        count(&self.param_shapes(false))
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        let mut shapes = self.param_shapes(false);
        if let Some(cpe) = &self.cpe {
            shapes.retain(|(n, _)| !n.starts_with(&cpe.prefix));
            cpe.init(store, rng)?;
        }
        init_shapes(&shapes, store, rng, fan_out_std)
    }

    /// `x [b, N, c]` with `N = h·w` → `[b, N, c]`.
    pub fn forward<T: Element>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        (h, w): (usize, usize),
    ) -> Result<Var<T>> {
        match x.shape() {
            &[_, n, c] if n == h * w && c == self.channels => {}
            s => {
                return Err(Error::shape(format!(
                    "encoder block `{}` expects [b, {}, {}] for a {h}×{w} map, got {s:?}",
                    self.prefix,
                    h * w,
                    self.channels
                )))
            }
        }
        let y = layer_norm(tape, store, x, &self.name("norm1"))?;
        let x = tape.add(x, &self.attn.forward(tape, store, &y)?)?;

        let y = layer_norm(tape, store, &x, &self.name("norm2"))?;
        let mut y = linear(tape, store, &y, &self.name("ffn.fc1"))?;
        if let Some(cpe) = &self.cpe {
            let map = cpe.forward(tape, store, &tokens_to_map(tape, &y, h, w)?)?;
            y = map_to_tokens(tape, &map)?;
        }
        let y = linear(tape, store, &tape.gelu(&y)?, &self.name("ffn.fc2"))?;
        tape.add(&x, &y)
    }
}

/// Residual convolution block with squeeze-excitation:
/// `x + SE(conv3×3 → LN → GELU → conv3×3)`.
#[derive(Debug, Clone)]
pub struct SeConvBlock {
    pub prefix: String,
    pub channels: usize,
    pub hidden: usize,
    pub reduced: usize,
}

impl SeConvBlock {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            hidden,
            reduced: (channels / SE_REDUCTION).max(1),
        }
    }

    fn name(&self, leaf: &str) -> String {
        join(&self.prefix, leaf)
    }

    pub fn param_shapes(&self) -> ParamShapes {
        let (c, m, r) = (self.channels, self.hidden, self.reduced);
        let mut shapes = vec![
            (self.name("conv1.weight"), vec![m, c, 3, 3]),
            (self.name("conv1.bias"), vec![m]),
        ];
        shapes.extend(norm_shapes(&self.name("norm"), m));
        shapes.push((self.name("conv2.weight"), vec![c, m, 3, 3]));
        shapes.push((self.name("conv2.bias"), vec![c]));
        shapes.extend(linear_shapes(&self.name("se.reduce"), c, r));
        shapes.extend(linear_shapes(&self.name("se.expand"), r, c));
        shapes
    }

    pub fn param_count(&self) -> usize {
        count(&self.param_shapes())
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        init_shapes(&self.param_shapes(), store, rng, fan_out_std)
    }

    /// Squeeze-excitation gate `[b, c]` of a `[b, c, h, w]` map.
    pub fn se_gate<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = global_pool(tape, x)?;
        let z = tape.gelu(&linear(tape, store, &pooled, &self.name("se.reduce"))?)?;
        tape.sigmoid(&linear(tape, store, &z, &self.name("se.expand"))?)
    }

    /// `x [b, c, h, w]` → same shape.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let &[b, c, _, _] = x.shape() else {
            return Err(Error::shape(format!("SE block expects [b, c, h, w], got {:?}", x.shape())));
        };
        if c != self.channels {
            return Err(Error::shape(format!(
                "SE block `{}` expects {} channels, got {c}",
                self.prefix, self.channels
            )));
        }
        let same = Conv2dSpec::new(1, 1, 1);
        let bind = |leaf: &str| store.bind(tape, &self.name(leaf));
        let y = tape.conv2d(x, &bind("conv1.weight")?, Some(&bind("conv1.bias")?), same)?;
        let y = tape.permute(&y, &[0, 2, 3, 1])?;
        let y = layer_norm(tape, store, &y, &self.name("norm"))?;
        let y = tape.gelu(&tape.permute(&y, &[0, 3, 1, 2])?)?;
        let y = tape.conv2d(&y, &bind("conv2.weight")?, Some(&bind("conv2.bias")?), same)?;
        let gate = tape.reshape(&self.se_gate(tape, store, &y)?, vec![b, c, 1, 1])?;
        tape.add(x, &tape.mul(&y, &gate)?)
    }
}

/// Resolution change between stages: a convolution (overlapping strided or
/// non-overlapping patch) followed by layer norm over channels.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Downsample {
    pub fn param_shapes(&self) -> ParamShapes {
        let mut shapes = vec![
            (
                join(&self.prefix, "weight"),
                vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            ),
            (join(&self.prefix, "bias"), vec![self.out_channels]),
        ];
        shapes.extend(norm_shapes(&join(&self.prefix, "norm"), self.out_channels));
        shapes
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        init_shapes(&self.param_shapes(), store, rng, fan_out_std)
    }

    /// `x [b, c_in, h, w]` → normalized tokens `[b, h'·w', c_out]` and `(h', w')`.
    pub fn forward<T: Element>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<(Var<T>, (usize, usize))> {
        let w = store.bind(tape, &join(&self.prefix, "weight"))?;
        let b = store.bind(tape, &join(&self.prefix, "bias"))?;
        let y = tape.conv2d(x, &w, Some(&b), Conv2dSpec::new(self.stride, self.padding, 1))?;
        let (h, w) = (y.shape()[2], y.shape()[3]);
        let tokens = map_to_tokens(tape, &y)?;
        Ok((layer_norm(tape, store, &tokens, &join(&self.prefix, "norm"))?, (h, w)))
    }
}
