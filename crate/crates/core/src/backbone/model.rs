use std::collections::BTreeMap;

use super::blocks::{count, global_pool, init_shapes, layer_norm, linear, map_to_tokens, tokens_to_map, Downsample, EncoderBlock, ParamShapes, SeConvBlock};
use super::config::{BackboneConfig, BlockKind, PosEncoding, IN_CHANNELS};
use crate::attention::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{CounterRng, Element, ParamStore, Tape, Tensor, Var};
use crate::posenc::MERGED_PREFIX;

/// Metadata key holding the resolved configuration in a weight container.
pub const CONFIG_META: &str = "meta/config";
pub const POS_EMBED: &str = "pos_embed";

/// Per-stage output maps `[b, c, h, w]`, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Element = f32> {
    pub maps: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
}

impl<T: Element> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }
}

#[derive(Debug, Clone)]
enum Blocks {
    Hybrid(Vec<EncoderBlock>),
    Conv(Vec<SeConvBlock>),
}

#[derive(Debug, Clone)]
struct Stage {
    downsample: Option<Downsample>,
    blocks: Blocks,
}

/// A constructed backbone: parameter layout plus forward computation. The
/// weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut in_c = IN_CHANNELS;
        let mut stages = Vec::new();
        for (i, s) in config.stages.iter().enumerate() {
            let downsample = config.downsample_geometry(i).map(|(kernel, stride, padding)| Downsample {
                prefix: format!("stages.{i}.downsample"),
                in_channels: in_c,
                out_channels: s.channels,
                kernel,
                stride,
                padding,
            });
            let block_prefix = |j: usize| format!("stages.{i}.blocks.{j}");
            let blocks = match s.kind {
                BlockKind::H => Blocks::Hybrid(
                    (0..s.blocks)
                        .map(|j| config.encoder_block(i, &block_prefix(j)))
                        .collect(),
                ),
                BlockKind::C => {
                    let hidden = s
                        .se_hidden
                        .ok_or_else(|| Error::config(format!("stages[{i}]: convolution stage without se_hidden")))?;
                    Blocks::Conv(
                        (0..s.blocks)
                            .map(|j| SeConvBlock::new(&block_prefix(j), s.channels, hidden))
                            .collect(),
                    )
                }
            };
            stages.push(Stage { downsample, blocks });
            in_c = s.channels;
        }
        Ok(Self { config, stages })
    }

    /// Rebuild from the configuration stored in a weight container.
    pub fn from_store<T: Element>(store: &ParamStore<T>) -> Result<Self> {
        let bytes = store
            .meta(CONFIG_META)
            .ok_or_else(|| Error::Format(format!("no `{CONFIG_META}` entry; weights are not self-describing")))?;
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("{CONFIG_META}: {e}")))?;
        Self::new(BackboneConfig::from_resolved_toml(text)?)
    }

    fn pos_embed_shape(&self) -> Option<Vec<usize>> {
        if self.config.pos_encoding != PosEncoding::Absolute {
            return None;
        }
        let size = self.config.image_size?;
        let stride = self.config.strides()[0];
        let n0 = (size / stride) * (size / stride);
        Some(vec![1, n0, self.config.stages[0].channels])
    }

    fn head_shapes(&self) -> ParamShapes {
        let c = self.config.stages.last().expect("four stages").channels;
        vec![
            ("head.norm.gamma".into(), vec![c]),
            ("head.norm.beta".into(), vec![c]),
            ("head.fc.weight".into(), vec![c, self.config.num_classes]),
            ("head.fc.bias".into(), vec![self.config.num_classes]),
        ]
    }

    /// Every parameter tensor, with RP-CPE branches or their merged form.
    pub fn param_shapes(&self, merged: bool) -> ParamShapes {
        let mut shapes = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                shapes.extend(ds.param_shapes());
            }
            if i == 0 {
                if let Some(shape) = self.pos_embed_shape() {
                    shapes.push((POS_EMBED.to_string(), shape));
                }
            }
            match &stage.blocks {
                Blocks::Hybrid(blocks) => blocks.iter().for_each(|b| shapes.extend(b.param_shapes(merged))),
                Blocks::Conv(blocks) => blocks.iter().for_each(|b| shapes.extend(b.param_shapes())),
            }
        }
        shapes.extend(self.head_shapes());
        shapes
    }

    /// Trainable scalars with all positional-encoding branches present.
    pub fn param_count(&self) -> usize {
        count(&self.param_shapes(false))
    }

    /// Scalars after re-parameterization.
    pub fn merged_param_count(&self) -> usize {
        count(&self.param_shapes(true))
    }

    /// Parameter totals grouped by stage and module.
    pub fn param_breakdown(&self, merged: bool) -> BTreeMap<String, usize> {
        let mut groups = BTreeMap::new();
        for (name, shape) in self.param_shapes(merged) {
            *groups.entry(module_group(&name)).or_insert(0) += shape.iter().product::<usize>();
        }
        groups
    }

    /// Random weights; the resolved configuration is embedded as metadata.
    pub fn init<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let rng = CounterRng::new(seed);
        let mut store = ParamStore::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                ds.init(&mut store, &rng)?;
            }
            if i == 0 {
                if let Some(shape) = self.pos_embed_shape() {
                    store.insert(POS_EMBED, rng.stream(POS_EMBED).trunc_normal(&shape, INIT_STD)?);
                }
            }
            match &stage.blocks {
                Blocks::Hybrid(blocks) => blocks.iter().try_for_each(|b| b.init(&mut store, &rng))?,
                Blocks::Conv(blocks) => blocks.iter().try_for_each(|b| b.init(&mut store, &rng))?,
            }
        }
        init_shapes(&self.head_shapes(), &mut store, &rng, |_| INIT_STD)?;
        store.set_meta(CONFIG_META, self.config.to_toml().into_bytes());
        Ok(store)
    }

    /// Collapse every positional-encoding layer in `store` into its merged
    /// kernel. Already merged layers are left as they are.
    pub fn merge_store<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for stage in &self.stages {
            if let Blocks::Hybrid(blocks) = &stage.blocks {
                for cpe in blocks.iter().filter_map(|b| b.cpe.as_ref()) {
                    cpe.merge_into(store)?;
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape(format!("expected images [b, 3, H, W], got {shape:?}")));
        };
        if c != IN_CHANNELS {
            return Err(Error::shape(format!("expected {IN_CHANNELS} input channels, got {c}")));
        }
        let m = self.config.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("input {h}×{w} is not divisible by {m}")));
        }
        if let (PosEncoding::Absolute, Some(size)) = (self.config.pos_encoding, self.config.image_size) {
            if h != size || w != size {
                return Err(Error::shape(format!(
                    "absolute position embeddings are fixed to {size}×{size}, got {h}×{w}"
                )));
            }
        }
        Ok((h, w))
    }

    /// Per-stage output maps for `images [b, 3, H, W]`. A single-resolution
    /// backbone yields one map.
    pub fn forward_features<T: Element>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        images: &Var<T>,
    ) -> Result<Vec<Var<T>>> {
        self.check_input(images.shape())?;
        let mut map = images.clone();
        let mut outputs = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let mut tokens = None;
            let mut hw = (map.shape()[2], map.shape()[3]);
            if let Some(ds) = &stage.downsample {
                let (mut t, out_hw) = ds.forward(tape, store, &map)?;
                if i == 0 && self.pos_embed_shape().is_some() {
                    t = tape.add(&t, &store.bind(tape, POS_EMBED)?)?;
                }
                tokens = Some(t);
                hw = out_hw;
            }
            map = match &stage.blocks {
                Blocks::Hybrid(blocks) => {
                    let mut t = match tokens {
                        Some(t) => t,
                        None => map_to_tokens(tape, &map)?,
                    };
                    for block in blocks {
                        t = block.forward(tape, store, &t, hw)?;
                    }
                    tokens_to_map(tape, &t, hw.0, hw.1)?
                }
                Blocks::Conv(blocks) => {
                    let mut m = match tokens {
                        Some(t) => tokens_to_map(tape, &t, hw.0, hw.1)?,
                        None => map,
                    };
                    for block in blocks {
                        m = block.forward(tape, store, &m)?;
                    }
                    m
                }
            };
            if self.config.hierarchical {
                outputs.push(map.clone());
            }
        }
        if !self.config.hierarchical {
            outputs.push(map);
        }
        Ok(outputs)
    }

    /// Global average pool → layer norm → linear, on the last map.
    pub fn classify<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, last: &Var<T>) -> Result<Var<T>> {
        let pooled = global_pool(tape, last)?;
        let normed = layer_norm(tape, store, &pooled, "head.norm")?;
        linear(tape, store, &normed, "head.fc")
    }

    /// Class logits `[b, num_classes]`.
    pub fn logits<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, images: &Var<T>) -> Result<Var<T>> {
        let features = self.forward_features(tape, store, images)?;
        self.classify(tape, store, features.last().expect("at least one stage"))
    }

    /// Feature pyramid without gradient tracking.
    pub fn features<T: Element>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let tape = Tape::inference();
        let maps = self
            .forward_features(&tape, store, &tape.constant(images.clone()))?
            .into_iter()
            .map(Var::into_value)
            .collect();
        let strides = if self.config.hierarchical {
            self.config.strides()
        } else {
            vec![*self.config.strides().last().expect("four stages")]
        };
        Ok(FeaturePyramid { maps, strides })
    }

    /// Logits without gradient tracking.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        Ok(self.logits(&tape, store, &tape.constant(images.clone()))?.into_value())
    }

    /// Expected pyramid shapes for a `size × size` input, without running it.
    pub fn pyramid_shapes(&self, batch: usize, size: usize) -> Result<Vec<Vec<usize>>> {
        self.check_input(&[batch, IN_CHANNELS, size, size])?;
        let strides = self.config.strides();
        let shapes: Vec<_> = self
            .config
            .stages
            .iter()
            .zip(&strides)
            .map(|(s, &stride)| vec![batch, s.channels, size / stride, size / stride])
            .collect();
        Ok(if self.config.hierarchical {
            shapes
        } else {
            vec![shapes.last().expect("four stages").clone()]
        })
    }
}

/// Group label of a parameter: `stages.<i>.<module>`, `pos_embed` or `head`.
pub fn module_group(name: &str) -> String {
    let name = name.strip_prefix(MERGED_PREFIX).unwrap_or(name);
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["stages", i, "downsample", ..] => format!("stages.{i}.downsample"),
        ["stages", i, "blocks", _, rest @ ..] => {
            let module = match rest {
                ["attn", ..] => "attn",
                ["ffn", "cpe", ..] => "cpe",
                ["ffn", ..] => "ffn",
                ["norm1" | "norm2", ..] => "norm",
                _ => "conv",
            };
            format!("stages.{i}.{module}")
        }
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}
