//! Backbone configuration: presets, the TOML file format and validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::blocks::{EncoderBlock, SeConvBlock};
use crate::error::{Error, Result};
use crate::posenc::{CpeKind, DEFAULT_BRANCHES};

pub const STAGES: usize = 4;
pub const IN_CHANNELS: usize = 3;
/// Patch size of the single embedding in non-hierarchical mode.
pub const FLAT_PATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    B0,
    B1,
    B2,
    /// Tiny configuration for gradient checks and toy training.
    Micro,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b0" => Ok(Variant::B0),
            "b1" => Ok(Variant::B1),
            "b2" => Ok(Variant::B2),
            "micro" => Ok(Variant::Micro),
            other => Err(Error::Config(format!("variant: unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::B0 => "b0",
            Variant::B1 => "b1",
            Variant::B2 => "b2",
            Variant::Micro => "micro",
        })
    }
}

/// Block type of one stage: hybrid encoder (`H`) or SE convolution (`C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    H,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKind {
    /// Overlapping strided convolutions: (7,4,3) then (3,2,1).
    StridedConv,
    /// Non-overlapping patches, kernel equal to stride.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    /// Depthwise convolution inside every FFN.
    Conditional,
    /// Learned per-position vectors added after the first embedding.
    Absolute,
}

/// Parse a layout string such as `C-H-H-H`.
pub fn parse_layout(layout: &str) -> Result<Vec<BlockKind>> {
    let kinds = layout
        .split('-')
        .map(|tok| match tok.trim() {
            "H" | "h" => Ok(BlockKind::H),
            "C" | "c" => Ok(BlockKind::C),
            other => Err(Error::Usage(format!("layout `{layout}`: unknown block kind `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if kinds.len() != STAGES {
        return Err(Error::Usage(format!(
            "layout `{layout}` has {} stages, expected {STAGES}",
            kinds.len()
        )));
    }
    Ok(kinds)
}

pub fn layout_string(kinds: &[BlockKind]) -> String {
    kinds
        .iter()
        .map(|k| match k {
            BlockKind::H => "H",
            BlockKind::C => "C",
        })
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub kind: BlockKind,
    /// Hidden width of SE convolution blocks, chosen so one block has about
    /// as many parameters as the hybrid block it replaces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpeConfig {
    pub kind: CpeKind,
    pub branches: usize,
}

/// Fully resolved backbone configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub downsample: DownsampleKind,
    pub pos_encoding: PosEncoding,
    pub hierarchical: bool,
    /// Fixed input resolution; required by absolute position embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    pub cpe: CpeConfig,
    pub stages: Vec<StageConfig>,
}

/// Per-stage overrides in a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub channels: Option<Vec<usize>>,
    pub blocks: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub expansion: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpeOverrides {
    pub kind: Option<CpeKind>,
    pub branches: Option<usize>,
}

/// On-disk configuration: a preset plus optional overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub variant: Variant,
    pub layout: Option<String>,
    pub num_classes: Option<usize>,
    pub image_size: Option<usize>,
    pub downsample: Option<DownsampleKind>,
    pub pos_encoding: Option<PosEncoding>,
    pub hierarchical: Option<bool>,
    #[serde(default)]
    pub cpe: CpeOverrides,
    #[serde(default)]
    pub stages: StageOverrides,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn resolve(&self) -> Result<BackboneConfig> {
        let mut cfg = BackboneConfig::preset(self.variant);
        if let Some(n) = self.num_classes {
            cfg.num_classes = n;
        }
        cfg.image_size = self.image_size.or(cfg.image_size);
        if let Some(d) = self.downsample {
            cfg.downsample = d;
        }
        if let Some(p) = self.pos_encoding {
            cfg.pos_encoding = p;
        }
        if let Some(h) = self.hierarchical {
            cfg.hierarchical = h;
        }
        if let Some(k) = self.cpe.kind {
            cfg.cpe.kind = k;
        }
        if let Some(n) = self.cpe.branches {
            cfg.cpe.branches = n;
        }
        let overrides = [
            ("stages.channels", &self.stages.channels),
            ("stages.blocks", &self.stages.blocks),
            ("stages.heads", &self.stages.heads),
            ("stages.expansion", &self.stages.expansion),
        ];
        for (field, values) in overrides {
            let Some(values) = values else { continue };
            if values.len() != STAGES {
                return Err(Error::Config(format!(
                    "{field}: expected {STAGES} entries, got {}",
                    values.len()
                )));
            }
            for (stage, &v) in cfg.stages.iter_mut().zip(values) {
                match field {
                    "stages.channels" => stage.channels = v,
                    "stages.blocks" => stage.blocks = v,
                    "stages.heads" => stage.heads = v,
                    _ => stage.ffn_expansion = v,
                }
            }
        }
        let layout = match &self.layout {
            Some(l) => parse_layout(l).map_err(|e| match e {
                Error::Usage(m) => Error::Config(format!("layout: {m}")),
                other => other,
            })?,
            None => vec![BlockKind::H; STAGES],
        };
        cfg.with_layout(&layout)
    }
}

impl BackboneConfig {
    /// Preset without validation or SE-width resolution; all stages hybrid.
    pub fn preset(variant: Variant) -> Self {
        let (channels, blocks, heads, expansion, classes) = match variant {
            Variant::B0 => ([32, 64, 160, 256], [2, 3, 3, 2], [1, 2, 5, 8], [8, 8, 4, 4], 1000),
            Variant::B1 => ([64, 128, 320, 512], [2, 3, 3, 2], [1, 2, 5, 8], [8, 8, 4, 4], 1000),
            Variant::B2 => ([64, 128, 320, 512], [3, 5, 9, 3], [1, 2, 5, 8], [8, 8, 4, 4], 1000),
            Variant::Micro => ([8, 8, 8, 8], [1, 1, 1, 1], [1, 2, 2, 4], [2, 2, 2, 2], 4),
        };
        let stages = (0..STAGES)
            .map(|i| StageConfig {
                channels: channels[i],
                blocks: blocks[i],
                heads: heads[i],
                ffn_expansion: expansion[i],
                kind: BlockKind::H,
                se_hidden: None,
            })
            .collect();
        Self {
            variant,
            num_classes: classes,
            downsample: DownsampleKind::StridedConv,
            pos_encoding: PosEncoding::Conditional,
            hierarchical: true,
            image_size: None,
            cpe: CpeConfig {
                kind: CpeKind::RpCpe,
                branches: DEFAULT_BRANCHES,
            },
            stages,
        }
    }

    /// Validated preset with every stage hybrid.
    pub fn from_variant(variant: Variant) -> Result<Self> {
        Self::preset(variant).with_layout(&[BlockKind::H; STAGES])
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        ConfigFile::parse(text)?.resolve()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parse a resolved configuration (as written by [`Self::to_toml`]).
    pub fn from_resolved_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> String {
        layout_string(&self.stages.iter().map(|s| s.kind).collect::<Vec<_>>())
    }

    /// Assign block kinds per stage, then validate and size the SE blocks.
    pub fn with_layout(mut self, layout: &[BlockKind]) -> Result<Self> {
        if layout.len() != self.stages.len() {
            return Err(Error::Usage(format!(
                "layout has {} stages, config has {}",
                layout.len(),
                self.stages.len()
            )));
        }
        for (stage, &kind) in self.stages.iter_mut().zip(layout) {
            stage.kind = kind;
        }
        self.validate()?;
        for i in 0..self.stages.len() {
            self.stages[i].se_hidden = match self.stages[i].kind {
                BlockKind::C => Some(self.matched_se_hidden(i)),
                BlockKind::H => None,
            };
        }
        Ok(self)
    }

    fn matched_se_hidden(&self, stage: usize) -> usize {
        let target = self.encoder_block(stage, "").param_count();
        let c = self.stages[stage].channels;
        let count = |m: usize| SeConvBlock::new("", c, m).param_count();
        // The count is affine in the hidden width.
        let slope = count(2) - count(1);
        let fixed = count(1) - slope;
        let m = ((target.saturating_sub(fixed)) as f64 / slope as f64).round().max(1.0) as usize;
        (m.saturating_sub(1).max(1)..=m + 1)
            .min_by_key(|&m| count(m).abs_diff(target))
            .unwrap_or(m)
    }

    pub(crate) fn encoder_block(&self, stage: usize, prefix: &str) -> EncoderBlock {
        let s = &self.stages[stage];
        let cpe = (self.pos_encoding == PosEncoding::Conditional).then_some((self.cpe.kind, self.cpe.branches));
        EncoderBlock::new(prefix, s.channels, s.heads, s.channels * s.ffn_expansion, cpe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::config(format!("stages: expected {STAGES}, got {}", self.stages.len())));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes: must be at least 1"));
        }
        if self.cpe.branches == 0 {
            return Err(Error::config("cpe.branches: must be at least 1"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let field = |name: &str| format!("stages.{name}[{i}]");
            if s.channels == 0 {
                return Err(Error::Config(format!("{}: must be positive", field("channels"))));
            }
            if s.blocks == 0 {
                return Err(Error::Config(format!("{}: must be positive", field("blocks"))));
            }
            if s.ffn_expansion == 0 {
                return Err(Error::Config(format!("{}: must be positive", field("expansion"))));
            }
            if s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "{}: {} channels not divisible by {} heads",
                    field("heads"),
                    s.channels,
                    s.heads
                )));
            }
        }
        if !self.hierarchical {
            if self.downsample != DownsampleKind::Patch {
                return Err(Error::config(
                    "hierarchical: a single-resolution backbone needs downsample = \"patch\"",
                ));
            }
            let c0 = self.stages[0].channels;
            if self.stages.iter().any(|s| s.channels != c0) {
                return Err(Error::config(
                    "stages.channels: a single-resolution backbone keeps one width in all stages",
                ));
            }
        }
        if self.pos_encoding == PosEncoding::Absolute {
            let size = self
                .image_size
                .ok_or_else(|| Error::config("image_size: required with absolute position embeddings"))?;
            if size % self.input_multiple() != 0 {
                return Err(Error::Config(format!(
                    "image_size: {size} is not a multiple of {}",
                    self.input_multiple()
                )));
            }
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn input_multiple(&self) -> usize {
        if self.hierarchical {
            32
        } else {
            FLAT_PATCH
        }
    }

    /// `(kernel, stride, padding)` of the embedding in front of `stage`, or
    /// `None` if the stage keeps its input resolution.
    pub fn downsample_geometry(&self, stage: usize) -> Option<(usize, usize, usize)> {
        match (self.hierarchical, self.downsample, stage) {
            (false, _, 0) => Some((FLAT_PATCH, FLAT_PATCH, 0)),
            (false, _, _) => None,
            (true, DownsampleKind::StridedConv, 0) => Some((7, 4, 3)),
            (true, DownsampleKind::StridedConv, _) => Some((3, 2, 1)),
            (true, DownsampleKind::Patch, 0) => Some((4, 4, 0)),
            (true, DownsampleKind::Patch, _) => Some((2, 2, 0)),
        }
    }

    /// Output stride of every stage.
    pub fn strides(&self) -> Vec<usize> {
        let mut stride = 1;
        (0..self.stages.len())
            .map(|i| {
                if let Some((_, s, _)) = self.downsample_geometry(i) {
                    stride *= s;
                }
                stride
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_parsing() {
        assert_eq!(parse_layout("C-H-H-H").unwrap()[0], BlockKind::C);
        assert!(matches!(parse_layout("C-H-H"), Err(Error::Usage(_))));
        assert!(matches!(parse_layout("C-X-H-H"), Err(Error::Usage(_))));
        assert_eq!(layout_string(&parse_layout("c-c-h-h").unwrap()), "C-C-H-H");
    }

    #[test]
    fn toml_overrides_apply() {
        let cfg = BackboneConfig::from_toml(
            r#"
            variant = "b0"
            layout = "C-C-H-H"
            num_classes = 10
            [cpe]
            kind = "p-cpe"
            branches = 3
            [stages]
            blocks = [1, 1, 1, 1]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.num_classes, 10);
        assert_eq!(cfg.cpe.kind, CpeKind::PCpe);
        assert_eq!(cfg.layout(), "C-C-H-H");
        assert!(cfg.stages[0].se_hidden.is_some() && cfg.stages[2].se_hidden.is_none());
        assert!(cfg.stages.iter().all(|s| s.blocks == 1));
    }

    #[test]
    fn bad_fields_are_named() {
        let err = BackboneConfig::from_toml("variant = \"b0\"\n[stages]\nheads = [1, 2, 3, 8]\n").unwrap_err();
        assert!(err.to_string().contains("stages.heads[2]"), "{err}");
        let err = BackboneConfig::from_toml("variant = \"b0\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = BackboneConfig::from_toml("variant = \"b0\"\nhierarchical = false\n").unwrap_err();
        assert!(err.to_string().contains("hierarchical"), "{err}");
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = BackboneConfig::from_toml("variant = \"b1\"\nlayout = \"C-H-H-H\"\n").unwrap();
        assert_eq!(BackboneConfig::from_resolved_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn stride_schedule() {
        let cfg = BackboneConfig::from_variant(Variant::B0).unwrap();
        assert_eq!(cfg.strides(), vec![4, 8, 16, 32]);
    }
}
