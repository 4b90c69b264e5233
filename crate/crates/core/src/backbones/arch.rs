use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{BridgeSourceConfig, DEFAULT_REDUCTION};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3 (strided), 1×1 expand.
    Bottleneck,
}

impl BlockKind {
    /// Number of conv layers `n`; attention follows the last one.
    pub fn conv_count(self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    Ba,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Ba => "ba",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "plain" => Ok(AttentionKind::None),
            "se" => Ok(AttentionKind::Se),
            "ba" => Ok(AttentionKind::Ba),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

/// One residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub attention: AttentionKind,
    /// Layers bridged into bridge attention; `None` bridges every earlier conv.
    #[serde(default)]
    pub bridge_sources: Option<BridgeSourceConfig>,
    /// Projection shortcut (1×1 conv + BN) instead of identity.
    pub downsample: bool,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

impl BlockSpec {
    /// Effective bridge sources, defaulting to all layers before the attended one.
    pub fn sources(&self) -> BridgeSourceConfig {
        self.bridge_sources
            .clone()
            .unwrap_or_else(|| BridgeSourceConfig::all_before(self.kind.conv_count()))
    }

    /// Output channels of conv layer `layer` (1-based).
    pub fn layer_channels(&self, layer: usize) -> usize {
        if layer == self.kind.conv_count() {
            self.out_ch
        } else {
            self.mid_ch
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.mid_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config(format!("zero channel count in {self:?}")));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if (self.stride != 1 || self.in_ch != self.out_ch) && !self.downsample {
            return Err(Error::Config(format!(
                "block {}→{} with stride {} changes shape but has no projection shortcut",
                self.in_ch, self.out_ch, self.stride
            )));
        }
        if self.attention == AttentionKind::Ba {
            self.sources().validate(self.kind.conv_count())?;
        }
        if self.attention != AttentionKind::None
            && (self.reduction == 0 || !self.out_ch.is_multiple_of(self.reduction))
        {
            return Err(Error::Config(format!(
                "{} channels not divisible by reduction {}",
                self.out_ch, self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Stem convolution (+ BN + ReLU), optionally followed by max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub max_pool: Option<PoolSpec>,
}

/// A run of blocks; the template describes the first, the rest keep its
/// output width with stride 1 and identity shortcuts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub template: BlockSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
}

pub const BUILTIN_ARCHS: [&str; 3] = ["resnet20", "resnet50", "resnet101"];

impl ArchSpec {
    /// CIFAR-style ResNet-20: 3×3 stem, three stages of three basic blocks at 16/32/64 channels.
    pub fn resnet20() -> Self {
        let stage = |in_ch: usize, out_ch: usize, stride: usize| StageSpec {
            blocks: 3,
            template: BlockSpec {
                kind: BlockKind::Basic,
                in_ch,
                mid_ch: out_ch,
                out_ch,
                stride,
                attention: AttentionKind::None,
                bridge_sources: None,
                downsample: in_ch != out_ch || stride != 1,
                reduction: DEFAULT_REDUCTION,
            },
        };
        Self {
            name: "resnet20".into(),
            stem: StemSpec {
                out_ch: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
                max_pool: None,
            },
            stages: vec![stage(16, 16, 1), stage(16, 32, 2), stage(32, 64, 2)],
            num_classes: 10,
            input_shape: [3, 32, 32],
        }
    }

    fn imagenet_bottleneck(name: &str, counts: [usize; 4]) -> Self {
        let mut in_ch = 64;
        let stages = counts
            .iter()
            .zip([64, 128, 256, 512])
            .enumerate()
            .map(|(i, (&blocks, mid))| {
                let out = mid * 4;
                let stride = if i == 0 { 1 } else { 2 };
                let template = BlockSpec {
                    kind: BlockKind::Bottleneck,
                    in_ch,
                    mid_ch: mid,
                    out_ch: out,
                    stride,
                    attention: AttentionKind::None,
                    bridge_sources: None,
                    downsample: true,
                    reduction: DEFAULT_REDUCTION,
                };
                in_ch = out;
                StageSpec { blocks, template }
            })
            .collect();
        Self {
            name: name.into(),
            stem: StemSpec {
                out_ch: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                max_pool: Some(PoolSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }),
            },
            stages,
            num_classes: 1000,
            input_shape: [3, 224, 224],
        }
    }

    pub fn resnet50() -> Self {
        Self::imagenet_bottleneck("resnet50", [3, 4, 6, 3])
    }

    pub fn resnet101() -> Self {
        Self::imagenet_bottleneck("resnet101", [3, 4, 23, 3])
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "resnet20" => Some(Self::resnet20()),
            "resnet50" => Some(Self::resnet50()),
            "resnet101" => Some(Self::resnet101()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text)?;
        arch.expand()?;
        Ok(arch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// A built-in name or a path to a JSON description.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(a) = Self::builtin(name_or_path) {
            return Ok(a);
        }
        let path = Path::new(name_or_path);
        if path.is_file() {
            return Self::load(path);
        }
        Err(Error::Config(format!(
            "unknown architecture `{name_or_path}` (built-ins: {})",
            BUILTIN_ARCHS.join(", ")
        )))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }

    /// Sets the attention kind of every block.
    pub fn with_attention(mut self, attention: AttentionKind) -> Self {
        for s in &mut self.stages {
            s.template.attention = attention;
        }
        self
    }

    pub fn with_bridge_sources(mut self, sources: Option<BridgeSourceConfig>) -> Self {
        for s in &mut self.stages {
            s.template.bridge_sources = sources.clone();
        }
        self
    }

    pub fn with_reduction(mut self, reduction: usize) -> Self {
        for s in &mut self.stages {
            s.template.reduction = reduction;
        }
        self
    }

    /// Per-block specs with channel chaining checked.
    pub fn expand(&self) -> Result<Vec<BlockSpec>> {
        if self.stem.out_ch == 0 || self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "degenerate architecture `{}`",
                self.name
            )));
        }
        let mut prev = self.stem.out_ch;
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let t = &stage.template;
            if t.in_ch != prev {
                return Err(Error::Config(format!(
                    "stage {si} expects {} input channels but the previous layer emits {prev}",
                    t.in_ch
                )));
            }
            for b in 0..stage.blocks {
                let spec = if b == 0 {
                    t.clone()
                } else {
                    BlockSpec {
                        in_ch: t.out_ch,
                        stride: 1,
                        downsample: false,
                        ..t.clone()
                    }
                };
                spec.validate()?;
                out.push(spec);
            }
            prev = t.out_ch;
        }
        Ok(out)
    }

    /// Channels feeding the classifier.
    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.template.out_ch)
            .unwrap_or(self.stem.out_ch)
    }
}
