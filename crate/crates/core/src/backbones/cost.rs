//! Shape-only parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions and FC layers
//! cost their MACs; batch norm, pooling, residual adds and channel rescaling
//! cost one operation per element touched. Activations are free.

use super::arch::{ArchSpec, AttentionKind, BlockKind, BlockSpec};
use crate::attention::BridgeSourceConfig;
use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.flops += o.flops;
    }
}

fn extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    conv_output_extent(n, k, stride, pad)
        .ok_or_else(|| Error::Config(format!("kernel {k} does not fit input extent {n}")))
}

/// Multiply-accumulates of one bias-free convolution producing an `oh×ow` map.
pub fn conv_flops(cin: usize, cout: usize, k: usize, oh: usize, ow: usize) -> u64 {
    (cin * k * k * cout * oh * ow) as u64
}

/// Conv (no bias) followed by BN, at input `h×w`. Returns cost and output extent.
fn conv_bn(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Result<(Cost, usize, usize)> {
    let (oh, ow) = (extent(h, k, stride, pad)?, extent(w, k, stride, pad)?);
    let plane = (oh * ow) as u64;
    Ok((
        Cost {
            params: (cin * k * k * cout + 2 * cout) as u64,
            flops: conv_flops(cin, cout, k, oh, ow) + cout as u64 * plane,
        },
        oh,
        ow,
    ))
}

/// Attention cost for one block given each bridged layer's `(channels, h, w)`
/// and the attended output `(cn, h, w)`.
pub fn attention_cost(
    kind: AttentionKind,
    cn: usize,
    reduction: usize,
    branches: &[(usize, usize, usize)],
) -> Cost {
    let hidden = (cn / reduction) as u64;
    let cn64 = cn as u64;
    let (_, oh, ow) = *branches.last().expect("attended layer present");
    let rescale = cn64 * (oh * ow) as u64;
    let generate = Cost {
        params: hidden * cn64 + cn64,
        flops: hidden * cn64,
    };
    let mut c = Cost::default();
    match kind {
        AttentionKind::None => return c,
        AttentionKind::Se => {
            c.params += cn64 * hidden;
            c.flops += rescale + cn64 * hidden;
        }
        AttentionKind::Ba => {
            for &(ci, h, w) in branches {
                let ci = ci as u64;
                c.params += ci * hidden + 2 * hidden;
                c.flops += ci * (h * w) as u64 + ci * hidden + hidden;
            }
        }
    }
    c += generate;
    // gap of the attended map counted here for SE; BA already pooled every branch.
    c.flops += rescale;
    c
}

/// Cost of one residual block at input `h×w`; returns the output extent too.
pub fn block_cost(spec: &BlockSpec, h: usize, w: usize) -> Result<(Cost, usize, usize)> {
    let mut total = Cost::default();
    // (channels, h, w) after each conv, for the bridge squeezes.
    let mut outs = Vec::new();
    let layers: Vec<(usize, usize, usize, usize, usize)> = match spec.kind {
        BlockKind::Basic => vec![
            (spec.in_ch, spec.mid_ch, 3, spec.stride, 1),
            (spec.mid_ch, spec.out_ch, 3, 1, 1),
        ],
        BlockKind::Bottleneck => vec![
            (spec.in_ch, spec.mid_ch, 1, 1, 0),
            (spec.mid_ch, spec.mid_ch, 3, spec.stride, 1),
            (spec.mid_ch, spec.out_ch, 1, 1, 0),
        ],
    };
    let (mut ch, mut cw) = (h, w);
    for &(cin, cout, k, s, p) in &layers {
        let (c, oh, ow) = conv_bn(cin, cout, k, s, p, ch, cw)?;
        total += c;
        outs.push((cout, oh, ow));
        ch = oh;
        cw = ow;
    }
    if spec.downsample {
        let (c, _, _) = conv_bn(spec.in_ch, spec.out_ch, 1, spec.stride, 0, h, w)?;
        total += c;
    }
    let n = spec.kind.conv_count();
    let branches: Vec<(usize, usize, usize)> = match spec.attention {
        AttentionKind::Ba => spec
            .sources()
            .branch_layers(n)
            .iter()
            .map(|&l| outs[l - 1])
            .collect(),
        _ => vec![outs[n - 1]],
    };
    total += attention_cost(spec.attention, spec.out_ch, spec.reduction, &branches);
    // residual add
    total.flops += (spec.out_ch * ch * cw) as u64;
    Ok((total, ch, cw))
}

/// Parameters and per-image FLOPs of `arch` at its declared input shape.
pub fn arch_cost(arch: &ArchSpec) -> Result<Cost> {
    let specs = arch.expand()?;
    let [cin, h, w] = arch.input_shape;
    let stem = &arch.stem;
    let (mut total, mut h, mut w) = conv_bn(
        cin,
        stem.out_ch,
        stem.kernel,
        stem.stride,
        stem.padding,
        h,
        w,
    )?;
    if let Some(p) = stem.max_pool {
        let (oh, ow) = (
            extent(h, p.kernel, p.stride, p.padding)?,
            extent(w, p.kernel, p.stride, p.padding)?,
        );
        total.flops += (p.kernel * p.kernel * stem.out_ch * oh * ow) as u64;
        h = oh;
        w = ow;
    }
    for spec in &specs {
        let (c, oh, ow) = block_cost(spec, h, w)?;
        total += c;
        h = oh;
        w = ow;
    }
    let feat = arch.feature_channels() as u64;
    let classes = arch.num_classes as u64;
    total.flops += feat * (h * w) as u64 + feat * classes;
    total.params += feat * classes + classes;
    Ok(total)
}

/// Cost of `arch` with all blocks switched to `attention` (and optional bridge sources).
pub fn count(
    arch: &ArchSpec,
    attention: AttentionKind,
    sources: Option<BridgeSourceConfig>,
) -> Result<Cost> {
    let mut a = arch.clone().with_attention(attention);
    if sources.is_some() {
        a = a.with_bridge_sources(sources);
    }
    arch_cost(&a)
}

/// `25557032 → "25.56M"`.
pub fn format_millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

/// `4_120_000_000 → "4.12G"`.
pub fn format_giga(n: u64) -> String {
    format!("{:.2}G", n as f64 / 1e9)
}
