//! Channel attention: squeeze-excitation and bridge attention.
//!
//! Both split into an *integration* stage, which pools feature maps and
//! projects them to a `c/r` vector, and a shared *generation* stage
//! `σ(ReLU(z)·W₂ + b₂)`. Squeeze-excitation integrates only the attended
//! layer. Bridge attention integrates every bridged layer of the block
//! through its own projection and batch norm, then sums the branches in
//! ascending layer order.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Session};
use crate::params::ParamStore;
use crate::tensor::{Float, Var};

pub const DEFAULT_REDUCTION: usize = 16;

fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "channel count {channels} is not divisible by reduction {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Squeeze-excitation parameters: `w1` is `c×(c/r)` without bias, `w2` is `(c/r)×c` with bias.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub reduction: usize,
    pub w1: Linear,
    pub w2: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(Self {
            channels,
            reduction,
            w1: Linear::new(store, &format!("{name}.w1"), channels, hidden, false, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), hidden, channels, true, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w2.param_count()
    }
}

/// `gap(x)·W₁`: `B×C×H×W → B×(C/r)`.
pub fn se_integrate<T: Float>(s: &mut Session<'_, T>, x: Var, m: &SqueezeExcite) -> Result<Var> {
    let shape = s.tape.shape(x);
    if shape.len() != 4 || shape[1] != m.channels {
        return Err(Error::dim(
            "se_integrate",
            format!("input {shape:?} does not carry {} channels", m.channels),
        ));
    }
    let pooled = s.tape.global_avg_pool(x)?;
    m.w1.forward(s, pooled)
}

/// `σ(ReLU(z)·W₂ + b₂)`: `B×(C/r) → B×C`, every entry in `(0, 1)`.
pub fn se_generate<T: Float>(s: &mut Session<'_, T>, z: Var, m: &SqueezeExcite) -> Result<Var> {
    generate(s, z, &m.w2)
}

pub fn se_attention<T: Float>(s: &mut Session<'_, T>, x: Var, m: &SqueezeExcite) -> Result<Var> {
    let z = se_integrate(s, x, m)?;
    se_generate(s, z, m)
}

fn generate<T: Float>(s: &mut Session<'_, T>, z: Var, w2: &Linear) -> Result<Var> {
    let shape = s.tape.shape(z);
    if shape.len() != 2 || shape[1] != w2.in_features {
        return Err(Error::dim(
            "generate",
            format!(
                "integrated feature {shape:?} vs generation input {}",
                w2.in_features
            ),
        ));
    }
    let a = s.tape.relu(z);
    let y = w2.forward(s, a)?;
    Ok(s.tape.sigmoid(y))
}

/// Which earlier conv outputs of a block feed the attention layer.
///
/// Layers are numbered from 1; the attended layer `conv_n` is always
/// bridged implicitly and never listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct BridgeSourceConfig {
    sources: Vec<usize>,
}

impl BridgeSourceConfig {
    pub fn new(mut sources: Vec<usize>) -> Self {
        sources.sort_unstable();
        sources.dedup();
        Self { sources }
    }

    /// Every conv layer before the attended one.
    pub fn all_before(n: usize) -> Self {
        Self::new((1..n).collect())
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Checks the sources against a block with `n` conv layers.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self.sources.iter().find(|&&l| l == 0 || l >= n) {
            Some(bad) => Err(Error::Config(format!(
                "bridge source conv{bad} is not a layer before conv{n} of this block"
            ))),
            None => Ok(()),
        }
    }

    /// Bridged layer indices followed by the attended layer `n`.
    pub fn branch_layers(&self, n: usize) -> Vec<usize> {
        let mut v = self.sources.clone();
        v.push(n);
        v
    }
}

impl fmt::Display for BridgeSourceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sources.is_empty() {
            return f.write_str("none");
        }
        f.write_str("conv")?;
        let parts: Vec<String> = self.sources.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join("&"))
    }
}

/// Accepts `conv1`, `conv1,conv2`, `conv1&2`, `conv1&conv2` or `none`.
impl FromStr for BridgeSourceConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::new(Vec::new()));
        }
        let mut out = Vec::new();
        for part in s.split([',', '&']) {
            let part = part.trim();
            let digits = part.strip_prefix("conv").unwrap_or(part);
            let layer = digits
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad bridge source `{part}` in `{s}`")))?;
            out.push(layer);
        }
        Ok(Self::new(out))
    }
}

impl TryFrom<Vec<String>> for BridgeSourceConfig {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        v.join(",").parse()
    }
}

impl From<BridgeSourceConfig> for Vec<String> {
    fn from(c: BridgeSourceConfig) -> Self {
        c.sources.iter().map(|l| format!("conv{l}")).collect()
    }
}

/// One bridged input: `BN(gap(F_i)·W_i)`.
#[derive(Clone, Debug)]
pub struct BridgeBranch {
    /// 1-based conv layer index inside the block.
    pub layer: usize,
    pub squeeze: Linear,
    pub bn: BatchNorm,
}

/// Bridge attention over `q+1` branches attending a `cn`-channel output.
#[derive(Clone, Debug)]
pub struct BridgeAttention {
    pub channels: usize,
    pub reduction: usize,
    pub branches: Vec<BridgeBranch>,
    pub w2: Linear,
}

impl BridgeAttention {
    /// `inputs` lists `(layer, channels)` for every branch in ascending layer
    /// order; the last entry is the attended layer with `channels` outputs.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: &[(usize, usize)],
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        let Some(&(_, last)) = inputs.last() else {
            return Err(Error::Config(
                "bridge attention needs at least one branch".into(),
            ));
        };
        if last != channels {
            return Err(Error::Config(format!(
                "attended layer has {last} channels, attention expects {channels}"
            )));
        }
        if inputs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "branch layers must be strictly ascending".into(),
            ));
        }
        let mut branches = Vec::with_capacity(inputs.len());
        for (i, &(layer, c_in)) in inputs.iter().enumerate() {
            let prefix = format!("{name}.branch{i}");
            branches.push(BridgeBranch {
                layer,
                squeeze: Linear::new(
                    store,
                    &format!("{prefix}.squeeze"),
                    c_in,
                    hidden,
                    false,
                    rng,
                )?,
                bn: BatchNorm::new(store, &format!("{prefix}.bn"), hidden)?,
            });
        }
        Ok(Self {
            channels,
            reduction,
            branches,
            w2: Linear::new(store, &format!("{name}.w2"), hidden, channels, true, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn param_count(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.squeeze.param_count() + 2 * b.bn.channels)
            .sum::<usize>()
            + self.w2.param_count()
    }
}

/// Integration output together with the per-branch squeezed features `S_i`.
#[derive(Clone, Debug)]
pub struct Integrated {
    pub sum: Var,
    pub squeezed: Vec<Var>,
}

/// `Σ_i BN_i(gap(F_i)·W_i)`, summed in branch order.
///
/// `features` holds one map per branch; spatial sizes may differ.
pub fn ba_integrate<T: Float>(
    s: &mut Session<'_, T>,
    features: &[Var],
    m: &BridgeAttention,
) -> Result<Integrated> {
    if features.len() != m.branches.len() {
        return Err(Error::Config(format!(
            "bridge attention has {} branches, got {} feature maps",
            m.branches.len(),
            features.len()
        )));
    }
    let mut squeezed = Vec::with_capacity(features.len());
    for (&f, branch) in features.iter().zip(&m.branches) {
        let shape = s.tape.shape(f);
        if shape.len() != 4 || shape[1] != branch.squeeze.in_features {
            return Err(Error::Config(format!(
                "branch for conv{} expects {} channels, got feature map {shape:?}",
                branch.layer, branch.squeeze.in_features
            )));
        }
        let pooled = s.tape.global_avg_pool(f)?;
        let z = branch.squeeze.forward(s, pooled)?;
        squeezed.push(branch.bn.forward(s, z)?);
    }
    let mut sum = squeezed[0];
    for &sq in &squeezed[1..] {
        sum = s.tape.add(sum, sq)?;
    }
    Ok(Integrated { sum, squeezed })
}

/// `ω = G(I_BA(features))`: `B×cn` weights in `(0, 1)`.
pub fn ba_attention<T: Float>(
    s: &mut Session<'_, T>,
    features: &[Var],
    m: &BridgeAttention,
) -> Result<Var> {
    Ok(ba_attention_parts(s, features, m)?.0)
}

/// Like [`ba_attention`], also returning the squeezed branch features.
pub fn ba_attention_parts<T: Float>(
    s: &mut Session<'_, T>,
    features: &[Var],
    m: &BridgeAttention,
) -> Result<(Var, Vec<Var>)> {
    let integrated = ba_integrate(s, features, m)?;
    let w = generate(s, integrated.sum, &m.w2)?;
    Ok((w, integrated.squeezed))
}

/// `out[b,c,i,j] = x[b,c,i,j] · w[b,c]`.
pub fn apply_attention<T: Float>(s: &mut Session<'_, T>, x: Var, w: Var) -> Result<Var> {
    s.tape.apply_attention(x, w)
}
