use rand::Rng;

use super::arch::{AttentionKind, BlockKind, BlockSpec};
use crate::attention::{self, BridgeAttention, SqueezeExcite};
use crate::error::Result;
use crate::nn::{AttentionRecord, BatchNorm, Conv2d, Session};
use crate::params::ParamStore;
use crate::tensor::{Float, Var};

#[derive(Clone, Debug)]
pub enum BlockAttention {
    None,
    Se(SqueezeExcite),
    Bridge(BridgeAttention),
}

/// Residual block: conv stack, optional channel attention on the last conv's
/// post-BN output, shortcut add, final ReLU.
#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub index: usize,
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm>,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
    pub attention: BlockAttention,
}

/// Builds one block, registering its parameters under `name`.
pub fn build_block<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    index: usize,
    spec: &BlockSpec,
    rng: &mut impl Rng,
) -> Result<Block> {
    spec.validate()?;
    // (in, out, kernel, stride, padding) per conv.
    let layout: Vec<(usize, usize, usize, usize, usize)> = match spec.kind {
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
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for (i, &(cin, cout, k, s, p)) in layout.iter().enumerate() {
        convs.push(Conv2d::new(
            store,
            &format!("{name}.conv{}", i + 1),
            cin,
            cout,
            k,
            s,
            p,
            rng,
        )?);
        norms.push(BatchNorm::new(store, &format!("{name}.bn{}", i + 1), cout)?);
    }
    let shortcut = if spec.downsample {
        Some((
            Conv2d::new(
                store,
                &format!("{name}.shortcut.conv"),
                spec.in_ch,
                spec.out_ch,
                1,
                spec.stride,
                0,
                rng,
            )?,
            BatchNorm::new(store, &format!("{name}.shortcut.bn"), spec.out_ch)?,
        ))
    } else {
        None
    };
    let att_name = format!("{name}.attn");
    let attention = match spec.attention {
        AttentionKind::None => BlockAttention::None,
        AttentionKind::Se => BlockAttention::Se(SqueezeExcite::new(
            store,
            &att_name,
            spec.out_ch,
            spec.reduction,
            rng,
        )?),
        AttentionKind::Ba => {
            let n = spec.kind.conv_count();
            let inputs: Vec<(usize, usize)> = spec
                .sources()
                .branch_layers(n)
                .into_iter()
                .map(|l| (l, spec.layer_channels(l)))
                .collect();
            BlockAttention::Bridge(BridgeAttention::new(
                store,
                &att_name,
                &inputs,
                spec.out_ch,
                spec.reduction,
                rng,
            )?)
        }
    };
    Ok(Block {
        spec: spec.clone(),
        index,
        convs,
        norms,
        shortcut,
        attention,
    })
}

impl Block {
    pub fn has_attention(&self) -> bool {
        !matches!(self.attention, BlockAttention::None)
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let n = self.convs.len();
        // Post-activation conv outputs; the last one is post-BN, pre-residual.
        let mut outputs = Vec::with_capacity(n);
        let mut h = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h)?;
            if i + 1 < n {
                h = s.tape.relu(h);
            }
            outputs.push(h);
        }
        let last = outputs[n - 1];
        let scaled = match &self.attention {
            BlockAttention::None => last,
            BlockAttention::Se(m) => {
                let z = attention::se_integrate(s, last, m)?;
                let w = attention::se_generate(s, z, m)?;
                self.record(s, &[z], w);
                attention::apply_attention(s, last, w)?
            }
            BlockAttention::Bridge(m) => {
                let features: Vec<Var> = m.branches.iter().map(|b| outputs[b.layer - 1]).collect();
                let (w, squeezed) = attention::ba_attention_parts(s, &features, m)?;
                self.record(s, &squeezed, w);
                attention::apply_attention(s, last, w)?
            }
        };
        let identity = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let sum = s.tape.add(scaled, identity)?;
        Ok(s.tape.relu(sum))
    }

    fn record<T: Float>(&self, s: &mut Session<'_, T>, squeezed: &[Var], w: Var) {
        if !s.is_capturing() {
            return;
        }
        let squeezed = squeezed.iter().map(|&v| s.value(v).clone()).collect();
        let weights = s.value(w).clone();
        let block = self.index;
        s.record(move || AttentionRecord {
            block,
            squeezed,
            weights,
        });
    }
}
