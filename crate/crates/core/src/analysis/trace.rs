use std::collections::BTreeMap;
use std::path::Path;

use log::warn;

use crate::backbones::{BlockAttention, Network};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::tensor::{Float, Tensor};
use crate::training::Dataset;

const CAPTURE_BATCH: usize = 200;

/// Squeezed features and attention weights of one block over a sample set.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// 0-based block position in the network.
    pub block: usize,
    /// Conv layer (1-based, inside the block) feeding each branch.
    pub branch_layers: Vec<usize>,
    /// One `N×(cn/r)` matrix per branch.
    pub squeezed: Vec<Tensor<f64>>,
    /// `N×cn` attention weights.
    pub weights: Tensor<f64>,
}

impl AttentionTrace {
    pub fn samples(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Traces of every attention block over the same samples.
#[derive(Clone, Debug)]
pub struct TraceSet {
    pub labels: Vec<usize>,
    pub blocks: Vec<AttentionTrace>,
}

/// Runs `data` (optionally restricted to `classes`) through `net` in eval
/// mode, recording `S_i` and `ω` at every attention layer.
pub fn capture_traces<T: Float>(
    net: &mut Network<T>,
    data: &Dataset,
    classes: Option<&[usize]>,
) -> Result<TraceSet> {
    if net.attention_blocks() == 0 {
        return Err(Error::Config(
            "network has no attention layers to trace".into(),
        ));
    }
    let data = match classes {
        Some(c) => data.filter_classes(c),
        None => data.clone(),
    };
    let layers: Vec<(usize, Vec<usize>)> = net
        .blocks()
        .iter()
        .filter_map(|b| match &b.attention {
            BlockAttention::None => None,
            BlockAttention::Se(_) => Some((b.index, vec![b.spec.kind.conv_count()])),
            BlockAttention::Bridge(m) => {
                Some((b.index, m.branches.iter().map(|br| br.layer).collect()))
            }
        })
        .collect();
    let mut squeezed: Vec<Vec<Vec<Tensor<f64>>>> = vec![Vec::new(); layers.len()];
    let mut weights: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); layers.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CAPTURE_BATCH) {
        let (x, _) = data.batch::<T>(chunk);
        let (_, records) = net.forward_captured(&x)?;
        for (slot, rec) in records.into_iter().enumerate() {
            squeezed[slot].push(rec.squeezed.iter().map(|t| t.cast()).collect());
            weights[slot].push(rec.weights.cast());
        }
    }
    let mut blocks = Vec::with_capacity(layers.len());
    for (slot, (block, branch_layers)) in layers.into_iter().enumerate() {
        let per_branch = (0..branch_layers.len())
            .map(|b| {
                let parts: Vec<Tensor<f64>> = squeezed[slot]
                    .iter()
                    .map(|batch| batch[b].clone())
                    .collect();
                concat_or_empty(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(AttentionTrace {
            block,
            branch_layers,
            squeezed: per_branch,
            weights: concat_or_empty(&weights[slot])?,
        });
    }
    Ok(TraceSet {
        labels: data.labels().to_vec(),
        blocks,
    })
}

fn concat_or_empty(parts: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    if parts.is_empty() {
        return Ok(Tensor::zeros([0, 0]));
    }
    Tensor::concat_rows(parts)
}

/// Channel-wise mean of `ω` for one class at one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean {
    pub class: usize,
    pub block: usize,
    pub mean: Vec<f64>,
}

/// Per-class, per-block channel means of the attention weights.
/// Classes without samples are skipped with a warning.
pub fn class_mean_weights(traces: &TraceSet, classes: &[usize]) -> Result<Vec<ClassMean>> {
    if traces.blocks.is_empty() || traces.labels.is_empty() {
        return Err(Error::Config("no attention traces to average".into()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, &l) in traces.labels.iter().enumerate() {
        if let Some(v) = members.get_mut(&l) {
            v.push(i);
        }
    }
    let mut out = Vec::new();
    for (&class, rows) in &members {
        if rows.is_empty() {
            warn!("class {class} has no samples; skipped");
            continue;
        }
        for t in &traces.blocks {
            let cn = t.weights.shape()[1];
            let w = t.weights.data();
            let mut mean = vec![0.0; cn];
            for &r in rows {
                for (m, &v) in mean.iter_mut().zip(&w[r * cn..(r + 1) * cn]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
            out.push(ClassMean {
                class,
                block: t.block,
                mean,
            });
        }
    }
    Ok(out)
}

/// `class,block,channel,mean_weight`; blocks are numbered from 1.
pub fn write_class_means_csv(path: &Path, means: &[ClassMean]) -> Result<()> {
    let rows = means.iter().flat_map(|m| {
        m.mean.iter().enumerate().map(move |(c, v)| {
            vec![
                m.class.to_string(),
                (m.block + 1).to_string(),
                c.to_string(),
                format!("{v:.9}"),
            ]
        })
    });
    write_csv(path, &["class", "block", "channel", "mean_weight"], rows)
}

/// Mean over classes of the per-channel variance of class-mean weights, per block.
pub fn class_spread(means: &[ClassMean]) -> BTreeMap<usize, f64> {
    let mut by_block: BTreeMap<usize, Vec<&ClassMean>> = BTreeMap::new();
    for m in means {
        by_block.entry(m.block).or_default().push(m);
    }
    by_block
        .into_iter()
        .map(|(block, ms)| {
            let per_class: Vec<f64> = ms
                .iter()
                .map(|m| {
                    let mu = m.mean.iter().sum::<f64>() / m.mean.len() as f64;
                    m.mean.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m.mean.len() as f64
                })
                .collect();
            (
                block,
                per_class.iter().sum::<f64>() / per_class.len() as f64,
            )
        })
        .collect()
}
