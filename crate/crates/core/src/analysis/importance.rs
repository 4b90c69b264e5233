use std::path::Path;

use super::forest::{fit_forest, gini_importance, ForestConfig};
use super::trace::TraceSet;
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::tensor::Tensor;

/// Share of attention-weight predictability carried by each bridged layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockImportance {
    /// 0-based block position.
    pub block: usize,
    /// Conv layer feeding each branch.
    pub layers: Vec<usize>,
    pub shares: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ImportanceReport {
    pub blocks: Vec<BlockImportance>,
}

impl ImportanceReport {
    /// `block,branch,share`; blocks are numbered from 1, branches by conv layer.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.blocks.iter().flat_map(|b| {
            b.layers.iter().zip(&b.shares).map(move |(l, s)| {
                vec![
                    (b.block + 1).to_string(),
                    format!("conv{l}"),
                    format!("{s:.9}"),
                ]
            })
        });
        write_csv(path, &["block", "branch", "share"], rows)
    }
}

/// Fits one forest per block from the concatenated squeezed branches to `ω`
/// and sums feature importances within each branch.
pub fn branch_importance(
    traces: &TraceSet,
    cfg: &ForestConfig,
    seed: u64,
) -> Result<ImportanceReport> {
    let mut report = ImportanceReport::default();
    for t in &traces.blocks {
        if t.squeezed.len() < 2 {
            return Err(Error::Config(format!(
                "block {} has {} attention branch; importance needs bridge attention with at least two",
                t.block + 1,
                t.squeezed.len()
            )));
        }
        let n = t.samples();
        if n < 2 * cfg.min_leaf {
            return Err(Error::Sampling(format!(
                "{n} traced samples, need at least {}",
                2 * cfg.min_leaf
            )));
        }
        let widths: Vec<usize> = t.squeezed.iter().map(|s| s.shape()[1]).collect();
        let d: usize = widths.iter().sum();
        let mut x = Vec::with_capacity(n * d);
        for r in 0..n {
            for (s, &w) in t.squeezed.iter().zip(&widths) {
                x.extend_from_slice(&s.data()[r * w..(r + 1) * w]);
            }
        }
        let x = Tensor::new([n, d], x)?;
        let forest = fit_forest(&x, &t.weights, cfg, seed.wrapping_add(t.block as u64))?;
        let imp = gini_importance(&forest)?;
        let mut shares = Vec::with_capacity(widths.len());
        let mut off = 0;
        for w in &widths {
            shares.push(imp.scores[off..off + w].iter().sum());
            off += w;
        }
        report.blocks.push(BlockImportance {
            block: t.block,
            layers: t.branch_layers.clone(),
            shares,
            degenerate: imp.degenerate,
        });
    }
    Ok(report)
}
