//! Multi-output regression forest with impurity-based feature importance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `ceil(sqrt(D))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 50,
            max_depth: 8,
            min_leaf: 5,
            bootstrap: true,
            max_features: None,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.min_leaf == 0 || self.max_depth == 0 {
            return Err(Error::Config(
                "forest needs trees, max_depth and min_leaf ≥ 1".into(),
            ));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("max_features must be ≥ 1".into()));
        }
        Ok(())
    }

    fn features_per_split(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Leaf {
        value: Vec<f64>,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        samples: usize,
        /// Drop in summed squared error across outputs.
        reduction: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug)]
pub struct RegressionForest {
    pub config: ForestConfig,
    pub n_features: usize,
    pub n_outputs: usize,
    pub trees: Vec<RegressionTree>,
    /// Targets were constant, so no tree could split.
    pub degenerate: bool,
}

impl RegressionForest {
    /// Mean of the tree predictions.
    pub fn predict(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_outputs];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(row)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.trees.len() as f64);
        out
    }
}

struct Grower<'a> {
    x: &'a [f64],
    y: &'a [f64],
    d: usize,
    m: usize,
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

struct Best {
    feature: usize,
    threshold: f64,
    split: usize,
    reduction: f64,
}

fn sse(y: &[f64], m: usize, rows: &[usize]) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; m];
    for &r in rows {
        for (s, &v) in mean.iter_mut().zip(&y[r * m..(r + 1) * m]) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|s| *s /= n);
    let mut err = 0.0;
    for &r in rows {
        for (mu, &v) in mean.iter().zip(&y[r * m..(r + 1) * m]) {
            err += (v - mu) * (v - mu);
        }
    }
    let first = rows.first().map_or(&[][..], |&r| &y[r * m..(r + 1) * m]);
    if rows.iter().all(|&r| &y[r * m..(r + 1) * m] == first) {
        err = 0.0;
    }
    (mean, err)
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let (mean, err) = sse(self.y, self.m, rows);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: mean,
            samples: rows.len(),
        });
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_leaf || err <= 0.0 {
            return id;
        }
        let Some(best) = self.best_split(rows, err, rng) else {
            return id;
        };
        let f = best.feature;
        rows.sort_by(|&a, &b| {
            self.x[a * self.d + f]
                .total_cmp(&self.x[b * self.d + f])
                .then(a.cmp(&b))
        });
        let (l, r) = rows.split_at_mut(best.split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: f,
            threshold: best.threshold,
            left,
            right,
            samples: l.len() + r.len(),
            reduction: best.reduction,
        };
        id
    }

    /// Visits features in random order until `mtry` non-constant ones have
    /// been scanned, continuing past that if none gave a valid split.
    fn best_split(&self, rows: &[usize], err: f64, rng: &mut ChaCha8Rng) -> Option<Best> {
        let (m, min_leaf) = (self.m, self.cfg.min_leaf);
        let mut features: Vec<usize> = (0..self.d).collect();
        features.shuffle(rng);
        let mut order = rows.to_vec();
        let mut best: Option<Best> = None;
        let mut scanned = 0;
        let tol = 1e-12 * err;
        for f in features {
            if scanned >= self.mtry && best.is_some() {
                break;
            }
            let xf = |r: usize| self.x[r * self.d + f];
            order.sort_by(|&a, &b| xf(a).total_cmp(&xf(b)).then(a.cmp(&b)));
            if xf(order[0]) == xf(order[order.len() - 1]) {
                continue;
            }
            scanned += 1;
            let n = order.len();
            let (mut lsum, mut lsq) = (vec![0.0; m], 0.0);
            let mut rsum = vec![0.0; m];
            let mut rsq = 0.0;
            for &r in &order {
                for (s, &v) in rsum.iter_mut().zip(&self.y[r * m..(r + 1) * m]) {
                    *s += v;
                    rsq += v * v;
                }
            }
            for i in 1..n {
                let r = order[i - 1];
                for ((ls, rs), &v) in lsum
                    .iter_mut()
                    .zip(rsum.iter_mut())
                    .zip(&self.y[r * m..(r + 1) * m])
                {
                    *ls += v;
                    *rs -= v;
                    lsq += v * v;
                    rsq -= v * v;
                }
                if i < min_leaf || n - i < min_leaf || xf(order[i - 1]) == xf(order[i]) {
                    continue;
                }
                let (nl, nr) = (i as f64, (n - i) as f64);
                let lerr = lsq - lsum.iter().map(|s| s * s).sum::<f64>() / nl;
                let rerr = rsq - rsum.iter().map(|s| s * s).sum::<f64>() / nr;
                let reduction = err - lerr.max(0.0) - rerr.max(0.0);
                if reduction > tol && best.as_ref().is_none_or(|b| reduction > b.reduction) {
                    best = Some(Best {
                        feature: f,
                        threshold: 0.5 * (xf(order[i - 1]) + xf(order[i])),
                        split: i,
                        reduction,
                    });
                }
            }
        }
        best
    }
}

/// Fits a forest mapping rows of `x` (`N×D`) to rows of `y` (`N×M`).
pub fn fit_forest(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    cfg: &ForestConfig,
    seed: u64,
) -> Result<RegressionForest> {
    cfg.validate()?;
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::dim(
            "fit_forest",
            format!("features {:?} and targets {:?}", x.shape(), y.shape()),
        ));
    }
    let (n, d, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    if n < 2 * cfg.min_leaf {
        return Err(Error::Sampling(format!(
            "{n} samples cannot fill two leaves of {} samples",
            cfg.min_leaf
        )));
    }
    if d == 0 || m == 0 {
        return Err(Error::dim(
            "fit_forest",
            "no features or no targets".to_string(),
        ));
    }
    let mut trees = Vec::with_capacity(cfg.trees);
    for t in 0..cfg.trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut rows: Vec<usize> = if cfg.bootstrap {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut g = Grower {
            x: x.data(),
            y: y.data(),
            d,
            m,
            cfg,
            mtry: cfg.features_per_split(d),
            nodes: Vec::new(),
        };
        g.grow(&mut rows, 0, &mut rng);
        trees.push(RegressionTree { nodes: g.nodes });
    }
    let (_, err) = sse(y.data(), m, &(0..n).collect::<Vec<_>>());
    Ok(RegressionForest {
        config: cfg.clone(),
        n_features: d,
        n_outputs: m,
        trees,
        degenerate: err <= 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImportance {
    /// Sums to 1 unless `degenerate`, in which case all zeros.
    pub scores: Vec<f64>,
    pub degenerate: bool,
}

/// Total impurity reduction per feature over every split of every tree, normalized.
pub fn gini_importance(forest: &RegressionForest) -> Result<FeatureImportance> {
    if forest.trees.is_empty() {
        return Err(Error::Config("forest has no trees".into()));
    }
    let mut scores = vec![0.0; forest.n_features];
    for t in &forest.trees {
        for node in &t.nodes {
            if let Node::Split {
                feature, reduction, ..
            } = node
            {
                scores[*feature] += reduction;
            }
        }
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Ok(FeatureImportance {
            scores: vec![0.0; forest.n_features],
            degenerate: true,
        });
    }
    scores.iter_mut().for_each(|s| *s /= total);
    Ok(FeatureImportance {
        scores,
        degenerate: forest.degenerate,
    })
}
