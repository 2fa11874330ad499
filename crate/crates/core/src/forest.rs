//! CART decision trees and random forests over concatenated per-view
//! features, plus the per-view split-usage analysis.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("training needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{features} feature rows but {labels} labels")]
    LabelCountMismatch { features: usize, labels: usize },
    #[error("expected feature vectors of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {0} is not binary")]
    InvalidLabel(u8),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
}

/// One node of a tree arena. Leaves have no children and no split.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: Option<usize>,
    pub right: Option<usize>,
    /// Negative and positive training samples that reached the node.
    pub counts: [usize; 2],
    pub depth: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }

    pub fn positive_rate(&self) -> f64 {
        let n = self.counts[0] + self.counts[1];
        if n == 0 {
            0.0
        } else {
            self.counts[1] as f64 / n as f64
        }
    }
}

/// Nodes in depth-first preorder, which is also the training insertion
/// order. Node 0 is the root. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatTree", into = "FlatTree")]
pub struct DecisionTree {
    pub n_features: usize,
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeOptions {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per node; `None` examines all of them.
    pub feature_subsample: Option<usize>,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            max_depth: 12,
            min_leaf: 2,
            feature_subsample: None,
        }
    }
}

fn validate(features: &[Vec<f64>], labels: &[u8], opts: &TreeOptions) -> Result<usize, ForestError> {
    if features.len() != labels.len() {
        return Err(ForestError::LabelCountMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < 2 {
        return Err(ForestError::TooFewSamples(features.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(ForestError::InvalidLabel(l));
    }
    let dim = features[0].len();
    if dim == 0 {
        return Err(ForestError::InvalidOptions("feature vectors are empty".into()));
    }
    if let Some(row) = features.iter().find(|r| r.len() != dim) {
        return Err(ForestError::DimensionMismatch {
            expected: dim,
            got: row.len(),
        });
    }
    if opts.min_leaf == 0 {
        return Err(ForestError::InvalidOptions("min_leaf must be at least 1".into()));
    }
    if opts.feature_subsample == Some(0) {
        return Err(ForestError::InvalidOptions("feature_subsample must be at least 1".into()));
    }
    Ok(dim)
}

/// Sum of child impurities weighted by child size: `n·gini`.
fn weighted_gini(neg: usize, pos: usize) -> f64 {
    let n = (neg + pos) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (a, b) = (neg as f64, pos as f64);
    n - (a * a + b * b) / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Weighted child impurity `n_l·G_l + n_r·G_r`.
    pub score: f64,
}

const TIE_EPS: f64 = 1e-9;

/// Best Gini split over `candidates` (visited in the given order) for the
/// samples in `idx`. Ties keep the earlier feature, then the lower
/// threshold.
pub fn best_split(
    features: &[Vec<f64>],
    labels: &[u8],
    idx: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let total_pos = idx.iter().filter(|&&i| labels[i] == 1).count();
    let n = idx.len();
    let mut best: Option<Split> = None;
    let mut column: Vec<(f64, u8)> = Vec::with_capacity(n);
    for &f in candidates {
        column.clear();
        column.extend(idx.iter().map(|&i| (features[i][f], labels[i])));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_pos = 0;
        for k in 0..n - 1 {
            left_pos += column[k].1 as usize;
            let (v, next) = (column[k].0, column[k + 1].0);
            if v == next {
                continue;
            }
            let nl = k + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let score = weighted_gini(nl - left_pos, left_pos)
                + weighted_gini(n - nl - (total_pos - left_pos), total_pos - left_pos);
            if best.map_or(true, |b| score < b.score - TIE_EPS) {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (v + next),
                    score,
                });
            }
        }
    }
    best
}

struct Builder<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [u8],
    opts: TreeOptions,
    dim: usize,
    rng: Option<ChaCha8Rng>,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn candidates(&mut self) -> Vec<usize> {
        match (self.opts.feature_subsample, self.rng.as_mut()) {
            (Some(k), Some(rng)) if k < self.dim => {
                let mut c = sample(rng, self.dim, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..self.dim).collect(),
        }
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: None,
            right: None,
            counts: [idx.len() - pos, pos],
            depth,
        });
        let pure = pos == 0 || pos == idx.len();
        if pure || depth >= self.opts.max_depth || idx.len() < 2 * self.opts.min_leaf {
            return id;
        }
        let cand = self.candidates();
        let Some(split) = best_split(self.features, self.labels, &idx, &cand, self.opts.min_leaf) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.features[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        let node = &mut self.nodes[id];
        node.feature = Some(split.feature);
        node.threshold = split.threshold;
        node.left = Some(left);
        node.right = Some(right);
        id
    }
}

fn build_tree(
    features: &[Vec<f64>],
    labels: &[u8],
    idx: Vec<usize>,
    opts: TreeOptions,
    dim: usize,
    rng: Option<ChaCha8Rng>,
) -> DecisionTree {
    let mut b = Builder {
        features,
        labels,
        opts,
        dim,
        rng,
        nodes: Vec::new(),
    };
    b.grow(idx, 0);
    DecisionTree {
        n_features: dim,
        nodes: b.nodes,
    }
}

/// Greedy CART tree on all samples. A single-class input yields one pure
/// leaf.
pub fn train_tree(
    features: &[Vec<f64>],
    labels: &[u8],
    opts: &TreeOptions,
    seed: u64,
) -> Result<DecisionTree, ForestError> {
    let dim = validate(features, labels, opts)?;
    Ok(build_tree(
        features,
        labels,
        (0..features.len()).collect(),
        *opts,
        dim,
        Some(ChaCha8Rng::seed_from_u64(seed)),
    ))
}

impl DecisionTree {
    pub fn leaf_for(&self, x: &[f64]) -> &TreeNode {
        let mut n = &self.nodes[0];
        while let (Some(f), Some(l), Some(r)) = (n.feature, n.left, n.right) {
            n = &self.nodes[if x[f] <= n.threshold { l } else { r }];
        }
        n
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.leaf_for(x).positive_rate())
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    fn check(&self) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::MalformedTree(m));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        if self.nodes[0].depth != 0 {
            return bad("root depth must be 0".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match (n.feature, n.left, n.right) {
                (None, None, None) => {}
                (Some(f), Some(l), Some(r)) => {
                    if f >= self.n_features {
                        return bad(format!("node {i} splits on feature {f}"));
                    }
                    for c in [l, r] {
                        if c <= i || c >= self.nodes.len() {
                            return bad(format!("node {i} has child {c} out of order"));
                        }
                        if self.nodes[c].depth != n.depth + 1 {
                            return bad(format!("node {c} has inconsistent depth"));
                        }
                    }
                }
                _ => return bad(format!("node {i} is half split")),
            }
        }
        Ok(())
    }
}

/// Per-view counts of the first `top_k` internal nodes in breadth-first
/// order (depth, then insertion index). Feature `i` belongs to view
/// `i / q`; a feature used by several nodes counts once per node.
pub fn feature_view_distribution(tree: &DecisionTree, top_k: usize, q: usize, c: usize) -> Vec<usize> {
    let mut internal: Vec<(usize, usize, usize)> = tree
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.feature.map(|f| (n.depth, i, f)))
        .collect();
    internal.sort_unstable();
    let mut counts = vec![0; c];
    for &(_, _, f) in internal.iter().take(top_k) {
        if let Some(slot) = counts.get_mut(f / q.max(1)) {
            *slot += 1;
        }
    }
    counts
}

/// CSV table with one row per `top_k`: `top_k,view_0,…,view_{c-1}`.
pub fn view_distribution_csv(tree: &DecisionTree, top_ks: &[usize], q: usize, c: usize) -> String {
    distribution_table(std::slice::from_ref(tree), top_ks, q, c)
}

fn distribution_table(trees: &[DecisionTree], top_ks: &[usize], q: usize, c: usize) -> String {
    let mut out = String::from("top_k");
    for v in 0..c {
        out.push_str(&format!(",view_{v}"));
    }
    out.push('\n');
    for &k in top_ks {
        out.push_str(&k.to_string());
        let mut total = vec![0; c];
        for t in trees {
            for (a, n) in total.iter_mut().zip(feature_view_distribution(t, k, q, c)) {
                *a += n;
            }
        }
        for n in total {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub n_trees: usize,
    pub tree: TreeOptions,
    pub bootstrap: bool,
    /// Features per node; `None` uses `⌊√dim⌋` (at least 1).
    pub max_features: Option<usize>,
}

impl Default for ForestOptions {
    fn default() -> Self {
        Self {
            n_trees: 100,
            tree: TreeOptions::default(),
            bootstrap: true,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_trees: usize,
    pub seed: u64,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

/// Bagged trees with per-node feature subsampling. Trees are trained in
/// parallel; tree `t` uses its own seed drawn from `seed`, so the result
/// does not depend on the thread count.
pub fn train_forest(
    features: &[Vec<f64>],
    labels: &[u8],
    opts: &ForestOptions,
    seed: u64,
) -> Result<Forest, ForestError> {
    if opts.n_trees == 0 {
        return Err(ForestError::InvalidOptions("n_trees must be at least 1".into()));
    }
    let dim = validate(features, labels, &opts.tree)?;
    let k = opts
        .max_features
        .unwrap_or_else(|| ((dim as f64).sqrt().floor() as usize).max(1))
        .min(dim);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..opts.n_trees).map(|_| master.gen()).collect();
    let n = features.len();
    let tree_opts = TreeOptions {
        feature_subsample: Some(k),
        ..opts.tree
    };
    let trees = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let idx: Vec<usize> = if opts.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            build_tree(features, labels, idx, tree_opts, dim, Some(rng))
        })
        .collect();
    Ok(Forest {
        n_trees: opts.n_trees,
        seed,
        n_features: dim,
        trees,
    })
}

impl Forest {
    pub fn from_trees(trees: Vec<DecisionTree>, seed: u64) -> Result<Self, ForestError> {
        let Some(first) = trees.first() else {
            return Err(ForestError::InvalidOptions("a forest needs at least one tree".into()));
        };
        let n_features = first.n_features;
        if let Some(t) = trees.iter().find(|t| t.n_features != n_features) {
            return Err(ForestError::DimensionMismatch {
                expected: n_features,
                got: t.n_features,
            });
        }
        Ok(Self {
            n_trees: trees.len(),
            seed,
            n_features,
            trees,
        })
    }

    /// Mean over trees of the leaf's positive-class frequency.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ForestError> {
        let mut sum = 0.0;
        for t in &self.trees {
            sum += t.predict_proba(x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, ForestError> {
        xs.par_iter().map(|x| self.predict_proba(x)).collect()
    }

    /// [`feature_view_distribution`] summed over all trees.
    pub fn view_distribution(&self, top_k: usize, q: usize, c: usize) -> Vec<usize> {
        let mut total = vec![0; c];
        for t in &self.trees {
            for (a, n) in total.iter_mut().zip(feature_view_distribution(t, top_k, q, c)) {
                *a += n;
            }
        }
        total
    }

    /// [`view_distribution_csv`] with counts summed over all trees.
    pub fn view_distribution_csv(&self, top_ks: &[usize], q: usize, c: usize) -> String {
        distribution_table(&self.trees, top_ks, q, c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let f: Forest = serde_json::from_slice(&std::fs::read(path)?)?;
        if f.trees.len() != f.n_trees || f.n_trees == 0 {
            return Err(ForestError::MalformedTree(format!(
                "n_trees is {} but {} trees are stored",
                f.n_trees,
                f.trees.len()
            ))
            .into());
        }
        Ok(f)
    }
}

/// Checkpoint layout: parallel arrays with `-1` for missing children.
#[derive(Serialize, Deserialize)]
struct FlatTree {
    n_features: usize,
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<i64>,
    right: Vec<i64>,
    counts: Vec<[usize; 2]>,
    depth: Vec<usize>,
}

impl From<DecisionTree> for FlatTree {
    fn from(t: DecisionTree) -> Self {
        let idx = |o: Option<usize>| o.map_or(-1, |v| v as i64);
        FlatTree {
            n_features: t.n_features,
            feature: t.nodes.iter().map(|n| idx(n.feature)).collect(),
            threshold: t.nodes.iter().map(|n| n.threshold).collect(),
            left: t.nodes.iter().map(|n| idx(n.left)).collect(),
            right: t.nodes.iter().map(|n| idx(n.right)).collect(),
            counts: t.nodes.iter().map(|n| n.counts).collect(),
            depth: t.nodes.iter().map(|n| n.depth).collect(),
        }
    }
}

impl TryFrom<FlatTree> for DecisionTree {
    type Error = ForestError;

    fn try_from(f: FlatTree) -> Result<Self, ForestError> {
        let n = f.feature.len();
        if [f.threshold.len(), f.left.len(), f.right.len(), f.counts.len(), f.depth.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(ForestError::MalformedTree("array lengths differ".into()));
        }
        let opt = |v: i64| (v >= 0).then_some(v as usize);
        let tree = DecisionTree {
            n_features: f.n_features,
            nodes: (0..n)
                .map(|i| TreeNode {
                    feature: opt(f.feature[i]),
                    threshold: f.threshold[i],
                    left: opt(f.left[i]),
                    right: opt(f.right[i]),
                    counts: f.counts[i],
                    depth: f.depth[i],
                })
                .collect(),
        };
        tree.check()?;
        Ok(tree)
    }
}
