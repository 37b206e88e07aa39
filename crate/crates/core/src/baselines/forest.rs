//! CART random forest with Gini splits and impurity-based importances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_inputs, BaselineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: 4,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.n_trees == 0 {
            return Err(BaselineError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.max_features == 0 || self.max_features > crate::features::FEATURE_COUNT {
            return Err(BaselineError::InvalidConfig("max_features must be in 1..=20".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(BaselineError::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        /// Fraction of positive training samples in the leaf.
        positive: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf_for(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { positive, .. } => return positive,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// The tree's class vote.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.leaf_for(x) >= 0.5
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    importances: Vec<f64>,
}

impl ForestModel {
    /// Fraction of trees voting relevant.
    pub fn score(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x)).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) >= 0.5
    }
}

/// Mean decrease in Gini impurity per feature, normalized to sum to one.
pub fn feature_importances(model: &ForestModel) -> Vec<f64> {
    model.importances.clone()
}

/// Feature indices sorted by decreasing importance; equal importances keep index order.
pub fn importance_ranking(importances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importances.len()).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    order
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    cfg: &'a ForestConfig,
    max_features: usize,
    nodes: Vec<Node>,
    decrease: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

impl Grower<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        self.nodes.push(Node::Leaf {
            positive: pos as f64 / idx.len() as f64,
            samples: idx.len(),
        });
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let n = idx.len();
        let pos_total = idx.iter().filter(|&&i| self.y[i]).count() as f64;
        let parent = n as f64 * gini(pos_total, n as f64);
        let min_leaf = self.cfg.min_samples_leaf;

        let mut features: Vec<usize> = (0..self.x[0].len()).collect();
        features.shuffle(rng);

        let mut best: Option<(usize, f64, f64)> = None;
        let mut visited = 0;
        let mut sorted = idx.to_vec();
        for &f in &features {
            if visited >= self.max_features {
                break;
            }
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let lo = self.x[sorted[0]][f];
            let hi = self.x[sorted[n - 1]][f];
            if lo == hi {
                continue;
            }
            visited += 1;
            let mut pos_left = 0.0;
            for k in 1..n {
                if self.y[sorted[k - 1]] {
                    pos_left += 1.0;
                }
                let (a, b) = (self.x[sorted[k - 1]][f], self.x[sorted[k]][f]);
                if a == b || k < min_leaf || n - k < min_leaf {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let dec = parent - nl * gini(pos_left, nl) - nr * gini(pos_total - pos_left, nr);
                if best.is_none_or(|(_, _, d)| dec > d) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some((f, threshold, dec));
                }
            }
        }
        let (feature, threshold, decrease) = best?;
        let (left, right) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        Some(BestSplit {
            feature,
            threshold,
            decrease,
            left,
            right,
        })
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let pure = pos == 0 || pos == idx.len();
        let depth_capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || idx.len() < 2 * self.cfg.min_samples_leaf {
            return self.leaf(&idx);
        }
        let Some(split) = self.best_split(&idx, rng) else {
            return self.leaf(&idx);
        };
        self.decrease[split.feature] += split.decrease;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            positive: 0.0,
            samples: 0,
        });
        let left = self.grow(split.left, depth + 1, rng);
        let right = self.grow(split.right, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        at
    }
}

fn grow_tree(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig, tree_index: u64) -> (DecisionTree, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(tree_index);
    let n = x.len();
    let idx: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let n_features = x[0].len();
    let mut g = Grower {
        x,
        y,
        cfg,
        max_features: cfg.max_features.min(n_features),
        nodes: Vec::new(),
        decrease: vec![0.0; n_features],
    };
    g.grow(idx, 0, &mut rng);
    (DecisionTree { nodes: g.nodes }, g.decrease)
}

/// Grows `n_trees` CART trees on bootstrap resamples. Each tree draws from its
/// own ChaCha stream, so the result does not depend on thread scheduling.
pub fn train_forest(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig) -> Result<ForestModel, BaselineError> {
    cfg.validate()?;
    let n_features = check_inputs(x, y)?;
    let grown: Vec<(DecisionTree, Vec<f64>)> = (0..cfg.n_trees as u64)
        .into_par_iter()
        .map(|i| grow_tree(x, y, cfg, i))
        .collect();

    let mut importances = vec![0.0; n_features];
    let mut contributing = 0usize;
    for (_, dec) in &grown {
        let total: f64 = dec.iter().sum();
        if total > 0.0 {
            contributing += 1;
            for (acc, d) in importances.iter_mut().zip(dec) {
                *acc += d / total;
            }
        }
    }
    let sum: f64 = importances.iter().sum();
    if contributing == 0 || sum <= 0.0 {
        importances = vec![1.0 / n_features as f64; n_features];
    } else {
        importances.iter_mut().for_each(|v| *v /= sum);
    }

    Ok(ForestModel {
        n_features,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        importances,
    })
}
