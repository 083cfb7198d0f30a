//! Small sample-weighted random forest for binary meta-level classification.
//!
//! Trees are CART-style: axis-aligned splits on midpoint thresholds chosen
//! by weighted Gini impurity. Leaves store the weighted fraction of positive
//! labels; the forest prediction is the mean over trees. Training is
//! deterministic given the seed, including bootstrap resampling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;

pub const N_META_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: u32,
    /// 0 grows root-only trees: each tree degenerates to the weighted
    /// class fraction of its (re)sample.
    pub max_depth: u32,
    pub min_samples_split: u32,
    pub min_samples_leaf: u32,
    /// Number of features considered per split (1 or 2).
    pub max_features: u32,
    pub bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        probability: f64,
    },
}

impl TreeNode {
    fn predict(&self, x: &[f64; N_META_FEATURES]) -> f64 {
        match self {
            TreeNode::Leaf { probability } => *probability,
            TreeNode::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionForest {
    trees: Vec<TreeNode>,
}

impl DecisionForest {
    /// A forest that always predicts `probability`; used for pairs whose
    /// training observations were all ties.
    pub fn constant(probability: f64) -> Self {
        DecisionForest { trees: vec![TreeNode::Leaf { probability }] }
    }

    pub fn fit(
        features: &[[f64; N_META_FEATURES]],
        labels: &[bool],
        weights: &[f64],
        config: &ForestConfig,
        seed: u64,
    ) -> Self {
        assert_eq!(features.len(), labels.len());
        assert_eq!(features.len(), weights.len());
        if features.is_empty() {
            return Self::constant(0.5);
        }
        let trees = (0..config.n_trees.max(1))
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
                let indices: Vec<usize> = if config.bootstrap {
                    (0..features.len()).map(|_| rng.gen_range(0..features.len())).collect()
                } else {
                    (0..features.len()).collect()
                };
                grow(features, labels, weights, &indices, 0, config, &mut rng)
            })
            .collect();
        DecisionForest { trees }
    }

    /// Mean leaf value over trees: the predicted probability that the
    /// positive class wins.
    pub fn predict_proba(&self, x: &[f64; N_META_FEATURES]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }
}

fn weighted_fraction(labels: &[bool], weights: &[f64], indices: &[usize]) -> f64 {
    let mut pos = 0.0;
    let mut total = 0.0;
    for &i in indices {
        total += weights[i];
        if labels[i] {
            pos += weights[i];
        }
    }
    if total > 0.0 {
        pos / total
    } else {
        0.5
    }
}

fn gini(pos: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn grow(
    features: &[[f64; N_META_FEATURES]],
    labels: &[bool],
    weights: &[f64],
    indices: &[usize],
    depth: u32,
    config: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> TreeNode {
    let probability = weighted_fraction(labels, weights, indices);
    if depth >= config.max_depth
        || (indices.len() as u32) < config.min_samples_split
        || probability == 0.0
        || probability == 1.0
    {
        return TreeNode::Leaf { probability };
    }

    let candidate_features: Vec<usize> = if (config.max_features as usize) >= N_META_FEATURES {
        (0..N_META_FEATURES).collect()
    } else {
        vec![rng.gen_range(0..N_META_FEATURES)]
    };

    let mut total_pos = 0.0;
    let mut total_w = 0.0;
    for &i in indices {
        total_w += weights[i];
        if labels[i] {
            total_pos += weights[i];
        }
    }
    let parent_score = gini(total_pos, total_w) * total_w;

    let mut best: Option<Split> = None;
    for &f in &candidate_features {
        let mut order: Vec<usize> = indices.to_vec();
        order.sort_by(|&a, &b| features[a][f].partial_cmp(&features[b][f]).expect("finite"));
        let mut left_pos = 0.0;
        let mut left_w = 0.0;
        for pos in 0..order.len().saturating_sub(1) {
            let i = order[pos];
            left_w += weights[i];
            if labels[i] {
                left_pos += weights[i];
            }
            let v = features[i][f];
            let next = features[order[pos + 1]][f];
            if v == next {
                continue;
            }
            let left_count = (pos + 1) as u32;
            let right_count = (order.len() - pos - 1) as u32;
            if left_count < config.min_samples_leaf || right_count < config.min_samples_leaf {
                continue;
            }
            let threshold = v + (next - v) / 2.0;
            let score = gini(left_pos, left_w) * left_w
                + gini(total_pos - left_pos, total_w - left_w) * (total_w - left_w);
            if score + 1e-12 < best.as_ref().map_or(parent_score, |b| b.score) {
                best = Some(Split { feature: f, threshold, score });
            }
        }
    }

    match best {
        None => TreeNode::Leaf { probability },
        Some(split) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
                .iter()
                .partition(|&&i| features[i][split.feature] <= split.threshold);
            let left = grow(features, labels, weights, &left_idx, depth + 1, config, rng);
            let right = grow(features, labels, weights, &right_idx, depth + 1, config, rng);
            TreeNode::Split {
                feature: split.feature,
                threshold: split.threshold,
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    }
}
