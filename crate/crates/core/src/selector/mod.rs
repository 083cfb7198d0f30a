//! Per-dataset policy selection: pairwise weighted random forests over two
//! meta-features, loss-difference weighting, soft/hard voting, a
//! dominance-based fallback for out-of-distribution queries, the single
//! best / random / oracle baselines, inner cross-validation and random
//! search over the selector's hyperparameter space.

pub mod forest;

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Allocation, Policy};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::rank_with_ties;
use forest::{DecisionForest, ForestConfig};

/// Dataset descriptors: exactly the number of observations and the number
/// of features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaFeatures {
    pub n_samples: u64,
    pub n_features: u64,
}

impl MetaFeatures {
    pub fn new(n_samples: u64, n_features: u64) -> Result<Self> {
        if n_samples < 1 || n_features < 1 {
            return Err(Error::validation("meta-features must be >= 1"));
        }
        Ok(MetaFeatures { n_samples, n_features })
    }

    /// True if `self` has higher-or-equal values in every component.
    pub fn dominates(&self, other: &MetaFeatures) -> bool {
        self.n_samples >= other.n_samples && self.n_features >= other.n_features
    }
}

/// How per-dataset loss values are scaled before taking the pairwise
/// absolute difference that weights a meta-observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaling {
    /// Raw observations.
    Raw,
    /// Rescale to [min, max] of the two policies on the dataset.
    MinmaxPair,
    /// Rescale to [min, 1] of the two policies on the dataset.
    Min1Pair,
    /// Rescale to [min, max] across all policies on the dataset.
    MinmaxAll,
    /// Rescale to [min, 1] across all policies on the dataset.
    Min1All,
    /// Difference in ranks among all policies on the dataset.
    RankDiff,
}

impl WeightScaling {
    pub const ALL: [WeightScaling; 6] = [
        WeightScaling::Raw,
        WeightScaling::MinmaxPair,
        WeightScaling::Min1Pair,
        WeightScaling::MinmaxAll,
        WeightScaling::Min1All,
        WeightScaling::RankDiff,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    Soft,
    Hard,
}

/// Hyperparameters of the model-based selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorHyperparams {
    pub min_samples_split: u32,
    pub min_samples_leaf: u32,
    /// 0 grows constant trees, which makes the selector equivalent to the
    /// single best policy.
    pub max_depth: u32,
    pub max_features: u32,
    pub bootstrap: bool,
    pub voting: Voting,
    pub weight_scaling: WeightScaling,
    pub n_trees: u32,
    /// Optional ln(1 + x) transform of both meta-features.
    pub log_scale_features: bool,
}

impl Default for SelectorHyperparams {
    fn default() -> Self {
        SelectorHyperparams {
            min_samples_split: 3,
            min_samples_leaf: 2,
            max_depth: 10,
            max_features: 2,
            bootstrap: true,
            voting: Voting::Soft,
            weight_scaling: WeightScaling::Raw,
            n_trees: 100,
            log_scale_features: false,
        }
    }
}

impl SelectorHyperparams {
    fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            max_features: self.max_features,
            bootstrap: self.bootstrap,
        }
    }

    fn features(&self, q: &MetaFeatures) -> [f64; 2] {
        let raw = [q.n_samples as f64, q.n_features as f64];
        if self.log_scale_features {
            [raw[0].ln_1p(), raw[1].ln_1p()]
        } else {
            raw
        }
    }
}

/// Complete policies x datasets grid of (normalized) losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossTable {
    policy_ids: Vec<String>,
    dataset_ids: Vec<String>,
    /// Row-major: `losses[policy][dataset]`.
    losses: Vec<Vec<f64>>,
}

impl PolicyLossTable {
    pub fn new(
        policy_ids: Vec<String>,
        dataset_ids: Vec<String>,
        losses: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if losses.len() != policy_ids.len()
            || losses.iter().any(|row| row.len() != dataset_ids.len())
        {
            return Err(Error::validation("loss grid shape does not match ids"));
        }
        let table = PolicyLossTable { policy_ids, dataset_ids, losses };
        table.check_unique()?;
        Ok(table)
    }

    fn check_unique(&self) -> Result<()> {
        for ids in [&self.policy_ids, &self.dataset_ids] {
            let mut seen = std::collections::HashSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::validation(format!("duplicate id \"{id}\" in table")));
                }
            }
        }
        Ok(())
    }

    /// Parses CSV rows `policy,dataset,loss`. Policy and dataset order
    /// follow first appearance; the grid must be complete.
    pub fn from_csv(source: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            policy: String,
            dataset: String,
            loss: f64,
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut policy_ids: Vec<String> = Vec::new();
        let mut dataset_ids: Vec<String> = Vec::new();
        let mut cells: HashMap<(String, String), f64> = HashMap::new();
        for (record, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::parse(format!("csv record {record}: {e}")))?;
            if !policy_ids.contains(&row.policy) {
                policy_ids.push(row.policy.clone());
            }
            if !dataset_ids.contains(&row.dataset) {
                dataset_ids.push(row.dataset.clone());
            }
            if cells.insert((row.policy.clone(), row.dataset.clone()), row.loss).is_some() {
                return Err(Error::validation(format!(
                    "csv record {record}: duplicate cell ({}, {})",
                    row.policy, row.dataset
                )));
            }
        }
        if cells.is_empty() {
            return Err(Error::parse("policy-loss csv has no data rows"));
        }
        let mut losses = Vec::with_capacity(policy_ids.len());
        for p in &policy_ids {
            let mut row = Vec::with_capacity(dataset_ids.len());
            for d in &dataset_ids {
                let v = cells.get(&(p.clone(), d.clone())).ok_or_else(|| {
                    Error::validation(format!("missing loss for policy {p} on dataset {d}"))
                })?;
                row.push(*v);
            }
            losses.push(row);
        }
        PolicyLossTable::new(policy_ids, dataset_ids, losses)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("policy,dataset,loss\n");
        for (pi, p) in self.policy_ids.iter().enumerate() {
            for (di, d) in self.dataset_ids.iter().enumerate() {
                out.push_str(&format!("{p},{d},{}\n", self.losses[pi][di]));
            }
        }
        out
    }

    pub fn policies(&self) -> &[String] {
        &self.policy_ids
    }

    pub fn datasets(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn loss(&self, policy: &str, dataset: &str) -> Result<f64> {
        let pi = self
            .policy_ids
            .iter()
            .position(|p| p == policy)
            .ok_or_else(|| Error::UnknownId { kind: "policy", id: policy.to_string() })?;
        let di = self
            .dataset_ids
            .iter()
            .position(|d| d == dataset)
            .ok_or_else(|| Error::UnknownId { kind: "dataset", id: dataset.to_string() })?;
        Ok(self.losses[pi][di])
    }

    /// Losses of all policies on one dataset, in policy order.
    pub fn dataset_column(&self, dataset: &str) -> Result<Vec<f64>> {
        let di = self
            .dataset_ids
            .iter()
            .position(|d| d == dataset)
            .ok_or_else(|| Error::UnknownId { kind: "dataset", id: dataset.to_string() })?;
        Ok(self.losses.iter().map(|row| row[di]).collect())
    }

    pub fn mean_loss(&self, policy: &str) -> Result<f64> {
        let pi = self
            .policy_ids
            .iter()
            .position(|p| p == policy)
            .ok_or_else(|| Error::UnknownId { kind: "policy", id: policy.to_string() })?;
        Ok(self.losses[pi].iter().sum::<f64>() / self.dataset_ids.len() as f64)
    }

    /// Restriction to a subset of policies, keeping table order.
    pub fn with_policies(&self, keep: &[String]) -> Result<PolicyLossTable> {
        let mut policy_ids = Vec::new();
        let mut losses = Vec::new();
        for (pi, p) in self.policy_ids.iter().enumerate() {
            if keep.contains(p) {
                policy_ids.push(p.clone());
                losses.push(self.losses[pi].clone());
            }
        }
        if policy_ids.is_empty() {
            return Err(Error::validation("policy subset is empty"));
        }
        PolicyLossTable::new(policy_ids, self.dataset_ids.clone(), losses)
    }

    /// Restriction to a subset of datasets, keeping table order.
    pub fn with_datasets(&self, keep: &[String]) -> Result<PolicyLossTable> {
        let indices: Vec<usize> = self
            .dataset_ids
            .iter()
            .enumerate()
            .filter(|(_, d)| keep.contains(d))
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::validation("dataset subset is empty"));
        }
        let dataset_ids = indices.iter().map(|&i| self.dataset_ids[i].clone()).collect();
        let losses = self
            .losses
            .iter()
            .map(|row| indices.iter().map(|&i| row[i]).collect())
            .collect();
        PolicyLossTable::new(self.policy_ids.clone(), dataset_ids, losses)
    }
}

/// Per-dataset weights for one policy pair: the absolute difference of the
/// scaled losses. A zero scaling range yields weight 0.
pub fn compute_pair_weights(
    table: &PolicyLossTable,
    policy_a: &str,
    policy_b: &str,
    scaling: WeightScaling,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for dataset in table.datasets() {
        let a = table.loss(policy_a, dataset)?;
        let b = table.loss(policy_b, dataset)?;
        let all = table.dataset_column(dataset)?;
        let weight = match scaling {
            WeightScaling::Raw => (a - b).abs(),
            WeightScaling::MinmaxPair => scaled_diff(a, b, a.min(b), a.max(b)),
            WeightScaling::Min1Pair => scaled_diff(a, b, a.min(b), 1.0),
            WeightScaling::MinmaxAll => {
                let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                scaled_diff(a, b, lo, hi)
            }
            WeightScaling::Min1All => {
                let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
                scaled_diff(a, b, lo, 1.0)
            }
            WeightScaling::RankDiff => {
                let ranks = rank_with_ties(&all);
                let pa = table.policies().iter().position(|p| p == policy_a).expect("checked");
                let pb = table.policies().iter().position(|p| p == policy_b).expect("checked");
                (ranks[pa] - ranks[pb]).abs()
            }
        };
        out.insert(dataset.clone(), weight);
    }
    Ok(out)
}

fn scaled_diff(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    ((a - lo) / (hi - lo) - (b - lo) / (hi - lo)).abs()
}

const SELECTOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairwiseModel {
    policy_a: String,
    policy_b: String,
    forest: DecisionForest,
}

/// Trained per-dataset policy selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySelector {
    version: u32,
    policy_ids: Vec<String>,
    fallback_policy_id: String,
    hyperparams: SelectorHyperparams,
    /// Pareto-maximal training meta-feature vectors; a query is
    /// in-distribution iff one of these dominates it componentwise.
    dominance_frontier: Vec<MetaFeatures>,
    training_dataset_ids: Vec<String>,
    pairwise: Vec<PairwiseModel>,
}

/// Result of a policy query: the chosen policy, the per-policy vote tally
/// (empty when the fallback fired) and whether the fallback fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub policy_id: String,
    pub tallies: BTreeMap<String, f64>,
    pub fallback: bool,
}

/// True (use the fallback) iff no training meta-feature vector dominates
/// the query in every component.
pub fn fallback_check(query: &MetaFeatures, training: &[MetaFeatures]) -> bool {
    !training.iter().any(|t| t.dominates(query))
}

fn pareto_frontier(points: &[MetaFeatures]) -> Vec<MetaFeatures> {
    let mut frontier: Vec<MetaFeatures> = Vec::new();
    for p in points {
        if frontier.iter().any(|f| f.dominates(p)) {
            continue;
        }
        frontier.retain(|f| !p.dominates(f));
        frontier.push(*p);
    }
    frontier.sort_by_key(|f| (f.n_samples, f.n_features));
    frontier
}

/// Picks the fallback policy for a policy list: holdout with successive
/// halving when available, otherwise the first SH policy, otherwise the
/// first policy.
fn default_fallback(policy_ids: &[String]) -> String {
    if let Some(p) = policy_ids.iter().find(|p| p.as_str() == "holdout-sh") {
        return p.clone();
    }
    for p in policy_ids {
        if let Ok(parsed) = Policy::parse_id(p) {
            if matches!(parsed.allocation, Allocation::Sh { .. }) {
                return p.clone();
            }
        }
    }
    policy_ids[0].clone()
}

/// Fits one pairwise forest per unordered policy pair. Labels say whether
/// the first policy of the pair achieves the lower loss; tied datasets are
/// dropped; sample weights come from [`compute_pair_weights`]. A pair whose
/// observations are all ties becomes a constant model predicting 0.5.
pub fn train_pairwise_selector(
    meta_features: &BTreeMap<String, MetaFeatures>,
    table: &PolicyLossTable,
    hp: &SelectorHyperparams,
    seed: u64,
) -> Result<PolicySelector> {
    if table.policies().len() < 2 {
        return Err(Error::validation("selector training needs >= 2 policies"));
    }
    if table.datasets().len() < 3 {
        return Err(Error::validation("selector training needs >= 3 datasets"));
    }
    for d in table.datasets() {
        if !meta_features.contains_key(d) {
            return Err(Error::UnknownId { kind: "dataset meta-features", id: d.clone() });
        }
    }

    let policy_ids = table.policies().to_vec();
    let mut pairs = Vec::new();
    for i in 0..policy_ids.len() {
        for j in i + 1..policy_ids.len() {
            pairs.push((policy_ids[i].clone(), policy_ids[j].clone()));
        }
    }

    let pairwise: Vec<PairwiseModel> = pairs
        .par_iter()
        .enumerate()
        .map(|(pair_idx, (a, b))| -> Result<PairwiseModel> {
            let weights_by_dataset = compute_pair_weights(table, a, b, hp.weight_scaling)?;
            let mut features = Vec::new();
            let mut labels = Vec::new();
            let mut weights = Vec::new();
            for dataset in table.datasets() {
                let la = table.loss(a, dataset)?;
                let lb = table.loss(b, dataset)?;
                if la == lb {
                    continue;
                }
                features.push(hp.features(&meta_features[dataset]));
                labels.push(la < lb);
                weights.push(weights_by_dataset[dataset]);
            }
            let forest = if features.is_empty() {
                DecisionForest::constant(0.5)
            } else {
                DecisionForest::fit(
                    &features,
                    &labels,
                    &weights,
                    &hp.forest_config(),
                    derive_seed(seed, pair_idx as u64),
                )
            };
            Ok(PairwiseModel { policy_a: a.clone(), policy_b: b.clone(), forest })
        })
        .collect::<Result<Vec<_>>>()?;

    let training_points: Vec<MetaFeatures> =
        table.datasets().iter().map(|d| meta_features[d]).collect();

    Ok(PolicySelector {
        version: SELECTOR_FORMAT_VERSION,
        fallback_policy_id: default_fallback(&policy_ids),
        policy_ids,
        hyperparams: *hp,
        dominance_frontier: pareto_frontier(&training_points),
        training_dataset_ids: table.datasets().to_vec(),
        pairwise,
    })
}

impl PolicySelector {
    pub fn policies(&self) -> &[String] {
        &self.policy_ids
    }

    pub fn fallback_policy(&self) -> &str {
        &self.fallback_policy_id
    }

    pub fn hyperparams(&self) -> &SelectorHyperparams {
        &self.hyperparams
    }

    pub fn training_datasets(&self) -> &[String] {
        &self.training_dataset_ids
    }

    pub fn is_out_of_distribution(&self, query: &MetaFeatures) -> bool {
        fallback_check(query, &self.dominance_frontier)
    }

    /// Queries all pairwise models and votes. Out-of-distribution queries
    /// route to the fallback policy without voting.
    pub fn select_policy(&self, query: &MetaFeatures) -> SelectionOutcome {
        if self.is_out_of_distribution(query) {
            return SelectionOutcome {
                policy_id: self.fallback_policy_id.clone(),
                tallies: BTreeMap::new(),
                fallback: true,
            };
        }
        let x = self.hyperparams.features(query);
        let mut tallies: BTreeMap<String, f64> =
            self.policy_ids.iter().map(|p| (p.clone(), 0.0)).collect();
        for pair in &self.pairwise {
            let p_a = pair.forest.predict_proba(&x);
            match self.hyperparams.voting {
                Voting::Soft => {
                    *tallies.get_mut(&pair.policy_a).expect("policy in list") += p_a;
                    *tallies.get_mut(&pair.policy_b).expect("policy in list") += 1.0 - p_a;
                }
                Voting::Hard => {
                    if p_a > 0.5 {
                        *tallies.get_mut(&pair.policy_a).expect("policy in list") += 1.0;
                    } else if p_a < 0.5 {
                        *tallies.get_mut(&pair.policy_b).expect("policy in list") += 1.0;
                    } else {
                        *tallies.get_mut(&pair.policy_a).expect("policy in list") += 0.5;
                        *tallies.get_mut(&pair.policy_b).expect("policy in list") += 0.5;
                    }
                }
            }
        }
        let mut best = &self.policy_ids[0];
        for p in &self.policy_ids {
            if tallies[p] > tallies[best] {
                best = p;
            }
        }
        SelectionOutcome { policy_id: best.clone(), tallies, fallback: false }
    }

    pub fn to_json_string(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("selector serialization");
        out.push('\n');
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let selector: PolicySelector = serde_json::from_str(text)?;
        if selector.version != SELECTOR_FORMAT_VERSION {
            return Err(Error::validation(format!(
                "unsupported selector format version {}",
                selector.version
            )));
        }
        Ok(selector)
    }
}

/// The policy with the lowest mean loss across datasets; ties keep table
/// order.
pub fn single_best(table: &PolicyLossTable) -> Result<String> {
    let mut best: Option<(String, f64)> = None;
    for p in table.policies() {
        let mean = table.mean_loss(p)?;
        if best.as_ref().map_or(true, |(_, m)| mean < *m) {
            best = Some((p.clone(), mean));
        }
    }
    best.map(|(p, _)| p).ok_or_else(|| Error::validation("empty policy table"))
}

/// Per-dataset argmin policy; the lowest achievable assignment.
pub fn oracle_policy(table: &PolicyLossTable) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for d in table.datasets() {
        let column = table.dataset_column(d)?;
        let mut best = 0;
        for (i, v) in column.iter().enumerate().skip(1) {
            if *v < column[best] {
                best = i;
            }
        }
        out.insert(d.clone(), table.policies()[best].clone());
    }
    Ok(out)
}

/// Uniformly random per-dataset policy assignment, deterministic per seed.
pub fn random_policy(
    policy_ids: &[String],
    dataset_ids: &[String],
    seed: u64,
) -> BTreeMap<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset_ids
        .iter()
        .map(|d| (d.clone(), policy_ids[rng.gen_range(0..policy_ids.len())].clone()))
        .collect()
}

/// Outcome of the selector-level inner cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerCvOutcome {
    pub fold_losses: Vec<f64>,
    pub mean_loss: f64,
}

/// Inner K-fold cross-validation of the selector: train the pairwise models
/// on all but one fold of the meta-datasets and score the chosen policies'
/// losses on the held-out fold. The fold partition is seeded and balanced
/// by count.
pub fn inner_cv_train_eval(
    meta_features: &BTreeMap<String, MetaFeatures>,
    table: &PolicyLossTable,
    folds: u32,
    hp: &SelectorHyperparams,
    seed: u64,
) -> Result<InnerCvOutcome> {
    if folds < 2 {
        return Err(Error::validation("inner cv needs >= 2 folds"));
    }
    let datasets = table.datasets().to_vec();
    if datasets.len() < folds as usize {
        return Err(Error::validation(format!(
            "inner cv needs >= {folds} datasets, got {}",
            datasets.len()
        )));
    }
    let mut shuffled = datasets.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let assignments: Vec<Vec<String>> = (0..folds as usize)
        .map(|f| {
            shuffled
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds as usize == f)
                .map(|(_, d)| d.clone())
                .collect()
        })
        .collect();

    let mut fold_losses = Vec::with_capacity(folds as usize);
    for (f, held_out) in assignments.iter().enumerate() {
        let train_ids: Vec<String> =
            datasets.iter().filter(|d| !held_out.contains(d)).cloned().collect();
        let train_table = table.with_datasets(&train_ids)?;
        let selector =
            train_pairwise_selector(meta_features, &train_table, hp, derive_seed(seed, 1 + f as u64))?;
        let mut sum = 0.0;
        for d in held_out {
            let outcome = selector.select_policy(&meta_features[d]);
            sum += table.loss(&outcome.policy_id, d)?;
        }
        fold_losses.push(sum / held_out.len() as f64);
    }
    let mean_loss = fold_losses.iter().sum::<f64>() / fold_losses.len() as f64;
    Ok(InnerCvOutcome { fold_losses, mean_loss })
}

/// Search space for [`tune_selector`]; defaults to the selector's full
/// hyperparameter space. Integer ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorSearchSpace {
    pub min_samples_split: (u32, u32),
    pub min_samples_leaf: (u32, u32),
    pub max_depth: (u32, u32),
    pub max_features: (u32, u32),
    pub bootstrap: Vec<bool>,
    pub voting: Vec<Voting>,
    pub weight_scaling: Vec<WeightScaling>,
    pub n_trees: u32,
}

impl Default for SelectorSearchSpace {
    fn default() -> Self {
        SelectorSearchSpace {
            min_samples_split: (3, 20),
            min_samples_leaf: (2, 20),
            max_depth: (0, 20),
            max_features: (1, 2),
            bootstrap: vec![true, false],
            voting: vec![Voting::Soft, Voting::Hard],
            weight_scaling: WeightScaling::ALL.to_vec(),
            n_trees: 100,
        }
    }
}

impl SelectorSearchSpace {
    fn sample(&self, rng: &mut ChaCha8Rng) -> SelectorHyperparams {
        let pick_range =
            |rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)| rng.gen_range(lo..=hi.max(lo));
        SelectorHyperparams {
            min_samples_split: pick_range(rng, self.min_samples_split),
            min_samples_leaf: pick_range(rng, self.min_samples_leaf),
            max_depth: pick_range(rng, self.max_depth),
            max_features: pick_range(rng, self.max_features),
            bootstrap: self.bootstrap[rng.gen_range(0..self.bootstrap.len())],
            voting: self.voting[rng.gen_range(0..self.voting.len())],
            weight_scaling: self.weight_scaling[rng.gen_range(0..self.weight_scaling.len())],
            n_trees: self.n_trees,
            log_scale_features: false,
        }
    }
}

/// Seeded random search over the selector space, minimizing the inner
/// cross-validation loss. Returns the incumbent and its score.
pub fn tune_selector(
    meta_features: &BTreeMap<String, MetaFeatures>,
    table: &PolicyLossTable,
    space: &SelectorSearchSpace,
    budget: u32,
    folds: u32,
    seed: u64,
) -> Result<(SelectorHyperparams, f64)> {
    if budget < 1 {
        return Err(Error::validation("tuning budget must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<SelectorHyperparams> =
        (0..budget).map(|_| space.sample(&mut rng)).collect();
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, hp)| {
            Ok(inner_cv_train_eval(meta_features, table, folds, hp, derive_seed(seed, i as u64))?
                .mean_loss)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, score) in scores.into_iter().enumerate() {
        let score = score?;
        if best.map_or(true, |(_, s)| score < s) {
            best = Some((i, score));
        }
    }
    let (idx, score) = best.expect("budget >= 1");
    Ok((candidates[idx], score))
}

/// Loads a meta-features CSV with header `dataset,n_samples,n_features`.
pub fn load_meta_csv(source: impl Read) -> Result<BTreeMap<String, MetaFeatures>> {
    #[derive(Deserialize)]
    struct Row {
        dataset: String,
        n_samples: u64,
        n_features: u64,
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let mut out = BTreeMap::new();
    for (record, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("csv record {record}: {e}")))?;
        let mf = MetaFeatures::new(row.n_samples, row.n_features)?;
        if out.insert(row.dataset.clone(), mf).is_some() {
            return Err(Error::validation(format!(
                "csv record {record}: duplicate dataset \"{}\"",
                row.dataset
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(policies: &[&str], datasets: &[&str], losses: &[&[f64]]) -> PolicyLossTable {
        PolicyLossTable::new(
            policies.iter().map(|s| s.to_string()).collect(),
            datasets.iter().map(|s| s.to_string()).collect(),
            losses.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    fn meta(entries: &[(&str, u64, u64)]) -> BTreeMap<String, MetaFeatures> {
        entries
            .iter()
            .map(|(d, s, f)| (d.to_string(), MetaFeatures::new(*s, *f).unwrap()))
            .collect()
    }

    #[test]
    fn pair_weights_raw_and_ties() {
        let t = table(&["a", "b"], &["d1", "d2"], &[&[0.2, 0.5], &[0.4, 0.5]]);
        let w = compute_pair_weights(&t, "a", "b", WeightScaling::Raw).unwrap();
        assert!((w["d1"] - 0.2).abs() < 1e-12);
        assert_eq!(w["d2"], 0.0);

        let t = table(&["a", "b"], &["d1", "d2", "d3"], &[&[0.3; 3], &[0.3; 3]]);
        let w = compute_pair_weights(&t, "a", "b", WeightScaling::MinmaxAll).unwrap();
        assert!(w.values().all(|v| *v == 0.0));
    }

    #[test]
    fn pair_weights_rank_diff_matches_hand_ranking() {
        let t = table(
            &["a", "b", "c", "e"],
            &["d1"],
            &[&[0.1], &[0.4], &[0.2], &[0.4]],
        );
        // Losses (.1, .4, .2, .4) -> ranks (1, 3.5, 2, 3.5).
        let w = compute_pair_weights(&t, "a", "b", WeightScaling::RankDiff).unwrap();
        assert!((w["d1"] - 2.5).abs() < 1e-12);
        let w = compute_pair_weights(&t, "b", "e", WeightScaling::RankDiff).unwrap();
        assert_eq!(w["d1"], 0.0);
        let w = compute_pair_weights(&t, "a", "c", WeightScaling::RankDiff).unwrap();
        assert!((w["d1"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_weights_minmax_pair_is_zero_one() {
        let t = table(&["a", "b"], &["d1", "d2"], &[&[0.2, 0.5], &[0.4, 0.5]]);
        let w = compute_pair_weights(&t, "a", "b", WeightScaling::MinmaxPair).unwrap();
        assert_eq!(w["d1"], 1.0);
        assert_eq!(w["d2"], 0.0);
    }

    fn unanimous_fixture() -> (BTreeMap<String, MetaFeatures>, PolicyLossTable) {
        let t = table(
            &["good", "bad"],
            &["d1", "d2", "d3", "d4", "d5", "d6"],
            &[
                &[0.1, 0.2, 0.15, 0.1, 0.12, 0.18],
                &[0.8, 0.9, 0.7, 0.6, 0.85, 0.75],
            ],
        );
        let m = meta(&[
            ("d1", 100, 5),
            ("d2", 1000, 10),
            ("d3", 500, 3),
            ("d4", 200, 8),
            ("d5", 750, 4),
            ("d6", 300, 6),
        ]);
        (m, t)
    }

    #[test]
    fn unanimous_winner_selected_everywhere() {
        let (m, t) = unanimous_fixture();
        let selector =
            train_pairwise_selector(&m, &t, &SelectorHyperparams::default(), 3).unwrap();
        let out = selector.select_policy(&MetaFeatures::new(150, 4).unwrap());
        assert_eq!(out.policy_id, "good");
        assert!(!out.fallback);
    }

    #[test]
    fn all_tied_pair_gives_half_votes() {
        let t = table(&["a", "b"], &["d1", "d2", "d3"], &[&[0.3; 3], &[0.3; 3]]);
        let m = meta(&[("d1", 10, 2), ("d2", 20, 3), ("d3", 30, 4)]);
        let selector =
            train_pairwise_selector(&m, &t, &SelectorHyperparams::default(), 3).unwrap();
        let out = selector.select_policy(&MetaFeatures::new(15, 2).unwrap());
        assert_eq!(out.tallies["a"], 0.5);
        assert_eq!(out.tallies["b"], 0.5);
        assert_eq!(out.policy_id, "a");
    }

    #[test]
    fn depth_zero_matches_single_best() {
        let t = table(
            &["p1", "p2", "p3"],
            &["d1", "d2", "d3", "d4", "d5"],
            &[
                &[0.2, 0.3, 0.4, 0.2, 0.3],
                &[0.1, 0.25, 0.5, 0.15, 0.2],
                &[0.6, 0.1, 0.3, 0.4, 0.5],
            ],
        );
        let m = meta(&[
            ("d1", 100, 5),
            ("d2", 1000, 10),
            ("d3", 500, 3),
            ("d4", 200, 8),
            ("d5", 800, 6),
        ]);
        let hp = SelectorHyperparams {
            max_depth: 0,
            bootstrap: false,
            voting: Voting::Hard,
            weight_scaling: WeightScaling::Raw,
            ..SelectorHyperparams::default()
        };
        let selector = train_pairwise_selector(&m, &t, &hp, 11).unwrap();
        let best = single_best(&t).unwrap();
        for q in [(100, 5), (900, 9), (450, 3), (123, 7)] {
            let out = selector.select_policy(&MetaFeatures::new(q.0, q.1).unwrap());
            assert!(!out.fallback);
            assert_eq!(out.policy_id, best);
        }
    }

    #[test]
    fn planted_threshold_is_recovered() {
        // Policy "small" wins below 10^4 samples, "large" above.
        let mut datasets = Vec::new();
        let mut small_losses = Vec::new();
        let mut large_losses = Vec::new();
        let mut m = BTreeMap::new();
        for i in 0..40u64 {
            let id = format!("d{i}");
            let n_samples = if i % 2 == 0 { 100 + i * 37 } else { 20_000 + i * 997 };
            m.insert(id.clone(), MetaFeatures::new(n_samples, 5 + i % 7).unwrap());
            if n_samples < 10_000 {
                small_losses.push(0.1);
                large_losses.push(0.5);
            } else {
                small_losses.push(0.5);
                large_losses.push(0.1);
            }
            datasets.push(id);
        }
        let t = PolicyLossTable::new(
            vec!["small".into(), "large".into()],
            datasets,
            vec![small_losses, large_losses],
        )
        .unwrap();
        let hp = SelectorHyperparams { bootstrap: false, ..SelectorHyperparams::default() };
        let selector = train_pairwise_selector(&m, &t, &hp, 5).unwrap();
        let mut correct = 0;
        let queries: Vec<(u64, &str)> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    (500 + i * 61, "small")
                } else {
                    (30_000 + i * 311, "large")
                }
            })
            .collect();
        for (n_samples, expected) in &queries {
            let out = selector.select_policy(&MetaFeatures::new(*n_samples, 6).unwrap());
            if out.policy_id == *expected {
                correct += 1;
            }
        }
        assert!(correct as f64 / queries.len() as f64 >= 0.9, "only {correct}/20 correct");
    }

    #[test]
    fn fallback_examples() {
        let training = [
            MetaFeatures::new(1000, 10).unwrap(),
            MetaFeatures::new(500, 50).unwrap(),
        ];
        assert!(!fallback_check(&MetaFeatures::new(800, 8).unwrap(), &training));
        assert!(fallback_check(&MetaFeatures::new(2000, 5).unwrap(), &training));
        assert!(!fallback_check(&MetaFeatures::new(1000, 10).unwrap(), &training));
        // Between the two frontier points: neither dominates.
        assert!(fallback_check(&MetaFeatures::new(600, 40).unwrap(), &training));
    }

    #[test]
    fn out_of_distribution_query_routes_to_holdout_sh() {
        let t = table(
            &["holdout-fb", "holdout-sh", "cv3-fb"],
            &["d1", "d2", "d3"],
            &[&[0.1, 0.1, 0.1], &[0.5, 0.5, 0.5], &[0.9, 0.9, 0.9]],
        );
        let m = meta(&[("d1", 100, 5), ("d2", 1000, 10), ("d3", 500, 3)]);
        let selector =
            train_pairwise_selector(&m, &t, &SelectorHyperparams::default(), 3).unwrap();
        let out = selector.select_policy(&MetaFeatures::new(1_000_000, 2).unwrap());
        assert!(out.fallback);
        assert_eq!(out.policy_id, "holdout-sh");
    }

    #[test]
    fn soft_and_hard_voting_tally_hand_check() {
        // Three constant pairwise models, crafted via a table where p1
        // narrowly beats p2, p2 clearly beats p3 and p3 narrowly beats p1.
        let t = table(
            &["p1", "p2", "p3"],
            &["d1", "d2", "d3"],
            &[&[0.4, 0.4, 0.4], &[0.45, 0.45, 0.45], &[0.39, 0.8, 0.8]],
        );
        let m = meta(&[("d1", 10, 2), ("d2", 20, 3), ("d3", 30, 4)]);
        let hard = SelectorHyperparams {
            max_depth: 0,
            bootstrap: false,
            voting: Voting::Hard,
            ..SelectorHyperparams::default()
        };
        let selector = train_pairwise_selector(&m, &t, &hard, 3).unwrap();
        let out = selector.select_policy(&MetaFeatures::new(15, 3).unwrap());
        // p1 beats p2 (3 wins), p1 loses to p3 once but wins twice, p2 beats
        // p3 twice out of three.
        assert_eq!(out.tallies["p1"], 2.0);
        assert_eq!(out.tallies["p2"], 1.0);
        assert_eq!(out.tallies["p3"], 0.0);
        assert_eq!(out.policy_id, "p1");
    }

    #[test]
    fn single_best_examples() {
        let t = table(&["a", "b"], &["d1", "d2"], &[&[0.3, 0.3], &[0.2, 0.2]]);
        assert_eq!(single_best(&t).unwrap(), "b");
        let t = table(&["only"], &["d1"], &[&[0.4]]);
        assert_eq!(single_best(&t).unwrap(), "only");
        // Brute-force mean scan over eight policies.
        let losses: Vec<Vec<f64>> =
            (0..8).map(|p| (0..5).map(|d| ((p * 5 + d) % 11) as f64 / 11.0).collect()).collect();
        let policies: Vec<String> = (0..8).map(|p| format!("p{p}")).collect();
        let datasets: Vec<String> = (0..5).map(|d| format!("d{d}")).collect();
        let t = PolicyLossTable::new(policies.clone(), datasets, losses.clone()).unwrap();
        let mut best = 0;
        for p in 1..8 {
            let mean = |i: usize| losses[i].iter().sum::<f64>() / 5.0;
            if mean(p) < mean(best) {
                best = p;
            }
        }
        assert_eq!(single_best(&t).unwrap(), policies[best]);
    }

    #[test]
    fn oracle_is_per_dataset_argmin_and_beats_single_best() {
        let t = table(
            &["a", "b", "c", "e"],
            &["d1", "d2", "d3", "d4"],
            &[
                &[0.5, 0.1, 0.7, 0.2],
                &[0.2, 0.6, 0.8, 0.9],
                &[0.9, 0.9, 0.1, 0.8],
                &[0.4, 0.5, 0.6, 0.1],
            ],
        );
        let oracle = oracle_policy(&t).unwrap();
        assert_eq!(oracle["d1"], "b");
        assert_eq!(oracle["d2"], "a");
        assert_eq!(oracle["d3"], "c");
        assert_eq!(oracle["d4"], "e");
        let oracle_mean: f64 = t
            .datasets()
            .iter()
            .map(|d| t.loss(&oracle[d], d).unwrap())
            .sum::<f64>()
            / t.datasets().len() as f64;
        let sb = single_best(&t).unwrap();
        assert!(oracle_mean <= t.mean_loss(&sb).unwrap());
    }

    #[test]
    fn random_policy_is_reproducible() {
        let policies = vec!["a".to_string(), "b".to_string()];
        let datasets = vec!["d1".to_string(), "d2".to_string(), "d3".to_string()];
        let r1 = random_policy(&policies, &datasets, 9);
        let r2 = random_policy(&policies, &datasets, 9);
        assert_eq!(r1, r2);
    }

    #[test]
    fn inner_cv_constant_winner_has_zero_regret() {
        let (m, _) = unanimous_fixture();
        // Normalized losses: "good" gets 0 everywhere.
        let normalized = table(
            &["good", "bad"],
            &["d1", "d2", "d3", "d4", "d5", "d6"],
            &[&[0.0; 6], &[1.0; 6]],
        );
        let out = inner_cv_train_eval(&m, &normalized, 2, &SelectorHyperparams::default(), 3)
            .unwrap();
        assert_eq!(out.mean_loss, 0.0);
        assert!(out.fold_losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn inner_cv_leave_one_out_and_errors() {
        let t = table(
            &["a", "b"],
            &["d1", "d2", "d3", "d4"],
            &[&[0.1, 0.2, 0.1, 0.2], &[0.3, 0.1, 0.4, 0.3]],
        );
        let m = meta(&[("d1", 10, 2), ("d2", 20, 3), ("d3", 30, 4), ("d4", 40, 5)]);
        let out =
            inner_cv_train_eval(&m, &t, 4, &SelectorHyperparams::default(), 3).unwrap();
        assert_eq!(out.fold_losses.len(), 4);
        assert!(inner_cv_train_eval(&m, &t, 5, &SelectorHyperparams::default(), 3).is_err());
    }

    #[test]
    fn tune_selector_budget_one_and_collapsed_space() {
        let (m, t) = unanimous_fixture();
        let space = SelectorSearchSpace::default();
        let (hp, _) = tune_selector(&m, &t, &space, 1, 2, 21).unwrap();
        // Budget 1 returns the single sampled configuration.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        assert_eq!(hp, space.sample(&mut rng));

        let point = SelectorSearchSpace {
            min_samples_split: (3, 3),
            min_samples_leaf: (2, 2),
            max_depth: (4, 4),
            max_features: (2, 2),
            bootstrap: vec![false],
            voting: vec![Voting::Hard],
            weight_scaling: vec![WeightScaling::Raw],
            n_trees: 10,
        };
        let (hp, _) = tune_selector(&m, &t, &point, 5, 2, 33).unwrap();
        assert_eq!(hp.max_depth, 4);
        assert_eq!(hp.voting, Voting::Hard);
        assert!(!hp.bootstrap);
    }

    #[test]
    fn selector_json_roundtrip() {
        let (m, t) = unanimous_fixture();
        let selector =
            train_pairwise_selector(&m, &t, &SelectorHyperparams::default(), 3).unwrap();
        let json = selector.to_json_string();
        let back = PolicySelector::from_json_str(&json).unwrap();
        assert_eq!(selector, back);
    }
}
