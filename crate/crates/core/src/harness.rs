//! End-to-end experiment pipeline: build per-policy portfolios, simulate
//! per-policy runs under a wall-clock horizon, assemble the selector's
//! training table, evaluate systems on held-out meta-data and emit
//! comparison reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Allocation, PerformanceMatrix, Policy, Portfolio, Validation};
use crate::ensemble::{ensemble_predict, ensemble_select, PredictionSet};
use crate::error::{Error, Result};
use crate::metrics::{average_rank, normalize_loss, sign_test, wilcoxon_signed_rank, NormalizationStats};
use crate::portfolio::{greedy_portfolio, replay_with_budget, GreedyOptions};
use crate::selector::{
    oracle_policy, random_policy, MetaFeatures, PolicyLossTable, PolicySelector,
};
use crate::strategies::{MatrixSet, SelectionTarget};
use crate::{derive_seed, selector};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One policy's meta-data: the policy itself plus the performance matrix
/// (and optional per-fold matrices) recorded under its validation scheme.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    pub policy: Policy,
    pub matrix: PerformanceMatrix,
    pub folds: Option<Vec<PerformanceMatrix>>,
}

impl PolicyInput {
    pub fn new(policy: Policy, matrix: PerformanceMatrix) -> Self {
        PolicyInput { policy, matrix, folds: None }
    }
}

/// Configuration of the training-table construction.
#[derive(Debug, Clone, Copy)]
pub struct TableConfig {
    pub horizon_s: f64,
    /// Per-evaluation wall-time cap; defaults to a tenth of the horizon.
    pub per_eval_cap: Option<f64>,
    /// Meta-level cross-validation folds for leakage-free loss estimates;
    /// 1 disables fold-local portfolio reconstruction.
    pub meta_level_folds: u32,
    pub portfolio_size: usize,
    pub selection_target: SelectionTarget,
    pub seed: u64,
}

impl TableConfig {
    pub fn new(horizon_s: f64, seed: u64) -> Self {
        TableConfig {
            horizon_s,
            per_eval_cap: None,
            meta_level_folds: 5,
            portfolio_size: 32,
            selection_target: SelectionTarget::Test,
            seed,
        }
    }
}

/// Output of the training phase for one horizon: the normalized policy-loss
/// table, the final per-policy portfolios rebuilt on all meta-datasets, the
/// normalization statistics and the per-dataset meta-features.
#[derive(Debug, Clone)]
pub struct TrainingTable {
    pub horizon_s: f64,
    pub table: PolicyLossTable,
    pub raw_losses: PolicyLossTable,
    pub stats: NormalizationStats,
    pub portfolios: BTreeMap<String, Portfolio>,
    pub meta_features: BTreeMap<String, MetaFeatures>,
}

/// Builds the selector training table for one horizon.
///
/// Per policy: a greedy portfolio is built per meta-level fold on the
/// remaining datasets, replayed under the horizon on the held-out fold
/// (optionally finished with ensemble selection when prediction sets are
/// supplied), and the per-dataset losses are pooled across policies into
/// normalization statistics. The final portfolios are rebuilt on all
/// datasets.
pub fn build_training_table(
    inputs: &[PolicyInput],
    ensemble_preds: Option<&BTreeMap<(String, String), PredictionSet>>,
    config: &TableConfig,
) -> Result<TrainingTable> {
    if inputs.is_empty() {
        return Err(Error::validation("no policies supplied"));
    }
    if config.meta_level_folds < 1 {
        return Err(Error::validation("meta_level_folds must be >= 1"));
    }
    let dataset_ids = inputs[0].matrix.dataset_ids();
    let reference: BTreeSet<&String> = dataset_ids.iter().collect();
    for input in inputs {
        let ids = input.matrix.dataset_ids();
        let set: BTreeSet<&String> = ids.iter().collect();
        let this: BTreeSet<&String> = set.iter().copied().collect();
        if this != reference {
            return Err(Error::validation(format!(
                "policy {} covers a different dataset set",
                input.policy.id()
            )));
        }
    }
    let mut policy_ids = Vec::new();
    for input in inputs {
        let id = input.policy.id();
        if policy_ids.contains(&id) {
            return Err(Error::validation(format!("duplicate policy {id}")));
        }
        policy_ids.push(id);
    }

    let meta_features: BTreeMap<String, MetaFeatures> = inputs[0]
        .matrix
        .datasets()
        .iter()
        .map(|d| {
            Ok((d.id.clone(), MetaFeatures::new(d.n_samples, d.n_features)?))
        })
        .collect::<Result<_>>()?;

    let folds = assign_folds(&dataset_ids, config.meta_level_folds, config.seed);

    let mut raw_rows: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut portfolios = BTreeMap::new();
    for (pi, input) in inputs.iter().enumerate() {
        let data = match &input.folds {
            Some(folds) => MatrixSet::with_folds(&input.matrix, folds),
            None => MatrixSet::new(&input.matrix),
        };
        let matrix_stats = NormalizationStats::from_matrix(&input.matrix);
        let candidates = input.matrix.candidates().to_vec();
        let mut losses: BTreeMap<String, f64> = BTreeMap::new();
        for fold in &folds {
            let train_ids: Vec<String> = if folds.len() == 1 {
                dataset_ids.clone()
            } else {
                dataset_ids.iter().filter(|d| !fold.contains(*d)).cloned().collect()
            };
            let portfolio = greedy_portfolio(
                &candidates,
                &data,
                &train_ids,
                &input.policy,
                config.selection_target,
                &matrix_stats,
                GreedyOptions::new(config.portfolio_size),
            )?;
            for d in fold {
                let loss = policy_dataset_loss(
                    portfolio.members(),
                    input,
                    d,
                    ensemble_preds,
                    config,
                )?;
                losses.insert(d.clone(), loss);
            }
        }
        let final_portfolio = greedy_portfolio(
            &candidates,
            &data,
            &dataset_ids,
            &input.policy,
            config.selection_target,
            &matrix_stats,
            GreedyOptions::new(config.portfolio_size),
        )?;
        portfolios.insert(policy_ids[pi].clone(), final_portfolio);
        raw_rows.push(dataset_ids.iter().map(|d| losses[d]).collect());
    }

    let raw_losses = PolicyLossTable::new(policy_ids.clone(), dataset_ids.clone(), raw_rows)?;
    let mut observations = Vec::new();
    for p in &policy_ids {
        for d in &dataset_ids {
            observations.push((d.as_str(), raw_losses.loss(p, d)?));
        }
    }
    let stats = NormalizationStats::from_observations(observations);
    let normalized_rows: Vec<Vec<f64>> = policy_ids
        .iter()
        .map(|p| {
            dataset_ids
                .iter()
                .map(|d| {
                    normalize_loss(raw_losses.loss(p, d).expect("complete table"), &stats, d)
                        .expect("stats cover table")
                })
                .collect()
        })
        .collect();
    let table = PolicyLossTable::new(policy_ids, dataset_ids, normalized_rows)?;

    Ok(TrainingTable {
        horizon_s: config.horizon_s,
        table,
        raw_losses,
        stats,
        portfolios,
        meta_features,
    })
}

/// Per-horizon systems are fully separate: one table per horizon.
pub fn build_training_tables(
    inputs: &[PolicyInput],
    horizons: &[f64],
    base: &TableConfig,
) -> Result<Vec<TrainingTable>> {
    horizons
        .iter()
        .map(|&horizon_s| {
            let config = TableConfig { horizon_s, per_eval_cap: None, ..*base };
            build_training_table(inputs, None, &config)
        })
        .collect()
}

fn policy_dataset_loss(
    members: &[String],
    input: &PolicyInput,
    dataset: &str,
    ensemble_preds: Option<&BTreeMap<(String, String), PredictionSet>>,
    config: &TableConfig,
) -> Result<f64> {
    if let Some(preds) = ensemble_preds {
        if let Some(set) = preds.get(&(input.policy.id(), dataset.to_string())) {
            let weights = ensemble_select(set, 50)?;
            return Ok(ensemble_predict(&weights, set)?.test_loss);
        }
    }
    let trajectory = replay_with_budget(
        members,
        &input.matrix,
        dataset,
        config.horizon_s,
        config.per_eval_cap,
    )?;
    Ok(trajectory.final_test_loss)
}

fn assign_folds(dataset_ids: &[String], folds: u32, seed: u64) -> Vec<Vec<String>> {
    let folds = (folds as usize).clamp(1, dataset_ids.len());
    let mut shuffled = dataset_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0f01d5));
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    (0..folds)
        .map(|f| {
            shuffled
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds == f)
                .map(|(_, d)| d.clone())
                .collect()
        })
        .collect()
}

/// System whose policy assignment is evaluated against a held-out table.
#[derive(Debug, Clone)]
pub enum SystemUnderTest<'a> {
    Selector(&'a PolicySelector),
    SingleBest { policy_id: String },
    Random { seed: u64 },
    Oracle,
}

impl SystemUnderTest<'_> {
    fn name(&self) -> String {
        match self {
            SystemUnderTest::Selector(_) => "selector".to_string(),
            SystemUnderTest::SingleBest { policy_id } => format!("single-best:{policy_id}"),
            SystemUnderTest::Random { .. } => "random".to_string(),
            SystemUnderTest::Oracle => "oracle".to_string(),
        }
    }
}

/// Report options: rank sampling and the random baseline's seed.
#[derive(Debug, Clone, Copy)]
pub struct ReportOptions {
    pub horizon_s: f64,
    pub rank_draws: u32,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { horizon_s: 0.0, rank_draws: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerDatasetRow {
    pub dataset: String,
    pub policy: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub adtm_mean: f64,
    pub adtm_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub wilcoxon_p: Option<f64>,
    pub sign_test_p: Option<f64>,
}

/// Evaluation report for one system on one held-out table. The oracle and
/// random baselines are always included; the statistical tests compare the
/// system's per-dataset losses against the random baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub system: String,
    pub horizon_s: f64,
    pub adtm_mean: f64,
    pub adtm_std: f64,
    pub per_dataset: Vec<PerDatasetRow>,
    pub ranks: BTreeMap<String, f64>,
    pub oracle: BaselineRow,
    pub random: BaselineRow,
    pub tests: TestResults,
}

impl Report {
    pub fn to_json_string(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serialization");
        out.push('\n');
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn assignment_losses(
    assignment: &BTreeMap<String, String>,
    table: &PolicyLossTable,
) -> Result<Vec<f64>> {
    table
        .datasets()
        .iter()
        .map(|d| table.loss(&assignment[d], d))
        .collect()
}

/// Evaluates a system on held-out meta-data: per-dataset policy choice,
/// loss lookup in the (normalized) held-out table and ADTM aggregation.
///
/// Held-out datasets must be disjoint from the selector's training
/// datasets; an overlap is a hard error.
pub fn evaluate_system(
    system: &SystemUnderTest,
    held_out: &PolicyLossTable,
    meta_features: &BTreeMap<String, MetaFeatures>,
    opts: &ReportOptions,
) -> Result<Report> {
    if held_out.datasets().is_empty() {
        return Err(Error::validation("held-out dataset set is empty"));
    }
    if let SystemUnderTest::Selector(selector) = system {
        for d in held_out.datasets() {
            if selector.training_datasets().contains(d) {
                return Err(Error::validation(format!(
                    "dataset \"{d}\" leaks from selector training into evaluation"
                )));
            }
        }
    }

    let assignment = assign_policies(system, held_out, meta_features)?;
    let losses = assignment_losses(&assignment, held_out)?;
    let (adtm_mean, adtm_std) = mean_std(&losses);

    let oracle_assignment = oracle_policy(held_out)?;
    let oracle_losses = assignment_losses(&oracle_assignment, held_out)?;
    let (oracle_mean, oracle_std) = mean_std(&oracle_losses);

    let random_assignment = random_policy(
        &held_out.policies().to_vec(),
        &held_out.datasets().to_vec(),
        derive_seed(opts.seed, 0xba5e),
    );
    let random_losses = assignment_losses(&random_assignment, held_out)?;
    let (random_mean, random_std) = mean_std(&random_losses);

    let mut rank_input: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (name, values) in [
        (system.name(), &losses),
        ("oracle".to_string(), &oracle_losses),
        ("random".to_string(), &random_losses),
    ] {
        let per_dataset = held_out
            .datasets()
            .iter()
            .zip(values)
            .map(|(d, l)| (d.clone(), vec![*l]))
            .collect();
        rank_input.insert(name, per_dataset);
    }
    let ranks = average_rank(&rank_input, opts.rank_draws.max(1), derive_seed(opts.seed, 0x4a9c))?;

    let wilcoxon_p = wilcoxon_signed_rank(&losses, &random_losses).ok();
    let mut wins = 0;
    let mut defeats = 0;
    for (a, b) in losses.iter().zip(&random_losses) {
        if a < b {
            wins += 1;
        } else if a > b {
            defeats += 1;
        }
    }
    let sign_test_p = if wins + defeats > 0 { sign_test(wins, defeats).ok() } else { None };

    let per_dataset = held_out
        .datasets()
        .iter()
        .zip(&losses)
        .map(|(d, l)| PerDatasetRow {
            dataset: d.clone(),
            policy: assignment[d].clone(),
            loss: *l,
        })
        .collect();

    Ok(Report {
        system: system.name(),
        horizon_s: opts.horizon_s,
        adtm_mean,
        adtm_std,
        per_dataset,
        ranks,
        oracle: BaselineRow { adtm_mean: oracle_mean, adtm_std: oracle_std },
        random: BaselineRow { adtm_mean: random_mean, adtm_std: random_std },
        tests: TestResults { wilcoxon_p, sign_test_p },
    })
}

fn assign_policies(
    system: &SystemUnderTest,
    table: &PolicyLossTable,
    meta_features: &BTreeMap<String, MetaFeatures>,
) -> Result<BTreeMap<String, String>> {
    match system {
        SystemUnderTest::Oracle => oracle_policy(table),
        SystemUnderTest::Random { seed } => {
            Ok(random_policy(&table.policies().to_vec(), &table.datasets().to_vec(), *seed))
        }
        SystemUnderTest::SingleBest { policy_id } => {
            if !table.policies().contains(policy_id) {
                return Err(Error::UnknownId { kind: "policy", id: policy_id.clone() });
            }
            Ok(table.datasets().iter().map(|d| (d.clone(), policy_id.clone())).collect())
        }
        SystemUnderTest::Selector(selector) => table
            .datasets()
            .iter()
            .map(|d| {
                let mf = meta_features.get(d).ok_or_else(|| Error::UnknownId {
                    kind: "dataset meta-features",
                    id: d.clone(),
                })?;
                let outcome = selector.select_policy(mf);
                if !table.policies().contains(&outcome.policy_id) {
                    return Err(Error::UnknownId { kind: "policy", id: outcome.policy_id });
                }
                Ok((d.clone(), outcome.policy_id))
            })
            .collect(),
    }
}

/// Policy subsets studied in the model-selection ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySubset {
    All,
    OnlyHoldout,
    OnlyCv,
    OnlyFb,
    OnlySh,
}

impl PolicySubset {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySubset::All => "all",
            PolicySubset::OnlyHoldout => "only_holdout",
            PolicySubset::OnlyCv => "only_cv",
            PolicySubset::OnlyFb => "only_fb",
            PolicySubset::OnlySh => "only_sh",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "all" => PolicySubset::All,
            "only_holdout" => PolicySubset::OnlyHoldout,
            "only_cv" => PolicySubset::OnlyCv,
            "only_fb" => PolicySubset::OnlyFb,
            "only_sh" => PolicySubset::OnlySh,
            other => return Err(Error::parse(format!("unknown policy subset \"{other}\""))),
        })
    }

    /// Filters policy ids; ids that do not parse as policies are dropped
    /// from everything but `All`.
    pub fn filter(&self, policy_ids: &[String]) -> Vec<String> {
        policy_ids
            .iter()
            .filter(|id| match self {
                PolicySubset::All => true,
                _ => match Policy::parse_id(id) {
                    Err(_) => false,
                    Ok(p) => match self {
                        PolicySubset::OnlyHoldout => p.validation == Validation::Holdout,
                        PolicySubset::OnlyCv => matches!(p.validation, Validation::Cv { .. }),
                        PolicySubset::OnlyFb => p.allocation == Allocation::FullBudget,
                        PolicySubset::OnlySh => matches!(p.allocation, Allocation::Sh { .. }),
                        PolicySubset::All => true,
                    },
                },
            })
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub system: String,
    pub adtm_mean: f64,
    pub adtm_std: f64,
}

/// One ablation result: selector, random and oracle rows on a policy subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub subset: String,
    pub n_policies: usize,
    pub rows: Vec<AblationRow>,
}

/// Restricts both tables to a policy subset, retrains the selector on the
/// training table and evaluates selector, random and oracle on the held-out
/// table.
pub fn ablation_subsets(
    meta_features: &BTreeMap<String, MetaFeatures>,
    train_table: &PolicyLossTable,
    held_out_table: &PolicyLossTable,
    subset: PolicySubset,
    hp: &selector::SelectorHyperparams,
    seed: u64,
    opts: &ReportOptions,
) -> Result<AblationReport> {
    let keep = subset.filter(train_table.policies());
    if keep.is_empty() {
        return Err(Error::validation(format!("policy subset {} is empty", subset.name())));
    }
    let train = train_table.with_policies(&keep)?;
    let held_out = held_out_table.with_policies(&keep)?;
    let trained = selector::train_pairwise_selector(meta_features, &train, hp, seed)?;

    let mut rows = Vec::new();
    for system in [
        SystemUnderTest::Selector(&trained),
        SystemUnderTest::Random { seed: derive_seed(seed, 0x7a11) },
        SystemUnderTest::Oracle,
    ] {
        let report = evaluate_system(&system, &held_out, meta_features, opts)?;
        rows.push(AblationRow {
            system: report.system,
            adtm_mean: report.adtm_mean,
            adtm_std: report.adtm_std,
        });
    }
    Ok(AblationReport { subset: subset.name().to_string(), n_policies: keep.len(), rows })
}
