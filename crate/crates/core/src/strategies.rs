//! Model-selection / budget-allocation evaluators: the selection function
//! over a portfolio and the holdout, K-fold CV and successive-halving
//! estimators of a portfolio's loss on one dataset.
//!
//! All evaluators are deterministic. Members missing from a matrix and
//! budgets below a curve's first checkpoint are treated as failed runs at
//! the dataset's worst loss, never as hard errors; argmin ties always
//! resolve to the earliest member in portfolio order.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::data::{Allocation, MatrixEntry, PerformanceMatrix, Policy, Validation};
use crate::error::{Error, Result};
use crate::metrics::{normalize_loss, NormalizationStats};

/// Which recorded loss drives selection decisions.
///
/// `Validation` mirrors deployment; `Test` is the offline portfolio
/// construction convention, under which holdout/CV selection becomes a
/// monotone submodular objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionTarget {
    Validation,
    Test,
}

impl SelectionTarget {
    fn key(&self, val_loss: f64, test_loss: f64) -> f64 {
        match self {
            SelectionTarget::Validation => val_loss,
            SelectionTarget::Test => test_loss,
        }
    }
}

/// Expanded successive-halving schedule.
///
/// For downsampling rate `eta` and budget range `b_min..=b_max`:
/// `s_max = floor(log_eta(b_max / b_min))`, rung budgets `b_min * eta^i`,
/// `n = ceil(eta^s_max)` initial slots and `n_i = floor(n * eta^-i)`
/// survivors at rung `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShSchedule {
    pub eta: f64,
    pub b_min: u64,
    pub b_max: u64,
    pub s_max: u32,
    pub rung_budgets: Vec<u64>,
    pub initial_slots: usize,
    pub survivors_per_rung: Vec<usize>,
}

/// Builds the rung schedule for the given successive-halving parameters.
pub fn make_sh_schedule(eta: f64, b_min: u64, b_max: u64) -> Result<ShSchedule> {
    if !(eta > 1.0) || !eta.is_finite() {
        return Err(Error::validation(format!("sh schedule needs eta > 1, got {eta}")));
    }
    if b_min < 1 || b_max < b_min {
        return Err(Error::validation(format!(
            "sh schedule needs b_max >= b_min >= 1, got {b_min}..{b_max}"
        )));
    }
    let ratio = b_max as f64 / b_min as f64;
    // Small epsilon so exact powers are not lost to floating-point rounding.
    let mut s_max = (ratio.ln() / eta.ln() + 1e-9).floor() as u32;
    while s_max > 0 && budget_at(b_min, eta, s_max) > b_max {
        s_max -= 1;
    }
    let rung_budgets: Vec<u64> = (0..=s_max).map(|i| budget_at(b_min, eta, i)).collect();
    let initial_slots = (eta.powi(s_max as i32) - 1e-9).ceil().max(1.0) as usize;
    let survivors_per_rung: Vec<usize> = (0..=s_max)
        .map(|i| ((initial_slots as f64 * eta.powi(-(i as i32))) + 1e-9).floor().max(1.0) as usize)
        .collect();
    Ok(ShSchedule { eta, b_min, b_max, s_max, rung_budgets, initial_slots, survivors_per_rung })
}

fn budget_at(b_min: u64, eta: f64, rung: u32) -> u64 {
    (b_min as f64 * eta.powi(rung as i32)).round() as u64
}

impl ShSchedule {
    /// Number of brackets a portfolio of `portfolio_len` members consumes
    /// when filled in chunks of up to `initial_slots`.
    pub fn bracket_count(&self, portfolio_len: usize) -> usize {
        portfolio_len.div_ceil(self.initial_slots)
    }
}

/// One candidate evaluation inside a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub candidate: String,
    pub budget: u64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub wall_time_s: f64,
}

/// Record of one selection run on one dataset.
///
/// `chosen` is the member with the minimal selection-target loss at its
/// final budget (ties to the earliest member); `dataset_loss` is the value
/// that feeds portfolio-quality bookkeeping — the chosen member's test loss
/// for holdout/CV, and the running minimum test loss over *all* evaluations
/// for successive halving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub evaluations: Vec<EvalRecord>,
    pub chosen: String,
    pub chosen_test_loss: f64,
    pub dataset_loss: f64,
}

fn eval_at_final_budget(
    matrix: &PerformanceMatrix,
    candidate: &str,
    dataset: &str,
    worst: f64,
) -> EvalRecord {
    match matrix.entry(candidate, dataset) {
        Some(MatrixEntry::Curve(curve)) => {
            let c = curve.final_checkpoint();
            EvalRecord {
                candidate: candidate.to_string(),
                budget: c.budget,
                val_loss: c.val_loss,
                test_loss: c.test_loss,
                wall_time_s: c.wall_time_s,
            }
        }
        _ => EvalRecord {
            candidate: candidate.to_string(),
            budget: 0,
            val_loss: worst,
            test_loss: worst,
            wall_time_s: 0.0,
        },
    }
}

fn eval_at_budget(
    matrix: &PerformanceMatrix,
    candidate: &str,
    dataset: &str,
    budget: u64,
    worst: f64,
) -> EvalRecord {
    match matrix.entry(candidate, dataset) {
        Some(MatrixEntry::Curve(curve)) => match curve.at_budget(budget) {
            Ok((val_loss, test_loss)) => EvalRecord {
                candidate: candidate.to_string(),
                budget,
                val_loss,
                test_loss,
                wall_time_s: curve
                    .checkpoints()
                    .iter()
                    .rev()
                    .find(|c| c.budget <= budget)
                    .map(|c| c.wall_time_s)
                    .unwrap_or(0.0),
            },
            Err(_) => EvalRecord {
                candidate: candidate.to_string(),
                budget,
                val_loss: worst,
                test_loss: worst,
                wall_time_s: 0.0,
            },
        },
        _ => EvalRecord {
            candidate: candidate.to_string(),
            budget,
            val_loss: worst,
            test_loss: worst,
            wall_time_s: 0.0,
        },
    }
}

/// Index of the record with the strictly smallest selection key; earlier
/// records win ties.
fn argmin_by_key(records: &[EvalRecord], target: SelectionTarget) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        if target.key(r.val_loss, r.test_loss)
            < target.key(records[best].val_loss, records[best].test_loss)
        {
            best = i;
        }
    }
    best
}

/// Full-budget holdout selection: evaluate every member at its final
/// checkpoint and choose the argmin of the selection-target loss.
pub fn select_holdout(
    members: &[String],
    matrix: &PerformanceMatrix,
    dataset: &str,
    target: SelectionTarget,
) -> Result<SelectionTrace> {
    if members.is_empty() {
        return Err(Error::validation("selection over an empty portfolio"));
    }
    let worst = matrix.worst_loss(dataset)?;
    let evaluations: Vec<EvalRecord> = members
        .iter()
        .map(|m| eval_at_final_budget(matrix, m, dataset, worst))
        .collect();
    let best = argmin_by_key(&evaluations, target);
    Ok(SelectionTrace {
        chosen: evaluations[best].candidate.clone(),
        chosen_test_loss: evaluations[best].test_loss,
        dataset_loss: evaluations[best].test_loss,
        evaluations,
    })
}

/// K-fold cross-validated selection: a member's selection loss is the mean
/// of its per-fold losses; the reported test loss comes from the base
/// matrix's curve at the final budget.
///
/// When no per-fold matrices are supplied the base matrix is replicated
/// across folds, which degenerates to holdout selection.
pub fn portfolio_loss_cv(
    members: &[String],
    matrix: &PerformanceMatrix,
    folds: Option<&[PerformanceMatrix]>,
    dataset: &str,
    k: u32,
    target: SelectionTarget,
) -> Result<SelectionTrace> {
    if members.is_empty() {
        return Err(Error::validation("selection over an empty portfolio"));
    }
    if k < 2 {
        return Err(Error::validation("cross-validation needs k >= 2"));
    }
    if let Some(folds) = folds {
        if folds.len() != k as usize {
            return Err(Error::validation(format!(
                "fold count mismatch: got {} matrices for k = {k}",
                folds.len()
            )));
        }
    }
    let worst = matrix.worst_loss(dataset)?;
    let evaluations: Vec<EvalRecord> = members
        .iter()
        .map(|m| {
            let mut val_sum = 0.0;
            let mut test_sum = 0.0;
            let mut wall_sum = 0.0;
            for f in 0..k as usize {
                let fold_matrix = folds.map(|fs| &fs[f]).unwrap_or(matrix);
                let fold_worst = fold_matrix.worst_loss(dataset).unwrap_or(worst);
                let r = eval_at_final_budget(fold_matrix, m, dataset, fold_worst);
                val_sum += r.val_loss;
                test_sum += r.test_loss;
                wall_sum += r.wall_time_s;
            }
            let base = eval_at_final_budget(matrix, m, dataset, worst);
            EvalRecord {
                candidate: m.clone(),
                budget: base.budget,
                val_loss: val_sum / k as f64,
                // Selection under the test target averages per-fold test
                // losses; the trace still reports the base-matrix test loss.
                test_loss: test_sum / k as f64,
                wall_time_s: wall_sum,
            }
        })
        .collect();
    let best = argmin_by_key(&evaluations, target);
    let chosen = evaluations[best].candidate.clone();
    let chosen_test_loss = eval_at_final_budget(matrix, &chosen, dataset, worst).test_loss;
    Ok(SelectionTrace { evaluations, chosen, chosen_test_loss, dataset_loss: chosen_test_loss })
}

/// Runs one successive-halving bracket over the given candidates.
///
/// Rung `i` evaluates the current survivors at `rung_budgets[i]`; the
/// `max(1, floor(count / eta))` candidates with the lowest selection-target
/// loss advance (ties to earlier order). The trace's `dataset_loss` is the
/// minimum test loss observed across *all* evaluations in the bracket: any
/// intermediate result may feed the portfolio-quality bookkeeping.
pub fn run_sh_bracket(
    candidates: &[String],
    matrix: &PerformanceMatrix,
    dataset: &str,
    schedule: &ShSchedule,
    target: SelectionTarget,
) -> Result<SelectionTrace> {
    if candidates.is_empty() {
        return Err(Error::validation("successive halving over no candidates"));
    }
    let worst = matrix.worst_loss(dataset)?;
    let mut survivors: Vec<String> = candidates.to_vec();
    let mut evaluations: Vec<EvalRecord> = Vec::new();
    let mut bookkeeping = f64::INFINITY;
    let mut final_rung: Vec<EvalRecord> = Vec::new();

    for (rung, &budget) in schedule.rung_budgets.iter().enumerate() {
        let records: Vec<EvalRecord> = survivors
            .iter()
            .map(|c| eval_at_budget(matrix, c, dataset, budget, worst))
            .collect();
        for r in &records {
            bookkeeping = bookkeeping.min(r.test_loss);
        }
        if rung + 1 == schedule.rung_budgets.len() {
            final_rung = records.clone();
            evaluations.extend(records);
            break;
        }
        let keep = ((survivors.len() as f64 / schedule.eta).floor() as usize).max(1);
        let mut order: Vec<usize> = (0..records.len()).collect();
        // Stable sort keeps earlier candidates first among ties.
        order.sort_by(|&a, &b| {
            let ka = target.key(records[a].val_loss, records[a].test_loss);
            let kb = target.key(records[b].val_loss, records[b].test_loss);
            ka.partial_cmp(&kb).expect("finite losses")
        });
        let mut kept: Vec<usize> = order[..keep.min(order.len())].to_vec();
        kept.sort_unstable();
        survivors = kept.into_iter().map(|i| survivors[i].clone()).collect();
        evaluations.extend(records);
    }

    let best = argmin_by_key(&final_rung, target);
    Ok(SelectionTrace {
        chosen: final_rung[best].candidate.clone(),
        chosen_test_loss: final_rung[best].test_loss,
        dataset_loss: bookkeeping,
        evaluations,
    })
}

/// Estimates a portfolio's loss on one dataset with successive halving:
/// members are consumed in order in brackets of up to `initial_slots`
/// candidates, and the dataset loss is the minimum bookkeeping value across
/// brackets.
pub fn portfolio_loss_sh(
    members: &[String],
    matrix: &PerformanceMatrix,
    dataset: &str,
    schedule: &ShSchedule,
    target: SelectionTarget,
) -> Result<SelectionTrace> {
    if members.is_empty() {
        return Err(Error::validation("selection over an empty portfolio"));
    }
    let mut evaluations = Vec::new();
    let mut dataset_loss = f64::INFINITY;
    let mut chosen: Option<(String, f64, f64)> = None; // id, selection key, test loss
    for bracket in members.chunks(schedule.initial_slots.max(1)) {
        let trace = run_sh_bracket(bracket, matrix, dataset, schedule, target)?;
        dataset_loss = dataset_loss.min(trace.dataset_loss);
        let winner_key = trace
            .evaluations
            .iter()
            .rev()
            .find(|r| r.candidate == trace.chosen)
            .map(|r| target.key(r.val_loss, r.test_loss))
            .expect("winner was evaluated");
        let replace = match &chosen {
            None => true,
            Some((_, key, _)) => winner_key < *key,
        };
        if replace {
            chosen = Some((trace.chosen.clone(), winner_key, trace.chosen_test_loss));
        }
        evaluations.extend(trace.evaluations);
    }
    let (chosen, _, chosen_test_loss) = chosen.expect("at least one bracket");
    Ok(SelectionTrace { evaluations, chosen, chosen_test_loss, dataset_loss })
}

/// Matrix data needed to evaluate one policy: the base matrix plus optional
/// per-fold matrices for cross-validated selection.
#[derive(Debug, Clone, Copy)]
pub struct MatrixSet<'a> {
    pub matrix: &'a PerformanceMatrix,
    pub folds: Option<&'a [PerformanceMatrix]>,
}

impl<'a> MatrixSet<'a> {
    pub fn new(matrix: &'a PerformanceMatrix) -> Self {
        MatrixSet { matrix, folds: None }
    }

    pub fn with_folds(matrix: &'a PerformanceMatrix, folds: &'a [PerformanceMatrix]) -> Self {
        MatrixSet { matrix, folds: Some(folds) }
    }
}

/// Dispatches to the evaluator selected by the policy's validation scheme
/// and budget allocation.
pub fn portfolio_loss(
    members: &[String],
    data: &MatrixSet,
    dataset: &str,
    policy: &Policy,
    target: SelectionTarget,
) -> Result<SelectionTrace> {
    match (policy.validation, policy.allocation) {
        (_, Allocation::Sh { eta, b_min, b_max }) => {
            let schedule = make_sh_schedule(eta, b_min, b_max)?;
            portfolio_loss_sh(members, data.matrix, dataset, &schedule, target)
        }
        (Validation::Holdout, Allocation::FullBudget) => {
            select_holdout(members, data.matrix, dataset, target)
        }
        (Validation::Cv { folds }, Allocation::FullBudget) => {
            portfolio_loss_cv(members, data.matrix, data.folds, dataset, folds, target)
        }
    }
}

/// How per-dataset losses combine into the portfolio objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Sum,
}

/// Estimated generalization error of a portfolio across datasets: the
/// aggregated normalized per-dataset selection losses. Datasets evaluate in
/// parallel and reduce in input order, so results are thread-count
/// independent.
pub fn ge_s(
    members: &[String],
    data: &MatrixSet,
    datasets: &[String],
    policy: &Policy,
    target: SelectionTarget,
    stats: &NormalizationStats,
    aggregation: Aggregation,
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::validation("ge_s over an empty dataset set"));
    }
    let losses: Vec<Result<f64>> = datasets
        .par_iter()
        .map(|d| {
            let trace = portfolio_loss(members, data, d, policy, target)?;
            normalize_loss(trace.dataset_loss, stats, d)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(match aggregation {
        Aggregation::Sum => sum,
        Aggregation::Mean => sum / datasets.len() as f64,
    })
}
