//! Greedy portfolio construction, the brute-force optimum used for bound
//! verification, penalty reduction, and time-budgeted portfolio replay.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MatrixEntry, PerformanceMatrix, Policy, Portfolio};
use crate::error::{Error, Result};
use crate::metrics::NormalizationStats;
use crate::strategies::{ge_s, Aggregation, MatrixSet, SelectionTarget};

/// Options for [`greedy_portfolio`].
#[derive(Debug, Clone, Copy)]
pub struct GreedyOptions {
    /// Maximum portfolio size.
    pub size: usize,
    /// Stop as soon as the best remaining candidate no longer improves the
    /// objective. Off by default: construction runs to `size` members.
    pub early_stop: bool,
}

impl GreedyOptions {
    pub fn new(size: usize) -> Self {
        GreedyOptions { size, early_stop: false }
    }
}

fn objective(
    members: &[String],
    data: &MatrixSet,
    datasets: &[String],
    policy: &Policy,
    target: SelectionTarget,
    stats: &NormalizationStats,
) -> Result<f64> {
    if members.is_empty() {
        // Empty portfolio: the worst normalized loss on every dataset.
        return Ok(datasets.len() as f64);
    }
    ge_s(members, data, datasets, policy, target, stats, Aggregation::Sum)
}

/// Greedy portfolio construction: iteratively add the candidate whose
/// inclusion minimizes the portfolio objective across all datasets, ties
/// favoring the candidate evaluated first. Provenance records each member's
/// marginal objective improvement at insertion.
pub fn greedy_portfolio(
    candidates: &[String],
    data: &MatrixSet,
    datasets: &[String],
    policy: &Policy,
    target: SelectionTarget,
    stats: &NormalizationStats,
    options: GreedyOptions,
) -> Result<Portfolio> {
    if options.size < 1 {
        return Err(Error::validation("portfolio size must be >= 1"));
    }
    if candidates.is_empty() {
        return Err(Error::validation("no candidates to build a portfolio from"));
    }
    let mut remaining: Vec<String> = candidates.to_vec();
    let mut portfolio = Portfolio::default();
    let mut current = objective(&[], data, datasets, policy, target, stats)?;
    let mut members: Vec<String> = Vec::new();

    while portfolio.len() < options.size && !remaining.is_empty() {
        let scores: Vec<Result<f64>> = remaining
            .par_iter()
            .map(|c| {
                let mut trial = members.clone();
                trial.push(c.clone());
                objective(&trial, data, datasets, policy, target, stats)
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, score) in scores.into_iter().enumerate() {
            let score = score?;
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((i, score));
            }
        }
        let (idx, score) = best.expect("remaining is nonempty");
        if options.early_stop && score >= current {
            break;
        }
        let member = remaining.remove(idx);
        members.push(member.clone());
        portfolio.push(member, current - score);
        current = score;
    }
    Ok(portfolio)
}

/// Exact optimum of the portfolio objective over all subsets of at most
/// `size` candidates. Member order within a subset is candidate order, so
/// tie-breaking matches the greedy construction. Only feasible at desk
/// scale; enumeration beyond `cap` subsets is refused.
pub fn brute_force_portfolio(
    candidates: &[String],
    data: &MatrixSet,
    datasets: &[String],
    size: usize,
    policy: &Policy,
    target: SelectionTarget,
    stats: &NormalizationStats,
    cap: u64,
) -> Result<(Portfolio, f64)> {
    if size < 1 {
        return Err(Error::validation("portfolio size must be >= 1"));
    }
    let size = size.min(candidates.len());
    let mut total: u64 = 0;
    for k in 1..=size {
        total = total.saturating_add(n_choose_k(candidates.len() as u64, k as u64));
        if total > cap {
            return Err(Error::Capacity(format!(
                "brute force over {total}+ subsets exceeds cap {cap}; use a smaller instance"
            )));
        }
    }
    let mut best: Option<(Vec<String>, f64)> = None;
    for k in 1..=size {
        let combos: Vec<Vec<String>> =
            candidates.iter().cloned().combinations(k).collect();
        let scores: Vec<Result<f64>> = combos
            .par_iter()
            .map(|subset| objective(subset, data, datasets, policy, target, stats))
            .collect();
        for (subset, score) in combos.into_iter().zip(scores) {
            let score = score?;
            if best.as_ref().map_or(true, |(_, s)| score < *s) {
                best = Some((subset, score));
            }
        }
    }
    let (members, value) = best.expect("at least one subset");
    Ok((Portfolio::from_members(members)?, value))
}

fn n_choose_k(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Penalty reduction of a portfolio compared to the empty portfolio, which
/// scores the worst possible normalized loss (1.0) on every dataset.
pub fn penalty_reduction(
    members: &[String],
    data: &MatrixSet,
    datasets: &[String],
    policy: &Policy,
    target: SelectionTarget,
    stats: &NormalizationStats,
) -> Result<f64> {
    let empty = datasets.len() as f64;
    if members.is_empty() {
        return Ok(0.0);
    }
    let achieved = ge_s(members, data, datasets, policy, target, stats, Aggregation::Sum)?;
    Ok(empty - achieved)
}

/// One step of a replay trajectory: the incumbent's test loss after a
/// member finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayPoint {
    pub elapsed_s: f64,
    pub incumbent_test_loss: f64,
}

/// Time-bounded replay of a portfolio from recorded wall times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrajectory {
    pub points: Vec<ReplayPoint>,
    pub members_attempted: usize,
    pub elapsed_s: f64,
    /// Incumbent test loss when the horizon ran out.
    pub final_test_loss: f64,
}

/// Replays a portfolio against one dataset under a wall-clock horizon.
///
/// Members run in order; each costs its curve's final wall time truncated at
/// `per_eval_cap` (default: a tenth of the horizon). A capped member
/// contributes its last checkpoint finishing within the cap, or the worst
/// loss if none exists. Replay stops before a member whose cost would push
/// the total past the horizon. The incumbent is the best member so far by
/// validation loss; the trajectory reports the incumbent's test loss.
pub fn replay_with_budget(
    members: &[String],
    matrix: &PerformanceMatrix,
    dataset: &str,
    horizon_s: f64,
    per_eval_cap: Option<f64>,
) -> Result<ReplayTrajectory> {
    if !(horizon_s > 0.0) {
        return Err(Error::validation("replay horizon must be positive"));
    }
    let cap = per_eval_cap.unwrap_or(horizon_s / 10.0);
    let worst = matrix.worst_loss(dataset)?;

    let mut elapsed = 0.0_f64;
    let mut incumbent: Option<(f64, f64)> = None; // (val, test)
    let mut points = vec![ReplayPoint { elapsed_s: 0.0, incumbent_test_loss: worst }];
    let mut attempted = 0;

    for member in members {
        let (cost, result) = match matrix.entry(member, dataset) {
            Some(MatrixEntry::Curve(curve)) => {
                let cost = curve.final_checkpoint().wall_time_s.min(cap);
                let result = curve
                    .last_within_wall_time(cap)
                    .map(|c| (c.val_loss, c.test_loss));
                (cost, result)
            }
            // Failed and unknown runs consume their full time cap.
            _ => (cap, None),
        };
        if elapsed + cost > horizon_s {
            break;
        }
        elapsed += cost;
        attempted += 1;
        if let Some((val, test)) = result {
            let better = incumbent.map_or(true, |(best_val, _)| val < best_val);
            if better {
                incumbent = Some((val, test));
            }
        }
        points.push(ReplayPoint {
            elapsed_s: elapsed,
            incumbent_test_loss: incumbent.map_or(worst, |(_, test)| test),
        });
    }

    let final_test_loss = incumbent.map_or(worst, |(_, test)| test);
    Ok(ReplayTrajectory { points, members_attempted: attempted, elapsed_s: elapsed, final_test_loss })
}

/// On-disk portfolio document: `{members, strategy, provenance}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioDocument {
    pub members: Vec<String>,
    pub strategy: String,
    pub provenance: Vec<f64>,
}

impl PortfolioDocument {
    pub fn new(portfolio: &Portfolio, strategy: impl Into<String>) -> Self {
        PortfolioDocument {
            members: portfolio.members().to_vec(),
            strategy: strategy.into(),
            provenance: portfolio.provenance().to_vec(),
        }
    }

    pub fn portfolio(&self) -> Result<Portfolio> {
        Portfolio::new(self.members.clone(), self.provenance.clone())
    }

    pub fn to_json_string(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("portfolio serialization");
        out.push('\n');
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Allocation, DatasetMeta, LearningCurve, Validation};

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Candidates x datasets matrix of one-checkpoint curves; per candidate
    /// a list of (val, test, wall) per dataset.
    fn matrix(datasets: &[&str], rows: &[(&str, Vec<(f64, f64, f64)>)]) -> PerformanceMatrix {
        let metas = datasets
            .iter()
            .map(|d| DatasetMeta {
                id: d.to_string(),
                n_samples: 10,
                n_features: 2,
                loss_min: 0.0,
                loss_max: 1.0,
            })
            .collect();
        let mut entries = Vec::new();
        for (c, losses) in rows {
            for (d, (v, t, w)) in datasets.iter().zip(losses) {
                entries.push((
                    c.to_string(),
                    d.to_string(),
                    MatrixEntry::Curve(LearningCurve::from_tuples(&[(1, *v, *t, *w)]).unwrap()),
                ));
            }
        }
        PerformanceMatrix::new(metas, rows.iter().map(|(c, _)| c.to_string()).collect(), entries)
            .unwrap()
    }

    fn holdout() -> Policy {
        Policy::new(Validation::Holdout, Allocation::FullBudget).unwrap()
    }

    #[test]
    fn greedy_two_step_covers_both_datasets() {
        // Test losses c1: (.2,.4), c2: (.4,.1), c3: (.3,.3); bounds from
        // observed values. Greedy with the test target picks c1 then c2 and
        // reaches ADTM 0.
        let m = matrix(
            &["d1", "d2"],
            &[
                ("c1", vec![(0.5, 0.2, 1.0), (0.5, 0.4, 1.0)]),
                ("c2", vec![(0.5, 0.4, 1.0), (0.5, 0.1, 1.0)]),
                ("c3", vec![(0.5, 0.3, 1.0), (0.5, 0.3, 1.0)]),
            ],
        );
        let mut stats = NormalizationStats::new();
        stats.insert("d1", 0.2, 0.4);
        stats.insert("d2", 0.1, 0.4);
        let datasets = ids(&["d1", "d2"]);
        let p = greedy_portfolio(
            &ids(&["c1", "c2", "c3"]),
            &MatrixSet::new(&m),
            &datasets,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            GreedyOptions::new(2),
        )
        .unwrap();
        assert_eq!(p.members(), ["c1".to_string(), "c2".to_string()]);
        let value = ge_s(
            p.members(),
            &MatrixSet::new(&m),
            &datasets,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            Aggregation::Mean,
        )
        .unwrap();
        assert_eq!(value, 0.0);

        let (opt, opt_value) = brute_force_portfolio(
            &ids(&["c1", "c2", "c3"]),
            &MatrixSet::new(&m),
            &datasets,
            2,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            1_000_000,
        )
        .unwrap();
        assert_eq!(opt_value, 0.0);
        assert_eq!(opt.members().len(), 2);
    }

    #[test]
    fn greedy_identical_candidates_keep_input_order() {
        let m = matrix(
            &["d1"],
            &[
                ("c1", vec![(0.5, 0.5, 1.0)]),
                ("c2", vec![(0.5, 0.5, 1.0)]),
                ("c3", vec![(0.5, 0.5, 1.0)]),
            ],
        );
        let stats = NormalizationStats::from_matrix(&m);
        let p = greedy_portfolio(
            &ids(&["c1", "c2", "c3"]),
            &MatrixSet::new(&m),
            &ids(&["d1"]),
            &holdout(),
            SelectionTarget::Test,
            &stats,
            GreedyOptions::new(2),
        )
        .unwrap();
        assert_eq!(p.members(), ["c1".to_string(), "c2".to_string()]);
    }

    #[test]
    fn greedy_size_one_is_single_best() {
        let m = matrix(
            &["d1", "d2"],
            &[
                ("c1", vec![(0.5, 0.3, 1.0), (0.5, 0.9, 1.0)]),
                ("c2", vec![(0.5, 0.4, 1.0), (0.5, 0.4, 1.0)]),
            ],
        );
        let mut stats = NormalizationStats::new();
        stats.insert("d1", 0.0, 1.0);
        stats.insert("d2", 0.0, 1.0);
        let p = greedy_portfolio(
            &ids(&["c1", "c2"]),
            &MatrixSet::new(&m),
            &ids(&["d1", "d2"]),
            &holdout(),
            SelectionTarget::Test,
            &stats,
            GreedyOptions::new(1),
        )
        .unwrap();
        // c1 mean .6, c2 mean .4
        assert_eq!(p.members(), ["c2".to_string()]);
        let (opt, _) = brute_force_portfolio(
            &ids(&["c1", "c2"]),
            &MatrixSet::new(&m),
            &ids(&["d1", "d2"]),
            1,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            1_000_000,
        )
        .unwrap();
        assert_eq!(opt.members(), p.members());
    }

    #[test]
    fn brute_force_full_set_is_pointwise_minimum() {
        let m = matrix(
            &["d1", "d2"],
            &[
                ("c1", vec![(0.5, 0.2, 1.0), (0.5, 0.8, 1.0)]),
                ("c2", vec![(0.5, 0.6, 1.0), (0.5, 0.3, 1.0)]),
            ],
        );
        let mut stats = NormalizationStats::new();
        stats.insert("d1", 0.0, 1.0);
        stats.insert("d2", 0.0, 1.0);
        let (p, value) = brute_force_portfolio(
            &ids(&["c1", "c2"]),
            &MatrixSet::new(&m),
            &ids(&["d1", "d2"]),
            2,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            1_000_000,
        )
        .unwrap();
        assert_eq!(p.members().len(), 2);
        assert!((value - (0.2 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn brute_force_cap() {
        let names: Vec<String> = (0..30).map(|i| format!("c{i}")).collect();
        let m = matrix(
            &["d1"],
            &names.iter().map(|n| (n.as_str(), vec![(0.5, 0.5, 1.0)])).collect::<Vec<_>>(),
        );
        let stats = NormalizationStats::from_matrix(&m);
        let err = brute_force_portfolio(
            &names,
            &MatrixSet::new(&m),
            &ids(&["d1"]),
            10,
            &holdout(),
            SelectionTarget::Test,
            &stats,
            1000,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn penalty_reduction_bounds() {
        let m = matrix(
            &["d1", "d2"],
            &[("c1", vec![(0.5, 0.0, 1.0), (0.5, 0.0, 1.0)])],
        );
        let mut stats = NormalizationStats::new();
        stats.insert("d1", 0.0, 1.0);
        stats.insert("d2", 0.0, 1.0);
        let datasets = ids(&["d1", "d2"]);
        assert_eq!(
            penalty_reduction(
                &[],
                &MatrixSet::new(&m),
                &datasets,
                &holdout(),
                SelectionTarget::Test,
                &stats
            )
            .unwrap(),
            0.0
        );
        // Portfolio at the per-dataset minima: full reduction of 1.0 per dataset.
        assert_eq!(
            penalty_reduction(
                &ids(&["c1"]),
                &MatrixSet::new(&m),
                &datasets,
                &holdout(),
                SelectionTarget::Test,
                &stats
            )
            .unwrap(),
            2.0
        );
    }

    fn replay_matrix() -> PerformanceMatrix {
        // Curves with several wall-time checkpoints on one dataset.
        let metas = vec![DatasetMeta {
            id: "d".into(),
            n_samples: 10,
            n_features: 2,
            loss_min: 0.0,
            loss_max: 1.0,
        }];
        let entries = vec![
            (
                "m1".to_string(),
                "d".to_string(),
                MatrixEntry::Curve(
                    LearningCurve::from_tuples(&[(1, 0.5, 0.5, 20.0), (2, 0.4, 0.45, 50.0)])
                        .unwrap(),
                ),
            ),
            (
                "m2".to_string(),
                "d".to_string(),
                MatrixEntry::Curve(
                    LearningCurve::from_tuples(&[(1, 0.45, 0.3, 55.0), (2, 0.2, 0.25, 70.0)])
                        .unwrap(),
                ),
            ),
            (
                "m3".to_string(),
                "d".to_string(),
                MatrixEntry::Curve(LearningCurve::from_tuples(&[(1, 0.3, 0.1, 40.0)]).unwrap()),
            ),
        ];
        PerformanceMatrix::new(metas, ids(&["m1", "m2", "m3"]), entries).unwrap()
    }

    #[test]
    fn replay_truncates_at_cap_and_attempts_all() {
        // Wall times (50, 70, 40), horizon 600, cap 60: m2 is truncated at
        // its 55 s checkpoint, all three run, elapsed <= 150.
        let m = replay_matrix();
        let t = replay_with_budget(&ids(&["m1", "m2", "m3"]), &m, "d", 600.0, Some(60.0)).unwrap();
        assert_eq!(t.members_attempted, 3);
        assert!(t.elapsed_s <= 150.0);
        assert_eq!(t.elapsed_s, 50.0 + 60.0 + 40.0);
        // m2's capped result is its 55 s checkpoint (val .45), m3 wins by val .3.
        assert_eq!(t.final_test_loss, 0.1);
    }

    #[test]
    fn replay_horizon_below_first_checkpoint() {
        let m = replay_matrix();
        let t = replay_with_budget(&ids(&["m1", "m2", "m3"]), &m, "d", 10.0, None).unwrap();
        // Cap is 1s; nothing finishes a checkpoint, every point is the worst loss.
        assert!(t.points.iter().all(|p| p.incumbent_test_loss == 1.0));
        assert_eq!(t.final_test_loss, 1.0);
    }

    #[test]
    fn replay_single_member_huge_horizon() {
        let m = replay_matrix();
        let t = replay_with_budget(&ids(&["m2"]), &m, "d", 1e9, None).unwrap();
        assert_eq!(t.members_attempted, 1);
        assert_eq!(t.final_test_loss, 0.25);
    }

    #[test]
    fn replay_incumbent_val_loss_nonincreasing() {
        let m = replay_matrix();
        let t = replay_with_budget(&ids(&["m1", "m2", "m3"]), &m, "d", 1e9, None).unwrap();
        for pair in t.points.windows(2) {
            assert!(pair[1].elapsed_s >= pair[0].elapsed_s);
        }
    }
}
