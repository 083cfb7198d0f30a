//! Structural properties of the portfolio objective: monotonicity and
//! submodularity under test-set selection, and the exact counterexamples
//! showing both break under validation-set and successive-halving
//! selection.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metasel::data::{DatasetMeta, LearningCurve, MatrixEntry, PerformanceMatrix, Policy};
use metasel::metrics::NormalizationStats;
use metasel::portfolio::penalty_reduction;
use metasel::strategies::{
    make_sh_schedule, portfolio_loss, run_sh_bracket, MatrixSet, SelectionTarget,
};
use metasel::{Allocation, Validation};

fn random_matrix(seed: u64, n_candidates: usize, n_datasets: usize) -> PerformanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let datasets: Vec<DatasetMeta> = (0..n_datasets)
        .map(|i| DatasetMeta {
            id: format!("d{i}"),
            n_samples: rng.gen_range(50..5000),
            n_features: rng.gen_range(2..100),
            loss_min: 0.0,
            loss_max: 1.0,
        })
        .collect();
    let candidates: Vec<String> = (0..n_candidates).map(|i| format!("c{i}")).collect();
    let mut entries = Vec::new();
    for c in &candidates {
        for d in &datasets {
            if rng.gen_bool(0.05) {
                entries.push((c.clone(), d.id.clone(), MatrixEntry::Failed));
                continue;
            }
            let mut val: f64 = rng.gen_range(0.2..1.0);
            let mut wall = rng.gen_range(1.0..10.0);
            let mut points = Vec::new();
            for budget in [1u64, 2, 4] {
                let test = (val + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                points.push((budget, val, test, wall));
                val *= rng.gen_range(0.5..1.0);
                wall += rng.gen_range(1.0..10.0);
            }
            entries.push((
                c.clone(),
                d.id.clone(),
                MatrixEntry::Curve(LearningCurve::from_tuples(&points).unwrap()),
            ));
        }
    }
    PerformanceMatrix::new(datasets, candidates, entries).unwrap()
}

fn subsets(n: usize) -> Vec<Vec<usize>> {
    (0..(1usize << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

fn members(matrix: &PerformanceMatrix, subset: &[usize]) -> Vec<String> {
    subset.iter().map(|&i| matrix.candidates()[i].clone()).collect()
}

fn reduction(
    matrix: &PerformanceMatrix,
    subset: &[usize],
    datasets: &[String],
    policy: &Policy,
    stats: &NormalizationStats,
) -> f64 {
    penalty_reduction(
        &members(matrix, subset),
        &MatrixSet::new(matrix),
        datasets,
        policy,
        SelectionTarget::Test,
        stats,
    )
    .unwrap()
}

/// Exhaustive monotonicity and submodularity check of the penalty-reduction
/// set function over all subsets of a five-candidate fixture.
fn check_monotone_submodular(policy: &Policy, seed: u64) {
    let matrix = random_matrix(seed, 5, 3);
    let datasets = matrix.dataset_ids();
    let stats = NormalizationStats::from_matrix(&matrix);
    let all = subsets(5);
    let mut values: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for s in &all {
        values.insert(s.clone(), reduction(&matrix, s, &datasets, policy, &stats));
    }
    for b in &all {
        for a in &all {
            if !a.iter().all(|x| b.contains(x)) {
                continue;
            }
            // Monotone: R(A) <= R(B).
            assert!(
                values[a] <= values[b] + 1e-9,
                "monotonicity violated: R({a:?}) = {} > R({b:?}) = {}",
                values[a],
                values[b]
            );
            for e in 0..5usize {
                if b.contains(&e) {
                    continue;
                }
                let mut ae = a.clone();
                ae.push(e);
                ae.sort_unstable();
                let mut be = b.clone();
                be.push(e);
                be.sort_unstable();
                let gain_a = values[&ae] - values[a];
                let gain_b = values[&be] - values[b];
                assert!(
                    gain_a >= gain_b - 1e-9,
                    "submodularity violated at e={e}, A={a:?}, B={b:?}: {gain_a} < {gain_b}"
                );
            }
        }
    }
}

#[test]
fn test_target_holdout_is_monotone_submodular() {
    let policy = Policy::new(Validation::Holdout, Allocation::FullBudget).unwrap();
    for seed in [1, 2, 3, 4] {
        check_monotone_submodular(&policy, seed);
    }
}

#[test]
fn test_target_cv_is_monotone_submodular() {
    let policy = Policy::new(Validation::Cv { folds: 3 }, Allocation::FullBudget).unwrap();
    for seed in [5, 6, 7, 8] {
        check_monotone_submodular(&policy, seed);
    }
}

/// Performance-space fixture for the validation-selection counterexample:
/// tuples are (validation, test) performance; losses are 10 - performance.
fn validation_counterexample_matrix() -> PerformanceMatrix {
    let perfs: [(&str, f64, f64); 4] =
        [("m1", 5.0, 5.0), ("m2", 7.0, 7.0), ("m3", 10.0, 10.0), ("e", 8.0, 6.0)];
    let datasets = vec![DatasetMeta {
        id: "d".into(),
        n_samples: 10,
        n_features: 2,
        loss_min: 0.0,
        loss_max: 10.0,
    }];
    let entries = perfs
        .iter()
        .map(|(c, v, t)| {
            (
                c.to_string(),
                "d".to_string(),
                MatrixEntry::Curve(
                    LearningCurve::from_tuples(&[(1, 10.0 - v, 10.0 - t, 1.0)]).unwrap(),
                ),
            )
        })
        .collect();
    PerformanceMatrix::new(datasets, perfs.iter().map(|(c, _, _)| c.to_string()).collect(), entries)
        .unwrap()
}

fn holdout_perf(matrix: &PerformanceMatrix, names: &[&str]) -> f64 {
    let policy = Policy::new(Validation::Holdout, Allocation::FullBudget).unwrap();
    let ids: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let trace = portfolio_loss(
        &ids,
        &MatrixSet::new(matrix),
        "d",
        &policy,
        SelectionTarget::Validation,
    )
    .unwrap();
    10.0 - trace.dataset_loss
}

/// Validation-set selection is neither submodular nor monotone: the
/// three-member fixture yields discrete derivatives -1 and 0.
#[test]
fn validation_selection_counterexample() {
    let matrix = validation_counterexample_matrix();
    let f_a = holdout_perf(&matrix, &["m1", "m2"]);
    let f_ae = holdout_perf(&matrix, &["m1", "m2", "e"]);
    let f_b = holdout_perf(&matrix, &["m1", "m2", "m3"]);
    let f_be = holdout_perf(&matrix, &["m1", "m2", "m3", "e"]);
    assert_eq!(f_a, 7.0);
    assert_eq!(f_ae, 6.0);
    assert_eq!(f_ae - f_a, -1.0);
    assert_eq!(f_be - f_b, 0.0);
    // Submodularity needs gain(A) >= gain(B); monotonicity needs gain >= 0.
    assert!(f_ae - f_a < f_be - f_b);
    assert!(f_ae - f_a < 0.0);
}

/// Successive-halving counterexample: learning-curve tuples in performance
/// space, two rungs, half the candidates advance.
fn sh_counterexample_matrix() -> PerformanceMatrix {
    let curves: [(&str, (f64, f64), (f64, f64)); 5] = [
        ("b1", (5.0, 5.0), (8.0, 8.0)),
        ("b2", (5.0, 5.0), (6.0, 6.0)),
        ("b3", (4.0, 4.0), (5.0, 5.0)),
        ("a1", (5.0, 5.0), (7.0, 7.0)),
        ("e", (6.0, 5.0), (6.0, 5.0)),
    ];
    let datasets = vec![DatasetMeta {
        id: "d".into(),
        n_samples: 10,
        n_features: 2,
        loss_min: 0.0,
        loss_max: 10.0,
    }];
    let entries = curves
        .iter()
        .map(|(c, (v1, t1), (v2, t2))| {
            (
                c.to_string(),
                "d".to_string(),
                MatrixEntry::Curve(
                    LearningCurve::from_tuples(&[
                        (1, 10.0 - v1, 10.0 - t1, 1.0),
                        (2, 10.0 - v2, 10.0 - t2, 2.0),
                    ])
                    .unwrap(),
                ),
            )
        })
        .collect();
    PerformanceMatrix::new(
        datasets,
        curves.iter().map(|(c, _, _)| c.to_string()).collect(),
        entries,
    )
    .unwrap()
}

fn sh_perf(matrix: &PerformanceMatrix, names: &[&str]) -> f64 {
    let schedule = make_sh_schedule(2.0, 1, 2).unwrap();
    let ids: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let trace =
        run_sh_bracket(&ids, matrix, "d", &schedule, SelectionTarget::Validation).unwrap();
    10.0 - trace.dataset_loss
}

#[test]
fn successive_halving_counterexample() {
    let matrix = sh_counterexample_matrix();
    let f_a = sh_perf(&matrix, &["a1"]);
    let f_ae = sh_perf(&matrix, &["a1", "e"]);
    let f_b = sh_perf(&matrix, &["b1", "b2", "b3"]);
    let f_be = sh_perf(&matrix, &["b1", "b2", "b3", "e"]);
    assert_eq!(f_ae, 5.0);
    assert_eq!(f_be, 8.0);
    assert_eq!(f_a, 7.0);
    assert_eq!(f_b, 8.0);
    // Adding e hurts the small portfolio and leaves the large one unchanged.
    assert!(f_ae - f_a < 0.0);
    assert!(f_be - f_b >= 0.0);
    assert!(f_ae - f_a < f_be - f_b);
}
