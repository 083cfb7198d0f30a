//! Loss normalization (ADTM), sampled rank aggregation and the two
//! statistical tests used by the evaluation harness.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::data::PerformanceMatrix;
use crate::derive_seed;
use crate::error::{Error, Result};

/// Per-dataset (loss_min, loss_max) statistics for zero-one rescaling.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    per_dataset: BTreeMap<String, (f64, f64)>,
}

impl NormalizationStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stats from a matrix's declared per-dataset loss bounds.
    pub fn from_matrix(matrix: &PerformanceMatrix) -> Self {
        let per_dataset = matrix
            .datasets()
            .iter()
            .map(|d| (d.id.clone(), (d.loss_min, d.loss_max)))
            .collect();
        NormalizationStats { per_dataset }
    }

    /// Stats pooled from observed per-dataset losses, e.g. across the final
    /// per-policy results rather than the raw matrix bounds.
    pub fn from_observations<'a>(
        observations: impl IntoIterator<Item = (&'a str, f64)>,
    ) -> Self {
        let mut per_dataset: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (dataset, loss) in observations {
            let e = per_dataset
                .entry(dataset.to_string())
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(loss);
            e.1 = e.1.max(loss);
        }
        NormalizationStats { per_dataset }
    }

    pub fn insert(&mut self, dataset: impl Into<String>, loss_min: f64, loss_max: f64) {
        self.per_dataset.insert(dataset.into(), (loss_min, loss_max));
    }

    pub fn bounds(&self, dataset: &str) -> Result<(f64, f64)> {
        self.per_dataset
            .get(dataset)
            .copied()
            .ok_or_else(|| Error::UnknownId { kind: "dataset", id: dataset.to_string() })
    }

    pub fn contains(&self, dataset: &str) -> bool {
        self.per_dataset.contains_key(dataset)
    }
}

/// Distance of a loss to the best observed value, rescaled to [0, 1].
///
/// Clamped so out-of-range losses on new data cannot yield negative regret;
/// a degenerate dataset (min == max) maps everything to 0.
pub fn normalize_loss(loss: f64, stats: &NormalizationStats, dataset: &str) -> Result<f64> {
    let (lo, hi) = stats.bounds(dataset)?;
    if hi <= lo {
        return Ok(0.0);
    }
    Ok(((loss - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Average distance to the minimum: the mean of normalized losses over
/// datasets.
pub fn adtm(per_dataset_losses: &BTreeMap<String, f64>, stats: &NormalizationStats) -> Result<f64> {
    if per_dataset_losses.is_empty() {
        return Err(Error::validation("adtm over an empty dataset set"));
    }
    let mut sum = 0.0;
    for (dataset, &loss) in per_dataset_losses {
        sum += normalize_loss(loss, stats, dataset)?;
    }
    Ok(sum / per_dataset_losses.len() as f64)
}

/// Sampled average ranks: per dataset, draw one repetition per method and
/// rank the draws (mean ranks on ties); repeat `n_draws` times, average, then
/// average across datasets. Deterministic given the seed; per-dataset draws
/// use independently derived generators so datasets can be processed in
/// parallel without changing results.
pub fn average_rank(
    results: &BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    n_draws: u32,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    if results.is_empty() {
        return Err(Error::validation("average_rank with no methods"));
    }
    if n_draws == 0 {
        return Err(Error::validation("average_rank needs n_draws >= 1"));
    }
    let methods: Vec<&String> = results.keys().collect();
    let datasets: Vec<&String> = results[methods[0]].keys().collect();
    for m in &methods {
        let ds: Vec<&String> = results[*m].keys().collect();
        if ds != datasets {
            return Err(Error::validation(format!(
                "method \"{m}\" covers a different dataset set"
            )));
        }
        for d in &ds {
            if results[*m][*d].is_empty() {
                return Err(Error::validation(format!(
                    "method \"{m}\" has no repetitions on dataset \"{d}\""
                )));
            }
        }
    }

    let per_dataset: Vec<Vec<f64>> = datasets
        .par_iter()
        .enumerate()
        .map(|(di, dataset)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, di as u64));
            let mut totals = vec![0.0; methods.len()];
            let mut draws = vec![0.0; methods.len()];
            for _ in 0..n_draws {
                for (mi, m) in methods.iter().enumerate() {
                    let reps = &results[*m][*dataset];
                    draws[mi] = reps[rng.gen_range(0..reps.len())];
                }
                let ranks = rank_with_ties(&draws);
                for (t, r) in totals.iter_mut().zip(&ranks) {
                    *t += r;
                }
            }
            totals.iter().map(|t| t / n_draws as f64).collect()
        })
        .collect();

    let mut out = BTreeMap::new();
    for (mi, m) in methods.iter().enumerate() {
        let mean = per_dataset.iter().map(|v| v[mi]).sum::<f64>() / datasets.len() as f64;
        out.insert((*m).clone(), mean);
    }
    Ok(out)
}

/// Ascending 1-based ranks with arithmetic-mean ranks for ties.
pub fn rank_with_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact binomial sign test with success probability one half.
/// Ties are excluded by the caller.
pub fn sign_test(wins: u64, losses: u64) -> Result<f64> {
    let n = wins + losses;
    if n < 1 {
        return Err(Error::validation("sign test needs wins + losses >= 1"));
    }
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    let p_low = dist.cdf(wins);
    let p_high = if wins == 0 { 1.0 } else { 1.0 - dist.cdf(wins - 1) };
    Ok((2.0 * p_low.min(p_high)).min(1.0))
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; all-zero input is defined as p = 1.0.
/// Uses the exact permutation distribution for n <= 25 and the normal
/// approximation with tie correction beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("wilcoxon needs equally long samples"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::validation(format!(
            "wilcoxon needs >= 5 nonzero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = rank_with_ties(&abs);
    let w_pos: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    if n <= 25 {
        // Mean ranks are multiples of 1/2; doubling gives exact integers.
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total: u64 = doubled.iter().sum();
        // counts[s] = number of sign assignments with doubled positive-rank sum s
        let mut counts = vec![0.0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let w2 = (2.0 * w_pos).round() as usize;
        let low: f64 = counts[..=w2].iter().sum();
        let high: f64 = counts[w2..].iter().sum();
        let assignments = 2.0f64.powi(n as i32);
        Ok((2.0 * low.min(high) / assignments).min(1.0))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        let mut sorted = abs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_pos - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        Ok((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0))
    }
}
