//! Greedy post-hoc ensemble selection over stored prediction vectors.
//!
//! Models are added with replacement, one per step, each step picking the
//! model whose inclusion minimizes the validation loss of the averaged
//! probability ensemble.
//!
//! Prediction sets can be read from a flat binary file with the layout
//! (all little-endian):
//!
//! ```text
//! u32 n_models | u32 n_val_instances | u32 n_test_instances | u32 n_classes
//! u32 loss_kind            (0 = balanced error rate, 1 = log loss, 2 = 1 - AUC)
//! f64 * n_models*n_val_instances*n_classes     validation predictions,
//!                                              model-major then row-major
//! f64 * n_models*n_test_instances*n_classes    test predictions
//! u32 * n_val_instances                        validation labels
//! u32 * n_test_instances                       test labels
//! ```

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Loss computed on predicted probability rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// One minus balanced accuracy over argmax predictions.
    BalancedErrorRate,
    /// Negative mean log-probability of the true class.
    LogLoss,
    /// One minus the rank-statistic AUC; binary tasks only.
    OneMinusAuc,
}

impl LossKind {
    fn code(self) -> u32 {
        match self {
            LossKind::BalancedErrorRate => 0,
            LossKind::LogLoss => 1,
            LossKind::OneMinusAuc => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => LossKind::BalancedErrorRate,
            1 => LossKind::LogLoss,
            2 => LossKind::OneMinusAuc,
            other => return Err(Error::parse(format!("unknown loss kind {other}"))),
        })
    }
}

/// Per-model validation/test probability predictions plus labels.
///
/// Probability rows sum to one within 1e-6; instance and class counts are
/// consistent across models.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    n_models: usize,
    n_classes: usize,
    /// `val[m]` is row-major n_val x n_classes.
    val: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
    val_labels: Vec<u32>,
    test_labels: Vec<u32>,
    loss: LossKind,
}

impl PredictionSet {
    pub fn new(
        val: Vec<Vec<f64>>,
        test: Vec<Vec<f64>>,
        val_labels: Vec<u32>,
        test_labels: Vec<u32>,
        n_classes: usize,
        loss: LossKind,
    ) -> Result<Self> {
        if val.is_empty() || val.len() != test.len() {
            return Err(Error::validation("prediction set needs >= 1 model on both splits"));
        }
        if n_classes < 2 {
            return Err(Error::validation("prediction set needs >= 2 classes"));
        }
        let n_models = val.len();
        for (split, preds, labels) in
            [("validation", &val, &val_labels), ("test", &test, &test_labels)]
        {
            let expect = labels.len() * n_classes;
            for (m, rows) in preds.iter().enumerate() {
                if rows.len() != expect {
                    return Err(Error::validation(format!(
                        "model {m} {split} predictions have {} values, expected {expect}",
                        rows.len()
                    )));
                }
                for row in rows.chunks(n_classes) {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::validation(format!(
                            "model {m} {split} probability row sums to {sum}"
                        )));
                    }
                }
            }
            if labels.iter().any(|&l| l as usize >= n_classes) {
                return Err(Error::validation(format!("{split} label out of range")));
            }
        }
        Ok(PredictionSet { n_models, n_classes, val, test, val_labels, test_labels, loss })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Validation loss of a single model.
    pub fn model_val_loss(&self, model: usize) -> f64 {
        compute_loss(self.loss, &self.val[model], &self.val_labels, self.n_classes)
    }

    pub fn read_binary(mut source: impl Read) -> Result<Self> {
        let n_models = source.read_u32::<LittleEndian>()? as usize;
        let n_val = source.read_u32::<LittleEndian>()? as usize;
        let n_test = source.read_u32::<LittleEndian>()? as usize;
        let n_classes = source.read_u32::<LittleEndian>()? as usize;
        let loss = LossKind::from_code(source.read_u32::<LittleEndian>()?)?;
        let mut read_block = |instances: usize| -> Result<Vec<Vec<f64>>> {
            (0..n_models)
                .map(|_| {
                    let mut block = vec![0.0; instances * n_classes];
                    source.read_f64_into::<LittleEndian>(&mut block)?;
                    Ok(block)
                })
                .collect()
        };
        let val = read_block(n_val)?;
        let test = read_block(n_test)?;
        let mut val_labels = vec![0u32; n_val];
        source.read_u32_into::<LittleEndian>(&mut val_labels)?;
        let mut test_labels = vec![0u32; n_test];
        source.read_u32_into::<LittleEndian>(&mut test_labels)?;
        Self::new(val, test, val_labels, test_labels, n_classes, loss)
    }

    pub fn write_binary(&self, mut sink: impl Write) -> Result<()> {
        sink.write_u32::<LittleEndian>(self.n_models as u32)?;
        sink.write_u32::<LittleEndian>(self.val_labels.len() as u32)?;
        sink.write_u32::<LittleEndian>(self.test_labels.len() as u32)?;
        sink.write_u32::<LittleEndian>(self.n_classes as u32)?;
        sink.write_u32::<LittleEndian>(self.loss.code())?;
        for block in self.val.iter().chain(&self.test) {
            for v in block {
                sink.write_f64::<LittleEndian>(*v)?;
            }
        }
        for l in self.val_labels.iter().chain(&self.test_labels) {
            sink.write_u32::<LittleEndian>(*l)?;
        }
        Ok(())
    }
}

/// Greedy with-replacement ensemble selection: returns per-model counts
/// summing to `size`. Ties go to the lowest model index.
pub fn ensemble_select(preds: &PredictionSet, size: u32) -> Result<Vec<u32>> {
    if size < 1 {
        return Err(Error::validation("ensemble size must be >= 1"));
    }
    let n_classes = preds.n_classes;
    let mut counts = vec![0u32; preds.n_models];
    let mut sum = vec![0.0f64; preds.val[0].len()];
    for step in 0..size {
        let k = (step + 1) as f64;
        let losses: Vec<f64> = preds
            .val
            .par_iter()
            .map(|model| {
                let mixed: Vec<f64> = sum
                    .iter()
                    .zip(model)
                    .map(|(s, m)| (s + m) / k)
                    .collect();
                compute_loss(preds.loss, &mixed, &preds.val_labels, n_classes)
            })
            .collect();
        let mut best = 0;
        for (i, l) in losses.iter().enumerate().skip(1) {
            if *l < losses[best] {
                best = i;
            }
        }
        counts[best] += 1;
        for (s, m) in sum.iter_mut().zip(&preds.val[best]) {
            *s += m;
        }
    }
    Ok(counts)
}

/// Weighted-average predictions of an ensemble and its losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEvaluation {
    pub val_loss: f64,
    pub test_loss: f64,
    pub val_predictions: Vec<f64>,
    pub test_predictions: Vec<f64>,
}

/// Evaluates weights produced by [`ensemble_select`]: the weighted mean of
/// the model probability matrices, scored with the set's loss function.
pub fn ensemble_predict(weights: &[u32], preds: &PredictionSet) -> Result<EnsembleEvaluation> {
    if weights.len() != preds.n_models {
        return Err(Error::validation("one weight per model required"));
    }
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total == 0 {
        return Err(Error::validation("ensemble weights sum to zero"));
    }
    let mix = |blocks: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; blocks[0].len()];
        for (model, &w) in blocks.iter().zip(weights) {
            if w == 0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(model) {
                *o += v * w as f64;
            }
        }
        for o in out.iter_mut() {
            *o /= total as f64;
        }
        out
    };
    let val_predictions = mix(&preds.val);
    let test_predictions = mix(&preds.test);
    Ok(EnsembleEvaluation {
        val_loss: compute_loss(preds.loss, &val_predictions, &preds.val_labels, preds.n_classes),
        test_loss: compute_loss(preds.loss, &test_predictions, &preds.test_labels, preds.n_classes),
        val_predictions,
        test_predictions,
    })
}

fn compute_loss(kind: LossKind, probs: &[f64], labels: &[u32], n_classes: usize) -> f64 {
    match kind {
        LossKind::BalancedErrorRate => balanced_error_rate(probs, labels, n_classes),
        LossKind::LogLoss => log_loss(probs, labels, n_classes),
        LossKind::OneMinusAuc => 1.0 - binary_auc(probs, labels, n_classes),
    }
}

/// One minus the mean per-class recall of argmax predictions, averaged over
/// the classes present in the labels.
fn balanced_error_rate(probs: &[f64], labels: &[u32], n_classes: usize) -> f64 {
    let mut correct = vec![0u64; n_classes];
    let mut count = vec![0u64; n_classes];
    for (row, &label) in probs.chunks(n_classes).zip(labels) {
        let mut arg = 0;
        for (c, p) in row.iter().enumerate().skip(1) {
            if *p > row[arg] {
                arg = c;
            }
        }
        count[label as usize] += 1;
        if arg == label as usize {
            correct[label as usize] += 1;
        }
    }
    let mut recall_sum = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if count[c] > 0 {
            recall_sum += correct[c] as f64 / count[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return 0.0;
    }
    1.0 - recall_sum / present as f64
}

fn log_loss(probs: &[f64], labels: &[u32], n_classes: usize) -> f64 {
    let mut sum = 0.0;
    for (row, &label) in probs.chunks(n_classes).zip(labels) {
        sum -= row[label as usize].max(1e-15).ln();
    }
    sum / labels.len() as f64
}

/// Rank-statistic AUC of the positive-class probability; ties get half
/// credit. Degenerate single-class labels score 0.5.
fn binary_auc(probs: &[f64], labels: &[u32], n_classes: usize) -> f64 {
    let scores: Vec<f64> = probs.chunks(n_classes).map(|row| row[1]).collect();
    let ranks = crate::metrics::rank_with_ties(&scores);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| *r).sum();
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-class prediction set from per-model positive-class validation
    /// probabilities; test split mirrors validation.
    fn from_positive_probs(models: &[Vec<f64>], labels: &[u32], loss: LossKind) -> PredictionSet {
        let blocks: Vec<Vec<f64>> = models
            .iter()
            .map(|probs| probs.iter().flat_map(|p| [1.0 - p, *p]).collect())
            .collect();
        PredictionSet::new(blocks.clone(), blocks, labels.to_vec(), labels.to_vec(), 2, loss)
            .unwrap()
    }

    #[test]
    fn single_model_takes_all_weight() {
        let preds = from_positive_probs(&[vec![0.9, 0.2, 0.8]], &[1, 0, 1], LossKind::LogLoss);
        let weights = ensemble_select(&preds, 50).unwrap();
        assert_eq!(weights, vec![50]);
    }

    #[test]
    fn dominant_model_wins_every_step() {
        let preds = from_positive_probs(
            &[vec![0.99, 0.01, 0.99, 0.01], vec![0.6, 0.4, 0.6, 0.4]],
            &[1, 0, 1, 0],
            LossKind::LogLoss,
        );
        let weights = ensemble_select(&preds, 50).unwrap();
        assert_eq!(weights, vec![50, 0]);
    }

    #[test]
    fn greedy_three_steps_match_exhaustive_search() {
        // Complementary errors across three models.
        let labels = [1u32, 1, 0, 0, 1, 0];
        let models = vec![
            vec![0.9, 0.4, 0.2, 0.45, 0.6, 0.3],
            vec![0.55, 0.9, 0.45, 0.1, 0.4, 0.4],
            vec![0.6, 0.5, 0.4, 0.4, 0.95, 0.05],
        ];
        let preds = from_positive_probs(&models, &labels, LossKind::LogLoss);
        let weights = ensemble_select(&preds, 3).unwrap();
        let greedy_loss = ensemble_predict(&weights, &preds).unwrap().val_loss;

        // Oracle: every multiset of size 3 over three models.
        let mut best = f64::INFINITY;
        for a in 0..=3u32 {
            for b in 0..=(3 - a) {
                let c = 3 - a - b;
                let loss = ensemble_predict(&[a, b, c], &preds).unwrap().val_loss;
                best = best.min(loss);
            }
        }
        assert!((greedy_loss - best).abs() < 1e-12, "greedy {greedy_loss} vs oracle {best}");
    }

    #[test]
    fn ensemble_never_worse_than_best_single_model_logloss() {
        let labels = [1u32, 0, 1, 0, 1, 1, 0];
        let models = vec![
            vec![0.8, 0.3, 0.6, 0.4, 0.55, 0.7, 0.2],
            vec![0.7, 0.2, 0.4, 0.6, 0.65, 0.55, 0.35],
            vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        ];
        let preds = from_positive_probs(&models, &labels, LossKind::LogLoss);
        let weights = ensemble_select(&preds, 50).unwrap();
        assert_eq!(weights.iter().sum::<u32>(), 50);
        let ens = ensemble_predict(&weights, &preds).unwrap().val_loss;
        let best_single =
            (0..3).map(|m| preds.model_val_loss(m)).fold(f64::INFINITY, f64::min);
        assert!(ens <= best_single + 1e-12);
    }

    #[test]
    fn predict_weight_on_one_model_reproduces_it() {
        let preds = from_positive_probs(
            &[vec![0.9, 0.2], vec![0.3, 0.7]],
            &[1, 0],
            LossKind::BalancedErrorRate,
        );
        let eval = ensemble_predict(&[0, 3], &preds).unwrap();
        assert_eq!(eval.val_loss, preds.model_val_loss(1));
        assert!(ensemble_predict(&[0, 0], &preds).is_err());
    }

    #[test]
    fn equal_weights_on_identical_models_change_nothing() {
        let probs = vec![0.9, 0.2, 0.7];
        let preds = from_positive_probs(
            &[probs.clone(), probs.clone()],
            &[1, 0, 1],
            LossKind::LogLoss,
        );
        let one = ensemble_predict(&[1, 0], &preds).unwrap();
        let both = ensemble_predict(&[2, 2], &preds).unwrap();
        assert_eq!(one.val_predictions, both.val_predictions);
    }

    #[test]
    fn weighted_average_matches_hand_computation() {
        let preds = from_positive_probs(
            &[vec![0.8, 0.4], vec![0.2, 0.6]],
            &[1, 0],
            LossKind::LogLoss,
        );
        let eval = ensemble_predict(&[3, 1], &preds).unwrap();
        // Positive-class column: (3*0.8 + 0.2)/4 = 0.65 and (3*0.4 + 0.6)/4 = 0.45.
        assert!((eval.val_predictions[1] - 0.65).abs() < 1e-12);
        assert!((eval.val_predictions[3] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn balanced_error_rate_values() {
        // Model predicts class 1 everywhere: recall 1.0 on class 1, 0.0 on class 0.
        let preds = from_positive_probs(
            &[vec![0.9, 0.9, 0.9, 0.9]],
            &[1, 1, 0, 0],
            LossKind::BalancedErrorRate,
        );
        assert!((preds.model_val_loss(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_class_labels_still_score() {
        let preds = from_positive_probs(&[vec![0.9, 0.8]], &[1, 1], LossKind::BalancedErrorRate);
        assert_eq!(preds.model_val_loss(0), 0.0);
        let weights = ensemble_select(&preds, 5).unwrap();
        assert_eq!(weights.iter().sum::<u32>(), 5);
    }

    #[test]
    fn auc_with_ties_and_binary_roundtrip() {
        let preds = from_positive_probs(
            &[vec![0.9, 0.5, 0.5, 0.1]],
            &[1, 1, 0, 0],
            LossKind::OneMinusAuc,
        );
        // ranks of (0.9,.5,.5,.1) = (4, 2.5, 2.5, 1); AUC = (6.5 - 3)/4 = 0.875
        assert!((preds.model_val_loss(0) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn binary_format_roundtrip() {
        let preds = from_positive_probs(
            &[vec![0.9, 0.2, 0.7], vec![0.4, 0.6, 0.5]],
            &[1, 0, 1],
            LossKind::BalancedErrorRate,
        );
        let mut bytes = Vec::new();
        preds.write_binary(&mut bytes).unwrap();
        let back = PredictionSet::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(preds, back);
    }

    #[test]
    fn rejects_bad_probability_rows() {
        let result = PredictionSet::new(
            vec![vec![0.7, 0.7]],
            vec![vec![0.5, 0.5]],
            vec![0],
            vec![1],
            2,
            LossKind::LogLoss,
        );
        assert!(result.is_err());
    }
}
