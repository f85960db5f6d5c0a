//! Confusion matrices, recall metrics, and batched model evaluation.
//!
//! Two recall aggregates are reported everywhere:
//!
//! * **WAR** (weighted average recall) — per-class recall weighted by class
//!   frequency, which reduces to overall accuracy:
//!   `trace(confusion) / sum(confusion)`.
//! * **UAR** (unweighted average recall) — the plain mean of per-class
//!   recalls over the classes that actually occur in the truth labels.

use capser_audio::MfccFeatures;
use capser_model::{adapted_predict, forward, predict, AdaptParams, ModelConfig, ModelParams};
use capser_tensor::seeding::child_rng;
use capser_tensor::{Mode, Tape};
use serde::Serialize;

use crate::error::{HarnessError, Result};

/// Utterances scored per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Weighted average recall (overall accuracy).
    pub war: f64,
    /// Unweighted average recall over classes present in the truths.
    pub uar: f64,
}

/// Builds the confusion matrix and both recall aggregates from parallel
/// prediction/truth sequences over a `num_classes`-way label space.
pub fn evaluate(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(HarnessError::Contract(
            "cannot evaluate an empty prediction sequence".into(),
        ));
    }
    if predictions.len() != truths.len() {
        return Err(HarnessError::Contract(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= num_classes || t >= num_classes {
            return Err(HarnessError::Contract(format!(
                "label pair ({t}, {p}) outside the {num_classes}-class space"
            )));
        }
        confusion[t][p] += 1;
    }

    let total: usize = truths.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let war = correct as f64 / total as f64;

    let mut recalls = Vec::new();
    for (c, row) in confusion.iter().enumerate() {
        let row_total: usize = row.iter().sum();
        if row_total > 0 {
            recalls.push(confusion[c][c] as f64 / row_total as f64);
        }
    }
    let uar = recalls.iter().sum::<f64>() / recalls.len() as f64;

    Ok(EvalReport {
        confusion,
        war,
        uar,
    })
}

/// Eval-mode class predictions of a standalone classifier (argmax of the
/// capsule lengths), computed in batches.
pub fn classifier_predictions(
    cfg: &ModelConfig,
    params: &ModelParams,
    feats: &[&MfccFeatures],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        // Eval mode never samples, so the rng stream is inert.
        let mut rng = child_rng(0, "eval");
        let (acts, _) = forward(&mut tape, params, cfg, chunk, Mode::Eval, &mut rng)?;
        out.extend(predict(&tape, acts.lengths));
    }
    Ok(out)
}

/// Eval-mode class predictions of an adapted model's main head, computed in
/// batches.
pub fn adapted_predictions(
    cfg: &ModelConfig,
    params: &AdaptParams,
    feats: &[&MfccFeatures],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(EVAL_BATCH) {
        out.extend(adapted_predict(params, cfg, chunk)?);
    }
    Ok(out)
}

/// Runs a classifier over labelled features and reports the metrics.
pub fn classifier_report(
    cfg: &ModelConfig,
    params: &ModelParams,
    feats: &[&MfccFeatures],
    truths: &[usize],
    num_classes: usize,
) -> Result<EvalReport> {
    let predictions = classifier_predictions(cfg, params, feats)?;
    evaluate(&predictions, truths, num_classes)
}

/// Runs an adapted model's main head over labelled features and reports the
/// metrics.
pub fn adapted_report(
    cfg: &ModelConfig,
    params: &AdaptParams,
    feats: &[&MfccFeatures],
    truths: &[usize],
    num_classes: usize,
) -> Result<EvalReport> {
    let predictions = adapted_predictions(cfg, params, feats)?;
    evaluate(&predictions, truths, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let r = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.war, 1.0);
        assert_eq!(r.uar, 1.0);
        assert_eq!(r.confusion[1][1], 2);
    }

    #[test]
    fn hand_computed_confusion_example() {
        // truths [0,0,0,1], predictions [0,0,1,1]:
        //   class 0 recall 2/3, class 1 recall 1.
        let r = evaluate(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(r.war, 0.75);
        assert_eq!(r.uar, (2.0 / 3.0 + 1.0) / 2.0);
        assert_eq!(r.confusion, vec![vec![2, 1], vec![0, 1]]);
    }

    #[test]
    fn uniform_recall_collapses_war_and_uar() {
        // Both classes have recall 1/2 and equal frequency.
        let r = evaluate(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.war, 0.5);
        assert_eq!(r.uar, 0.5);
    }

    #[test]
    fn absent_classes_leave_the_uar_mean() {
        // Class 2 never occurs in the truths: UAR averages two classes.
        let r = evaluate(&[0, 2], &[0, 1], 3).unwrap();
        assert_eq!(r.uar, 0.5);
        assert_eq!(r.war, 0.5);
    }

    #[test]
    fn war_matches_confusion_exactly() {
        let preds = [0, 1, 2, 0, 1, 2, 2, 1];
        let truths = [0, 0, 0, 1, 1, 2, 2, 2];
        let r = evaluate(&preds, &truths, 3).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(total, preds.len());
        assert_eq!(r.war, trace as f64 / total as f64);
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        assert!(matches!(
            evaluate(&[], &[], 2),
            Err(HarnessError::Contract(_))
        ));
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
        assert!(evaluate(&[5], &[0], 2).is_err());
    }
}
