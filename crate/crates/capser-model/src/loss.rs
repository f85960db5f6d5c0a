//! Training objectives: margin loss over capsule lengths, cross-entropy over
//! softmax scores, and the domain-disparity objective used for adaptation.
//!
//! All functions append nodes to the caller's tape and return the scalar (or
//! per-item) node id, so several objectives can be combined before a single
//! backward pass.

use capser_tensor::{Tape, TensorId};

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Probabilities are clamped here before `log` so exact zeros stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Margin-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginHyper {
    /// Present-class margin: the true capsule is pushed above this length.
    pub pos_margin: f64,
    /// Absent-class margin: other capsules are pushed below this length.
    pub neg_margin: f64,
    /// Down-weighting of the absent-class terms.
    pub neg_weight: f64,
}

impl Default for MarginHyper {
    fn default() -> Self {
        Self {
            pos_margin: 0.9,
            neg_margin: 0.1,
            neg_weight: 0.5,
        }
    }
}

/// How a per-item loss vector is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Which side of a transfer task a batch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Labelled corpus the classifier trains on.
    Source,
    /// Unlabelled corpus the model adapts to.
    Target,
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(ModelError::Contract(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(ModelError::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn one_hot(tape: &mut Tape, labels: &[usize], k: usize) -> Result<TensorId> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = 1.0;
    }
    Ok(tape.constant(&[labels.len(), k], &data)?)
}

/// Margin loss over class-capsule lengths.
///
/// For each item with true class `t`, capsule lengths `v_k`:
/// `max(0, pos_margin - v_t)^2 + neg_weight * sum_{k != t} max(0, v_k - neg_margin)^2`.
/// An exactly satisfied margin contributes neither loss nor gradient.
///
/// `digit_caps` has shape `[N, num_classes, digit_dim]`; the returned node is
/// the scalar reduction over the batch.
pub fn margin_loss(
    tape: &mut Tape,
    digit_caps: TensorId,
    labels: &[usize],
    hyper: &MarginHyper,
    reduction: Reduction,
) -> Result<TensorId> {
    let shape = tape.shape(digit_caps).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Contract(format!(
            "margin loss expects [N, classes, dim] capsules, got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    check_labels(labels, n, k)?;

    let lengths = tape.row_norms(digit_caps)?; // [n, k]

    let neg_len = tape.scale(lengths, -1.0)?;
    let pos_gap = tape.add_scalar(neg_len, hyper.pos_margin)?;
    let pos_hinge = tape.clamp_min(pos_gap, 0.0)?;
    let pos_sq = tape.mul(pos_hinge, pos_hinge)?;

    let neg_gap = tape.add_scalar(lengths, -hyper.neg_margin)?;
    let neg_hinge = tape.clamp_min(neg_gap, 0.0)?;
    let neg_sq = tape.mul(neg_hinge, neg_hinge)?;

    let present = one_hot(tape, labels, k)?;
    let mut absent_data = vec![1.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        absent_data[i * k + l] = 0.0;
    }
    let absent = tape.constant(&[n, k], &absent_data)?;

    let pos_term = tape.mul(present, pos_sq)?;
    let neg_term = tape.mul(absent, neg_sq)?;
    let neg_weighted = tape.scale(neg_term, hyper.neg_weight)?;
    let combined = tape.add(pos_term, neg_weighted)?;
    let per_item = tape.sum_axis(combined, 1)?;

    Ok(match reduction {
        Reduction::Mean => tape.mean_all(per_item)?,
        Reduction::Sum => tape.sum_all(per_item)?,
    })
}

/// Mean negative log-probability of the true class. `probs` are clamped at
/// [`PROB_FLOOR`] so zero probabilities stay finite.
pub fn cross_entropy(tape: &mut Tape, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(ModelError::Contract(format!(
            "cross-entropy expects [N, classes] probabilities, got {shape:?}"
        )));
    }
    check_labels(labels, shape[0], shape[1])?;
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let hot = one_hot(tape, labels, shape[1])?;
    let picked = tape.mul(hot, logp)?;
    let per_item = tape.sum_axis(picked, 1)?;
    let neg = tape.scale(per_item, -1.0)?;
    Ok(tape.mean_all(neg)?)
}

/// How confidently an auxiliary scorer agrees with the main classifier on one
/// domain's batch.
///
/// Pseudo-labels are the argmax of `main_probs`, read off-tape so no gradient
/// flows into the main classifier through them. For source batches this is
/// the cross-entropy of the auxiliary scores against the pseudo-labels; for
/// target batches the roles flip: it scores the probability the auxiliary head
/// puts *elsewhere* (`-log(1 - p)`), so a large value means the heads disagree
/// about the target domain.
pub fn disparity(
    tape: &mut Tape,
    main_probs: TensorId,
    adv_probs: TensorId,
    domain: Domain,
) -> Result<TensorId> {
    let shape = tape.shape(main_probs).to_vec();
    if shape.len() != 2 || tape.shape(adv_probs) != shape.as_slice() {
        return Err(ModelError::Contract(format!(
            "disparity expects matching [N, classes] scores, got {shape:?} and {:?}",
            tape.shape(adv_probs)
        )));
    }
    let k = shape[1];
    let pseudo: Vec<usize> = tape
        .data(main_probs)
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let hot = one_hot(tape, &pseudo, k)?;
    let picked_terms = tape.mul(adv_probs, hot)?;
    let picked = tape.sum_axis(picked_terms, 1)?; // [n]
    let chosen = match domain {
        Domain::Source => picked,
        Domain::Target => {
            let neg = tape.scale(picked, -1.0)?;
            tape.add_scalar(neg, 1.0)?
        }
    };
    let clamped = tape.clamp_min(chosen, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let neg = tape.scale(logp, -1.0)?;
    Ok(tape.mean_all(neg)?)
}

/// Weighted disparity gap `target_disparity - gamma * source_disparity`. The
/// auxiliary head is trained to widen this gap; the shared extractor (through
/// gradient reversal) to narrow it.
pub fn adapt_gap(
    tape: &mut Tape,
    source_disp: TensorId,
    target_disp: TensorId,
    gamma: f64,
) -> Result<TensorId> {
    for (name, id) in [("source", source_disp), ("target", target_disp)] {
        if tape.data(id).len() != 1 {
            return Err(ModelError::Contract(format!(
                "{name} disparity must be scalar, got shape {:?}",
                tape.shape(id)
            )));
        }
    }
    let scaled = tape.scale(source_disp, gamma)?;
    Ok(tape.sub(target_disp, scaled)?)
}

/// Total transfer objective `classification + eta * gap`.
pub fn combined_objective(
    tape: &mut Tape,
    classification: TensorId,
    gap: TensorId,
    eta: f64,
) -> Result<TensorId> {
    for (name, id) in [("classification", classification), ("gap", gap)] {
        if tape.data(id).len() != 1 {
            return Err(ModelError::Contract(format!(
                "{name} term must be scalar, got shape {:?}",
                tape.shape(id)
            )));
        }
    }
    let scaled = tape.scale(gap, eta)?;
    Ok(tape.add(classification, scaled)?)
}
