//! Training loops: margin-loss classification and adversarial adaptation.
//!
//! Both loops derive every random stream from `(seed, label)` pairs — fold
//! shuffles, per-step dropout masks, and parameter initialization — so a
//! run is a pure function of its configuration. The adaptation loop's
//! per-step streams match [`capser_model::adapt_step`]'s convention, which
//! is what makes the `eta = 0` run bit-identical to the source-only
//! baseline.

use capser_audio::{pad_or_truncate, MfccFeatures};
use capser_model::{
    adapt_step, forward, margin_loss, AdaptHyper, AdaptParams, DomainBatch, MarginHyper,
    ModelConfig, ModelError, ModelParams, Reduction,
};
use capser_model::{collect_grads, update_running_stats};
use capser_tensor::seeding::{child_rng, child_seed};
use capser_tensor::{Adam, AdamConfig, Mode, Tape};
use rand::seq::SliceRandom;

use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};
use crate::eval::adapted_report;

/// Pads or truncates every utterance to the model's frame count, keeping
/// item order. Coefficient widths cannot be padded meaningfully, so a
/// mismatch there is an error.
pub fn prepare_features(corpus: &Corpus, cfg: &ModelConfig) -> Result<Vec<MfccFeatures>> {
    corpus
        .items()
        .iter()
        .map(|item| {
            if item.features.num_coeffs != cfg.input_coeffs {
                return Err(HarnessError::Config(format!(
                    "utterance {:?} has {} coefficients per frame, model expects {}",
                    item.id, item.features.num_coeffs, cfg.input_coeffs
                )));
            }
            Ok(pad_or_truncate(&item.features, cfg.input_frames))
        })
        .collect()
}

fn check_train_args(
    feats: &[MfccFeatures],
    labels: &[usize],
    train_idx: &[usize],
    batch_size: usize,
) -> Result<()> {
    if feats.len() != labels.len() {
        return Err(HarnessError::Contract(format!(
            "{} feature matrices for {} labels",
            feats.len(),
            labels.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(HarnessError::Contract("empty training set".into()));
    }
    if let Some(&bad) = train_idx.iter().find(|&&i| i >= feats.len()) {
        return Err(HarnessError::Contract(format!(
            "training index {bad} out of range for {} items",
            feats.len()
        )));
    }
    if batch_size == 0 {
        return Err(HarnessError::Contract("batch size must be positive".into()));
    }
    Ok(())
}

/// Classifier training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: MarginHyper,
    /// Root of every random stream in the run.
    pub seed: u64,
}

/// Trains a capsule classifier with margin loss over the given item
/// indices. Returns the trained parameters and the per-epoch mean loss.
/// Zero epochs return the untouched initialization.
pub fn train_classifier(
    cfg: &ModelConfig,
    feats: &[MfccFeatures],
    labels: &[usize],
    train_idx: &[usize],
    opts: &ClassifierOpts,
) -> Result<(ModelParams, Vec<f64>)> {
    check_train_args(feats, labels, train_idx, opts.batch_size)?;
    let mut params = ModelParams::init(cfg, child_seed(opts.seed, "init"))?;
    let mut adam = Adam::new(AdamConfig {
        lr: opts.learning_rate,
        ..AdamConfig::default()
    });

    let mut history = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut child_rng(opts.seed, &format!("epoch{epoch}")));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let batch_feats: Vec<&MfccFeatures> = batch.iter().map(|&i| &feats[i]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let mut rng = child_rng(child_seed(opts.seed, &format!("step{step}")), "dropout");
            let (acts, binding) =
                forward(&mut tape, &params, cfg, &batch_feats, Mode::Train, &mut rng)?;
            if !tape.data(acts.lengths).iter().all(|v| v.is_finite()) {
                return Err(ModelError::Training(format!(
                    "non-finite capsule lengths at step {step}"
                ))
                .into());
            }
            let loss = margin_loss(
                &mut tape,
                acts.digit_caps,
                &batch_labels,
                &opts.margin,
                Reduction::Mean,
            )?;
            loss_sum += tape.value(loss)?;
            batches += 1;

            tape.backward(loss)?;
            let grads = collect_grads(&tape, &binding);
            let mut entries = params.visit_mut();
            adam.step(&mut entries, &grads)?;
            update_running_stats(&mut params, &tape, &acts.bn_nodes);
            step += 1;
        }
        history.push(loss_sum / batches as f64);
    }
    Ok((params, history))
}

/// Adaptation training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hyper: AdaptHyper,
    /// When false the target corpus is never forwarded: each step degrades
    /// to source-only training of the extractor and main head, which is the
    /// comparison baseline for adaptation.
    pub adversarial: bool,
    /// Root of every random stream in the run.
    pub seed: u64,
}

/// One epoch's mean training losses and target-set metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean source classification loss over the epoch's steps.
    pub classification: f64,
    /// Mean auxiliary-head payoff over the epoch's steps (zero without a
    /// target); see [`capser_model::StepReport::gap`].
    pub gap: f64,
    pub target_war: f64,
    pub target_uar: f64,
}

/// Gradient-reversal warm-up: alignment pressure fades in smoothly from
/// zero to full strength over the run, so the extractor first learns
/// features that fit the source labels and only then is pushed to make the
/// domains indistinguishable. Full pressure from step one would align
/// still-random features and lock early mistakes in.
fn reversal_ramp(step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return 1.0;
    }
    let p = step as f64 / (total_steps - 1) as f64;
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Trains the adaptation wrapper: labelled source utterances, unlabelled
/// target utterances. Target labels are used only to score each epoch's
/// target-set metrics, never for training. Target batches are drawn by
/// cycling a per-epoch shuffle so every source batch gets a same-sized
/// target batch. The configured reversal strength is treated as a peak:
/// each step scales it by [`reversal_ramp`].
pub fn train_adapt(
    cfg: &ModelConfig,
    src_feats: &[MfccFeatures],
    src_labels: &[usize],
    tgt_feats: &[MfccFeatures],
    tgt_labels: &[usize],
    num_classes: usize,
    opts: &AdaptOpts,
) -> Result<(AdaptParams, Vec<EpochRow>)> {
    let all_src: Vec<usize> = (0..src_feats.len()).collect();
    check_train_args(src_feats, src_labels, &all_src, opts.batch_size)?;
    if tgt_feats.len() != tgt_labels.len() {
        return Err(HarnessError::Contract(format!(
            "{} target feature matrices for {} target labels",
            tgt_feats.len(),
            tgt_labels.len()
        )));
    }
    if opts.adversarial && tgt_feats.is_empty() {
        return Err(HarnessError::Contract(
            "adversarial adaptation needs a nonempty target corpus".into(),
        ));
    }

    let mut params = AdaptParams::init(cfg, child_seed(opts.seed, "init"))?;
    let mut adam = Adam::new(AdamConfig {
        lr: opts.learning_rate,
        ..AdamConfig::default()
    });

    let mut history = Vec::with_capacity(opts.epochs);
    let total_steps = src_feats.len().div_ceil(opts.batch_size) * opts.epochs;
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        let mut src_order = all_src.clone();
        src_order.shuffle(&mut child_rng(opts.seed, &format!("source-epoch{epoch}")));
        let mut tgt_order: Vec<usize> = (0..tgt_feats.len()).collect();
        tgt_order.shuffle(&mut child_rng(opts.seed, &format!("target-epoch{epoch}")));

        let mut ce_sum = 0.0;
        let mut gap_sum = 0.0;
        let mut batches = 0usize;
        let mut tgt_cursor = 0usize;
        for batch in src_order.chunks(opts.batch_size) {
            let batch_feats: Vec<&MfccFeatures> = batch.iter().map(|&i| &src_feats[i]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| src_labels[i]).collect();
            let source = DomainBatch::source(batch_feats, batch_labels)?;

            let target = if opts.adversarial {
                let picked: Vec<&MfccFeatures> = (0..batch.len())
                    .map(|j| &tgt_feats[tgt_order[(tgt_cursor + j) % tgt_order.len()]])
                    .collect();
                tgt_cursor = (tgt_cursor + batch.len()) % tgt_order.len();
                Some(DomainBatch::target(picked))
            } else {
                None
            };

            let hyper = AdaptHyper {
                grl_lambda: opts.hyper.grl_lambda * reversal_ramp(step, total_steps),
                ..opts.hyper
            };
            let report = adapt_step(
                &mut params,
                cfg,
                &mut adam,
                &source,
                target.as_ref(),
                &hyper,
                opts.seed,
                step,
            )?;
            ce_sum += report.classification;
            gap_sum += report.gap;
            batches += 1;
            step += 1;
        }

        let tgt_refs: Vec<&MfccFeatures> = tgt_feats.iter().collect();
        let target_metrics = adapted_report(cfg, &params, &tgt_refs, tgt_labels, num_classes)?;
        history.push(EpochRow {
            epoch,
            classification: ce_sum / batches as f64,
            gap: gap_sum / batches as f64,
            target_war: target_metrics.war,
            target_uar: target_metrics.uar,
        });
    }
    Ok((params, history))
}
