//! Cross-corpus adaptation: a shared capsule extractor, a main classifier
//! head, and an auxiliary scoring head behind a gradient-reversal node.
//!
//! One training step forwards a labelled source batch and an unlabelled
//! target batch through the shared extractor and scores both with both
//! heads. The auxiliary head plays a detector of domain separation: its
//! payoff ([`StepReport::gap`], capped at zero) is highest when it matches
//! the main head's verdicts on source utterances while contradicting them on
//! target utterances — something it can only manage while the two domains
//! occupy distinguishable regions of the embedding space. The optimizer
//! descends `classification + eta * (target disparity + gamma * source
//! disparity)` in a single backward pass: the auxiliary head's own gradients
//! arrive unflipped, so descending that sum climbs its payoff, while the
//! gradient-reversal node hands the shared extractor the opposite signal, so
//! the extractor drives the payoff back down by aligning the domains. The
//! main head and extractor also descend the source classification loss,
//! keeping the aligned embedding useful for the actual task.

use capser_audio::MfccFeatures;
use capser_tensor::seeding::{child_rng, child_seed};
use capser_tensor::{Adam, Mode, Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::loss::{adapt_gap, combined_objective, cross_entropy, disparity, Domain};
use crate::net::{bind_linear, bind_model, forward_bound, Activations};
use crate::params::{collect_grads, update_running_stats, LinearParams, ModelParams, TapeBinding};

/// Hyperparameters of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptHyper {
    /// Weight of the source disparity inside the gap.
    pub gamma: f64,
    /// Weight of the gap relative to the classification loss. Zero disables
    /// adaptation entirely.
    pub eta: f64,
    /// Gradient-reversal strength between the shared embedding and the
    /// auxiliary head.
    pub grl_lambda: f64,
}

impl Default for AdaptHyper {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            eta: 1.0,
            grl_lambda: 1.0,
        }
    }
}

/// A batch tagged with the side of the transfer task it belongs to. The
/// constructors enforce that source batches carry labels and target batches
/// do not, so swapped arguments are caught at the API boundary.
#[derive(Debug, Clone)]
pub struct DomainBatch<'a> {
    features: Vec<&'a MfccFeatures>,
    labels: Option<Vec<usize>>,
    domain: Domain,
}

impl<'a> DomainBatch<'a> {
    /// A labelled batch from the corpus the classifier trains on.
    pub fn source(features: Vec<&'a MfccFeatures>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(ModelError::Contract(format!(
                "{} labels for {} source utterances",
                labels.len(),
                features.len()
            )));
        }
        Ok(Self {
            features,
            labels: Some(labels),
            domain: Domain::Source,
        })
    }

    /// An unlabelled batch from the corpus being adapted to.
    pub fn target(features: Vec<&'a MfccFeatures>) -> Self {
        Self {
            features,
            labels: None,
            domain: Domain::Target,
        }
    }

    pub fn features(&self) -> &[&'a MfccFeatures] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Extractor plus the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptParams {
    pub extractor: ModelParams,
    pub head_main: LinearParams,
    pub head_adv: LinearParams,
}

impl AdaptParams {
    /// Initializes the extractor exactly as a standalone classifier with the
    /// same seed would be, plus two fresh heads on their own seed streams.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let geo = cfg.geometry()?;
        Ok(Self {
            extractor: ModelParams::init(cfg, seed)?,
            head_main: LinearParams::init(geo.embedding_dim, cfg.num_classes, seed, "head_main"),
            head_adv: LinearParams::init(geo.embedding_dim, cfg.num_classes, seed, "head_adv"),
        })
    }

    /// Visits every tensor; extractor names match [`ModelParams::visit`].
    pub fn visit(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.extractor.visit();
        out.push(("head_main.weight".into(), &self.head_main.weight));
        out.push(("head_main.bias".into(), &self.head_main.bias));
        out.push(("head_adv.weight".into(), &self.head_adv.weight));
        out.push(("head_adv.bias".into(), &self.head_adv.bias));
        out
    }

    /// Mutable variant of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.extractor.visit_mut();
        out.push(("head_main.weight".into(), &mut self.head_main.weight));
        out.push(("head_main.bias".into(), &mut self.head_main.bias));
        out.push(("head_adv.weight".into(), &mut self.head_adv.weight));
        out.push(("head_adv.bias".into(), &mut self.head_adv.bias));
        out
    }
}

/// Extractor activations plus both heads' probabilities for one batch.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub acts: Activations,
    /// Main-classifier probabilities, shape `[N, classes]`.
    pub main_probs: TensorId,
    /// Auxiliary-head probabilities (computed behind gradient reversal).
    pub adv_probs: TensorId,
}

/// Both domains' outputs from one shared-parameter pass.
#[derive(Debug, Clone)]
pub struct AdaptPass {
    pub source: HeadOutputs,
    pub target: HeadOutputs,
    pub binding: TapeBinding,
}

fn head_pass(
    tape: &mut Tape,
    emb: TensorId,
    weight: TensorId,
    bias: TensorId,
    grl_lambda: Option<f64>,
) -> Result<TensorId> {
    let x = match grl_lambda {
        Some(lambda) => tape.grl(emb, lambda)?,
        None => emb,
    };
    let logits = tape.matmul(x, weight)?;
    let logits = tape.add(logits, bias)?;
    Ok(tape.softmax(logits, 1)?)
}

/// Forwards a source and a target batch through the shared extractor and both
/// heads. The source batch is always processed first, so its dropout draws do
/// not depend on the presence or size of the target batch.
pub fn adapt_forward(
    tape: &mut Tape,
    params: &AdaptParams,
    cfg: &ModelConfig,
    source: &DomainBatch,
    target: &DomainBatch,
    hyper: &AdaptHyper,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptPass> {
    if source.domain() != Domain::Source {
        return Err(ModelError::Contract(
            "first batch must come from the source domain".into(),
        ));
    }
    if target.domain() != Domain::Target {
        return Err(ModelError::Contract(
            "second batch must come from the target domain".into(),
        ));
    }

    let bound = bind_model(tape, &params.extractor);
    let mut binding = bound.binding.clone();
    let (wm, bm) = bind_linear(tape, &params.head_main, "head_main", &mut binding);
    let (wa, ba) = bind_linear(tape, &params.head_adv, "head_adv", &mut binding);

    let run = |tape: &mut Tape, batch: &DomainBatch, rng: &mut ChaCha8Rng| -> Result<HeadOutputs> {
        let acts = forward_bound(tape, &bound, cfg, batch.features(), mode, rng)?;
        let main_probs = head_pass(tape, acts.embedding, wm, bm, None)?;
        let adv_probs = head_pass(tape, acts.embedding, wa, ba, Some(hyper.grl_lambda))?;
        Ok(HeadOutputs {
            acts,
            main_probs,
            adv_probs,
        })
    };
    let source_out = run(tape, source, rng)?;
    let target_out = run(tape, target, rng)?;

    Ok(AdaptPass {
        source: source_out,
        target: target_out,
        binding,
    })
}

/// Per-step losses, as values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Source-batch classification loss (cross-entropy of the main head).
    pub classification: f64,
    /// The auxiliary head's payoff `-(target disparity) - gamma * (source
    /// disparity)`. Both disparities are nonnegative, so the payoff tops out
    /// at zero: the auxiliary head climbs toward that ceiling by agreeing
    /// with the main head on source while disagreeing on target, and the
    /// shared extractor pushes the payoff back down. Zero when no target
    /// batch is given.
    pub gap: f64,
    /// `classification + eta * gap`: the quantity the extractor and main
    /// head jointly minimize once the auxiliary head has had its say.
    pub objective: f64,
}

/// One optimizer step. With a target batch this is the full adversarial
/// update; with `None` it degrades to plain source-only training of the
/// extractor and main head (the auxiliary head receives no gradient).
///
/// Dropout randomness is derived from `(run_seed, step)`, so step `t` draws
/// identical source-batch masks whether or not a target batch is present.
fn ensure_finite(tape: &Tape, id: TensorId, what: &str, step: usize) -> Result<()> {
    if tape.data(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Training(format!(
            "non-finite {what} at step {step}"
        )))
    }
}

pub fn adapt_step(
    params: &mut AdaptParams,
    cfg: &ModelConfig,
    opt: &mut Adam,
    source: &DomainBatch,
    target: Option<&DomainBatch>,
    hyper: &AdaptHyper,
    run_seed: u64,
    step: usize,
) -> Result<StepReport> {
    let mut rng = child_rng(child_seed(run_seed, &format!("step{step}")), "dropout");
    let mut tape = Tape::new();

    let (report, root, binding, bn_nodes) = match target {
        Some(target) => {
            let pass = adapt_forward(
                &mut tape, params, cfg, source, target, hyper, Mode::Train, &mut rng,
            )?;
            // `clamp_min` would silently replace NaN scores with the floor,
            // so divergence is caught here while it is still visible.
            ensure_finite(&tape, pass.source.main_probs, "source scores", step)?;
            ensure_finite(&tape, pass.source.adv_probs, "source auxiliary scores", step)?;
            ensure_finite(&tape, pass.target.main_probs, "target scores", step)?;
            ensure_finite(&tape, pass.target.adv_probs, "target auxiliary scores", step)?;
            let labels = source
                .labels()
                .expect("source constructor guarantees labels");
            let ce = cross_entropy(&mut tape, pass.source.main_probs, labels)?;
            let d_src = disparity(
                &mut tape,
                pass.source.main_probs,
                pass.source.adv_probs,
                Domain::Source,
            )?;
            let d_tgt = disparity(
                &mut tape,
                pass.target.main_probs,
                pass.target.adv_probs,
                Domain::Target,
            )?;
            // The auxiliary head's payoff is -(d_tgt + gamma * d_src), built
            // by feeding the negated target disparity through the gap: both
            // disparities are nonnegative, so the payoff is capped at zero
            // and ascending it is a well-posed game.
            let neg_d_tgt = tape.scale(d_tgt, -1.0)?;
            let gap = adapt_gap(&mut tape, d_src, neg_d_tgt, hyper.gamma)?;
            // The auxiliary head must ascend its payoff: descend the
            // negation. Gradient reversal flips the same signal into the
            // shared extractor, which therefore descends the payoff.
            let neg_gap = tape.scale(gap, -1.0)?;
            let root = combined_objective(&mut tape, ce, neg_gap, hyper.eta)?;

            let ce_v = tape.value(ce)?;
            let gap_v = tape.value(gap)?;
            // Running statistics track the corpus being adapted to, so
            // evaluation-time normalization matches the target forwards the
            // alignment was trained on. Source-only steps (below) keep
            // feeding source statistics instead.
            let bn = pass.target.acts.bn_nodes.clone();
            (
                StepReport {
                    classification: ce_v,
                    gap: gap_v,
                    objective: ce_v + hyper.eta * gap_v,
                },
                root,
                pass.binding,
                bn,
            )
        }
        None => {
            if source.domain() != Domain::Source {
                return Err(ModelError::Contract(
                    "first batch must come from the source domain".into(),
                ));
            }
            let bound = bind_model(&mut tape, &params.extractor);
            let mut binding = bound.binding.clone();
            let (wm, bm) = bind_linear(&mut tape, &params.head_main, "head_main", &mut binding);
            let (_wa, _ba) = bind_linear(&mut tape, &params.head_adv, "head_adv", &mut binding);
            let acts = forward_bound(
                &mut tape,
                &bound,
                cfg,
                source.features(),
                Mode::Train,
                &mut rng,
            )?;
            let main_probs = head_pass(&mut tape, acts.embedding, wm, bm, None)?;
            ensure_finite(&tape, main_probs, "source scores", step)?;
            let labels = source
                .labels()
                .expect("source constructor guarantees labels");
            let ce = cross_entropy(&mut tape, main_probs, labels)?;
            let ce_v = tape.value(ce)?;
            (
                StepReport {
                    classification: ce_v,
                    gap: 0.0,
                    objective: ce_v,
                },
                ce,
                binding,
                acts.bn_nodes,
            )
        }
    };

    if !report.classification.is_finite() || !report.gap.is_finite() {
        return Err(ModelError::Training(format!(
            "non-finite loss at step {step}: classification {}, gap {}",
            report.classification, report.gap
        )));
    }

    tape.backward(root)?;
    let grads = collect_grads(&tape, &binding);
    let mut entries = params.visit_mut();
    opt.step(&mut entries, &grads)?;
    update_running_stats(&mut params.extractor, &tape, &bn_nodes);

    Ok(report)
}

/// Eval-mode class predictions of the main head for one batch of utterances.
///
/// This is the inference path for an adapted model: the capsule extractor
/// runs without dropout or batch statistics, and the argmax of the main
/// head's probabilities picks the class (ties go to the lowest index). The
/// auxiliary head plays no part.
pub fn adapted_predict(
    params: &AdaptParams,
    cfg: &ModelConfig,
    batch: &[&MfccFeatures],
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    // Eval mode never samples, so the rng stream here is inert.
    let mut rng = child_rng(0, "eval");
    let bound = bind_model(&mut tape, &params.extractor);
    let mut binding = bound.binding.clone();
    let (wm, bm) = bind_linear(&mut tape, &params.head_main, "head_main", &mut binding);
    let acts = forward_bound(&mut tape, &bound, cfg, batch, Mode::Eval, &mut rng)?;
    let probs = head_pass(&mut tape, acts.embedding, wm, bm, None)?;
    Ok(crate::net::predict(&tape, probs))
}
