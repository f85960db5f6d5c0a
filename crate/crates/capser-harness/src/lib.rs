//! Experiment harness around the capsule emotion classifier.
//!
//! The pieces stack bottom-up:
//!
//! * [`corpus`] — labelled feature collections and their on-disk layout
//!   (a `features/` directory of per-utterance CSVs plus `labels.csv`).
//! * [`synth`] — deterministic synthetic corpora: Gaussian class clusters in
//!   feature space, with an optional fixed rotation + translation to induce
//!   covariate shift between a source and a target corpus.
//! * [`split`] — stratified k-fold cross-validation partitions.
//! * [`eval`] — confusion matrices and the weighted / unweighted average
//!   recall pair, plus batched model evaluation.
//! * [`train`] — the classifier training loop (margin loss) and the
//!   adversarial adaptation loop wrapping [`capser_model::adapt_step`].
//! * [`runs`] — complete experiments: k-fold single-corpus runs and paired
//!   cross-corpus runs (adapted versus source-only), each writing metric
//!   CSVs, checkpoints, embedding exports, and a replayable manifest.
//!
//! The `capser` binary exposes all of this as subcommands.

pub mod corpus;
mod error;
pub mod eval;
pub mod runs;
pub mod split;
pub mod synth;
pub mod train;

pub use corpus::{Corpus, CorpusItem};
pub use error::{HarnessError, Result};
pub use eval::{evaluate, EvalReport};
pub use runs::{
    export_embeddings, run_cross_corpus, run_single_corpus, CrossReport, CrossRunConfig,
    SingleReport, SingleRunConfig,
};
pub use split::kfold_split;
pub use synth::{synth_corpus, SynthJob, SynthSpec, Transform};
pub use train::{
    prepare_features, train_adapt, train_classifier, AdaptOpts, ClassifierOpts, EpochRow,
};
