//! Capsule-routing emotion classifier and its adversarial adaptation wrapper.
//!
//! The model turns a batch of MFCC matrices into class capsules whose lengths
//! act as class scores. The pipeline is: a convolutional frontend, a strided
//! convolution that groups channels into primary capsules, self-attention over
//! those capsules, and agreement routing into one output capsule per class.
//!
//! For cross-corpus transfer, [`adapt::AdaptParams`] wraps the classifier with
//! two linear heads: a main classifier trained on labelled source data and an
//! auxiliary scoring head that measures how differently the shared embedding
//! treats source and target batches. A gradient-reversal node lets a single
//! backward pass train the auxiliary head to widen that gap while the shared
//! extractor learns to narrow it.
//!
//! All forward passes build onto a caller-supplied [`capser_tensor::Tape`], so
//! losses from different corpora can be combined freely before one backward
//! sweep. Parameters live off-tape in named structs and are bound as leaves
//! per pass; [`checkpoint`] serializes them to a stable binary format.

mod error;

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod net;
pub mod params;

pub use adapt::{
    adapt_forward, adapt_step, adapted_predict, AdaptHyper, AdaptParams, AdaptPass, DomainBatch,
    HeadOutputs, StepReport,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Aggregator, AttnOutput, FrontendKind, Geometry, ModelConfig};
pub use error::{ModelError, Result};
pub use loss::{
    adapt_gap, combined_objective, cross_entropy, disparity, margin_loss, Domain, MarginHyper,
    Reduction,
};
pub use net::{bind_linear, bind_model, forward, forward_bound, predict, Activations, BoundModel};
pub use params::{collect_grads, update_running_stats, LinearParams, ModelParams, TapeBinding};
