//! Architecture configuration and the spatial geometry derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Which frontend turns the MFCC image into feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    /// Three blocks of 3x3 same-padded convolution, batch norm, ELU, and 2x2
    /// average pooling. Each block halves both spatial axes.
    ConvPool,
    /// A single 9x9 valid convolution with stride 2 followed by ELU. Used to
    /// measure what the deeper pooled frontend buys.
    SingleConv,
}

/// How the attention stage combines its weights with the capsule inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnOutput {
    /// Multiply the attention weights directly onto the primary capsules.
    PrimaryCaps,
    /// Multiply the attention weights onto a learned value projection of the
    /// primary capsules.
    ValueProjection,
}

/// How primary capsules are aggregated into one capsule per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Iterative agreement routing between primary and class capsules.
    Routing,
    /// A single recurrent layer read out at the last capsule, as a
    /// lower-capacity stand-in for routing.
    Recurrent,
}

/// Full architecture description. Serializable so checkpoints and experiment
/// manifests can rebuild the exact network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of MFCC frames per utterance (time axis of the input image).
    pub input_frames: usize,
    /// Number of MFCC coefficients per frame (frequency axis).
    pub input_coeffs: usize,
    /// Number of emotion classes, and therefore of output capsules.
    pub num_classes: usize,
    /// Channels produced by each frontend convolution.
    pub conv_filters: usize,
    /// Number of capsule groups formed by the primary convolution.
    pub primary_groups: usize,
    /// Dimension of each primary capsule.
    pub primary_dim: usize,
    /// Dimension of each class capsule.
    pub digit_dim: usize,
    /// Number of agreement-routing iterations.
    pub routing_iters: usize,
    /// Dropout rate applied to primary capsules in train mode.
    pub dropout: f64,
    /// Frontend variant.
    pub frontend: FrontendKind,
    /// Whether the self-attention stage is present.
    pub attention: bool,
    /// Attention output composition (ignored when `attention` is false).
    pub attn_output: AttnOutput,
    /// Aggregation variant.
    pub aggregator: Aggregator,
    /// Hidden width of the recurrent aggregator (ignored for routing).
    pub recurrent_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_frames: 64,
            input_coeffs: 39,
            num_classes: 5,
            conv_filters: 64,
            primary_groups: 16,
            primary_dim: 8,
            digit_dim: 16,
            routing_iters: 3,
            dropout: 0.25,
            frontend: FrontendKind::ConvPool,
            attention: true,
            attn_output: AttnOutput::PrimaryCaps,
            aggregator: Aggregator::Routing,
            recurrent_hidden: 64,
        }
    }
}

/// Spatial shapes implied by a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    /// Feature-map height and width after the frontend.
    pub frontend_hw: (usize, usize),
    /// Channels after the frontend.
    pub frontend_channels: usize,
    /// Spatial grid of primary-capsule groups.
    pub primary_hw: (usize, usize),
    /// Total number of primary capsules (grid cells times groups).
    pub num_capsules: usize,
    /// Width of the flattened class-capsule embedding.
    pub embedding_dim: usize,
}

/// Number of conv/pool blocks in the [`FrontendKind::ConvPool`] frontend.
pub const CONV_POOL_BLOCKS: usize = 3;

/// Kernel size of the [`FrontendKind::SingleConv`] frontend.
pub const SINGLE_CONV_KERNEL: usize = 9;

fn pooled(dim: usize, stage: &str, axis: &str) -> Result<usize> {
    if dim < 2 {
        return Err(ModelError::Config(format!(
            "{axis} extent {dim} is too small to pool at {stage}"
        )));
    }
    Ok((dim - 2) / 2 + 1)
}

impl ModelConfig {
    /// Validates the configuration and derives the shapes of every stage.
    pub fn geometry(&self) -> Result<Geometry> {
        for (name, v) in [
            ("input_frames", self.input_frames),
            ("input_coeffs", self.input_coeffs),
            ("num_classes", self.num_classes),
            ("conv_filters", self.conv_filters),
            ("primary_groups", self.primary_groups),
            ("primary_dim", self.primary_dim),
            ("digit_dim", self.digit_dim),
            ("routing_iters", self.routing_iters),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.aggregator == Aggregator::Recurrent && self.recurrent_hidden == 0 {
            return Err(ModelError::Config(
                "recurrent_hidden must be positive for the recurrent aggregator".into(),
            ));
        }

        let (mut h, mut w) = (self.input_frames, self.input_coeffs);
        match self.frontend {
            FrontendKind::ConvPool => {
                for block in 0..CONV_POOL_BLOCKS {
                    let stage = format!("frontend block {block}");
                    h = pooled(h, &stage, "frame")?;
                    w = pooled(w, &stage, "coefficient")?;
                }
            }
            FrontendKind::SingleConv => {
                let k = SINGLE_CONV_KERNEL;
                if h < k || w < k {
                    return Err(ModelError::Config(format!(
                        "input {h}x{w} is smaller than the {k}x{k} frontend kernel"
                    )));
                }
                h = (h - k) / 2 + 1;
                w = (w - k) / 2 + 1;
            }
        }

        // Primary convolution: 3x3, same padding, stride 2.
        let ph = (h + 1) / 2;
        let pw = (w + 1) / 2;
        let num_capsules = ph * pw * self.primary_groups;

        Ok(Geometry {
            frontend_hw: (h, w),
            frontend_channels: self.conv_filters,
            primary_hw: (ph, pw),
            num_capsules,
            embedding_dim: self.num_classes * self.digit_dim,
        })
    }
}
