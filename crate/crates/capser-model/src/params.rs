//! Parameter containers, seeded initialization, and tape binding.
//!
//! Parameters live off-tape as named [`Tensor`]s. Each forward pass leafs them
//! onto a fresh [`Tape`] and records the (name, id) pairs in a [`TapeBinding`]
//! so gradients can be harvested by name after `backward` and fed to the
//! optimizer. Every tensor is initialized from its own seed stream derived
//! from the run seed and the tensor's name, so toggling one component on or
//! off never shifts the initialization of any other component.

use std::collections::BTreeMap;

use capser_tensor::seeding::child_rng;
use capser_tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

use crate::config::{Aggregator, FrontendKind, ModelConfig, CONV_POOL_BLOCKS, SINGLE_CONV_KERNEL};
use crate::error::Result;

/// Epsilon inside the batch-norm standardization.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the running-statistics update: `running = m*running + (1-m)*batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// One frontend block: convolution kernel plus batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Running mean used by eval-mode batch norm. Not trainable.
    pub running_mean: Tensor,
    /// Running (biased) variance used by eval-mode batch norm. Not trainable.
    pub running_var: Tensor,
}

/// Frontend parameters for either variant.
#[derive(Debug, Clone, PartialEq)]
pub enum FrontendParams {
    ConvPool(Vec<ConvBlock>),
    SingleConv { kernel: Tensor },
}

/// Query/key/value projections of the capsule self-attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Aggregator parameters for either variant.
#[derive(Debug, Clone, PartialEq)]
pub enum AggParams {
    Routing {
        /// Per-(input capsule, class) transform, shape
        /// `[num_capsules, num_classes, primary_dim, digit_dim]`.
        transforms: Tensor,
    },
    Recurrent {
        wx: Tensor,
        wh: Tensor,
        bias: Tensor,
        out_w: Tensor,
        out_b: Tensor,
    },
}

/// All parameters of the capsule classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub frontend: FrontendParams,
    pub primary_kernel: Tensor,
    pub primary_bias: Tensor,
    pub attention: Option<AttnParams>,
    pub aggregator: AggParams,
}

/// A plain affine head: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    /// Initializes a head mapping `fan_in` features to `fan_out` scores.
    pub fn init(fan_in: usize, fan_out: usize, seed: u64, label: &str) -> Self {
        let mut rng = child_rng(seed, label);
        let weight = Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), &mut rng)
            .with_grad();
        let bias = Tensor::zeros(&[fan_out]).with_grad();
        Self { weight, bias }
    }
}

fn he_kernel(shape: &[usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    Tensor::randn(shape, (2.0 / fan_in).sqrt(), rng).with_grad()
}

fn conv_block(cin: usize, cout: usize, seed: u64, name: &str) -> ConvBlock {
    let mut rng = child_rng(seed, &format!("{name}.kernel"));
    ConvBlock {
        kernel: he_kernel(&[3, 3, cin, cout], &mut rng),
        gamma: Tensor::full(&[cout], 1.0).with_grad(),
        beta: Tensor::zeros(&[cout]).with_grad(),
        running_mean: Tensor::zeros(&[cout]),
        running_var: Tensor::full(&[cout], 1.0),
    }
}

impl ModelParams {
    /// Initializes every component from `(seed, tensor name)` child streams.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let geo = cfg.geometry()?;

        let frontend = match cfg.frontend {
            FrontendKind::ConvPool => {
                let mut blocks = Vec::with_capacity(CONV_POOL_BLOCKS);
                for i in 0..CONV_POOL_BLOCKS {
                    let cin = if i == 0 { 1 } else { cfg.conv_filters };
                    blocks.push(conv_block(
                        cin,
                        cfg.conv_filters,
                        seed,
                        &format!("frontend.block{i}"),
                    ));
                }
                FrontendParams::ConvPool(blocks)
            }
            FrontendKind::SingleConv => {
                let k = SINGLE_CONV_KERNEL;
                let mut rng = child_rng(seed, "frontend.kernel");
                FrontendParams::SingleConv {
                    kernel: he_kernel(&[k, k, 1, cfg.conv_filters], &mut rng),
                }
            }
        };

        let primary_channels = cfg.primary_groups * cfg.primary_dim;
        let mut rng = child_rng(seed, "primary.kernel");
        let primary_kernel = he_kernel(&[3, 3, cfg.conv_filters, primary_channels], &mut rng);
        let primary_bias = Tensor::zeros(&[primary_channels]).with_grad();

        let attention = cfg.attention.then(|| {
            let d = cfg.primary_dim;
            let std = (1.0 / d as f64).sqrt();
            let proj = |label: &str| {
                let mut rng = child_rng(seed, label);
                Tensor::randn(&[d, d], std, &mut rng).with_grad()
            };
            AttnParams {
                query: proj("attention.query"),
                key: proj("attention.key"),
                value: proj("attention.value"),
            }
        });

        let aggregator = match cfg.aggregator {
            Aggregator::Routing => {
                let std = (2.0 / (cfg.primary_dim + cfg.digit_dim) as f64).sqrt();
                let mut rng = child_rng(seed, "routing.transforms");
                AggParams::Routing {
                    transforms: Tensor::randn(
                        &[geo.num_capsules, cfg.num_classes, cfg.primary_dim, cfg.digit_dim],
                        std,
                        &mut rng,
                    )
                    .with_grad(),
                }
            }
            Aggregator::Recurrent => {
                let d = cfg.primary_dim;
                let hid = cfg.recurrent_hidden;
                let out = cfg.num_classes * cfg.digit_dim;
                let mk = |shape: &[usize], std: f64, label: &str| {
                    let mut rng = child_rng(seed, label);
                    Tensor::randn(shape, std, &mut rng).with_grad()
                };
                AggParams::Recurrent {
                    wx: mk(&[d, hid], (1.0 / d as f64).sqrt(), "recurrent.wx"),
                    wh: mk(&[hid, hid], (1.0 / hid as f64).sqrt(), "recurrent.wh"),
                    bias: Tensor::zeros(&[hid]).with_grad(),
                    out_w: mk(&[hid, out], (1.0 / hid as f64).sqrt(), "recurrent.out_w"),
                    out_b: Tensor::zeros(&[out]).with_grad(),
                }
            }
        };

        Ok(Self {
            frontend,
            primary_kernel,
            primary_bias,
            attention,
            aggregator,
        })
    }

    /// Visits every tensor (trainable and running statistics) in a fixed order.
    pub fn visit(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        match &self.frontend {
            FrontendParams::ConvPool(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("frontend.block{i}.kernel"), &b.kernel));
                    out.push((format!("frontend.block{i}.gamma"), &b.gamma));
                    out.push((format!("frontend.block{i}.beta"), &b.beta));
                    out.push((format!("frontend.block{i}.running_mean"), &b.running_mean));
                    out.push((format!("frontend.block{i}.running_var"), &b.running_var));
                }
            }
            FrontendParams::SingleConv { kernel } => {
                out.push(("frontend.kernel".into(), kernel));
            }
        }
        out.push(("primary.kernel".into(), &self.primary_kernel));
        out.push(("primary.bias".into(), &self.primary_bias));
        if let Some(a) = &self.attention {
            out.push(("attention.query".into(), &a.query));
            out.push(("attention.key".into(), &a.key));
            out.push(("attention.value".into(), &a.value));
        }
        match &self.aggregator {
            AggParams::Routing { transforms } => {
                out.push(("routing.transforms".into(), transforms));
            }
            AggParams::Recurrent {
                wx,
                wh,
                bias,
                out_w,
                out_b,
            } => {
                out.push(("recurrent.wx".into(), wx));
                out.push(("recurrent.wh".into(), wh));
                out.push(("recurrent.bias".into(), bias));
                out.push(("recurrent.out_w".into(), out_w));
                out.push(("recurrent.out_b".into(), out_b));
            }
        }
        out
    }

    /// Mutable variant of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.frontend {
            FrontendParams::ConvPool(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.push((format!("frontend.block{i}.kernel"), &mut b.kernel));
                    out.push((format!("frontend.block{i}.gamma"), &mut b.gamma));
                    out.push((format!("frontend.block{i}.beta"), &mut b.beta));
                    out.push((
                        format!("frontend.block{i}.running_mean"),
                        &mut b.running_mean,
                    ));
                    out.push((format!("frontend.block{i}.running_var"), &mut b.running_var));
                }
            }
            FrontendParams::SingleConv { kernel } => {
                out.push(("frontend.kernel".into(), kernel));
            }
        }
        out.push(("primary.kernel".into(), &mut self.primary_kernel));
        out.push(("primary.bias".into(), &mut self.primary_bias));
        if let Some(a) = &mut self.attention {
            out.push(("attention.query".into(), &mut a.query));
            out.push(("attention.key".into(), &mut a.key));
            out.push(("attention.value".into(), &mut a.value));
        }
        match &mut self.aggregator {
            AggParams::Routing { transforms } => {
                out.push(("routing.transforms".into(), transforms));
            }
            AggParams::Recurrent {
                wx,
                wh,
                bias,
                out_w,
                out_b,
            } => {
                out.push(("recurrent.wx".into(), wx));
                out.push(("recurrent.wh".into(), wh));
                out.push(("recurrent.bias".into(), bias));
                out.push(("recurrent.out_w".into(), out_w));
                out.push(("recurrent.out_b".into(), out_b));
            }
        }
        out
    }
}

/// (name, tape id) pairs for every trainable tensor bound by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct TapeBinding {
    pub entries: Vec<(String, TensorId)>,
}

impl TapeBinding {
    pub(crate) fn push(&mut self, name: impl Into<String>, id: TensorId) {
        self.entries.push((name.into(), id));
    }

    /// Looks up the tape id bound under `name`.
    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

/// Harvests gradients for every bound tensor that received one.
pub fn collect_grads(tape: &Tape, binding: &TapeBinding) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, id) in &binding.entries {
        if let Some(g) = tape.grad(*id) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}

/// Folds the batch statistics recorded by train-mode batch-norm nodes into the
/// running statistics: `running = m*running + (1-m)*batch` with m = [`BN_MOMENTUM`].
///
/// `bn_nodes` pairs each batch-norm tape node with the name prefix of its
/// block (for example `frontend.block1`).
pub fn update_running_stats(
    params: &mut ModelParams,
    tape: &Tape,
    bn_nodes: &[(String, TensorId)],
) {
    let FrontendParams::ConvPool(blocks) = &mut params.frontend else {
        return;
    };
    for (prefix, id) in bn_nodes {
        let Some(stats) = tape.batch_stats(*id) else {
            continue;
        };
        for (i, block) in blocks.iter_mut().enumerate() {
            if prefix == &format!("frontend.block{i}") {
                for (r, b) in block.running_mean.data.iter_mut().zip(&stats.mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                for (r, b) in block.running_var.data.iter_mut().zip(&stats.var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }
}
