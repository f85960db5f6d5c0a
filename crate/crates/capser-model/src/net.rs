//! Forward pass of the capsule classifier.
//!
//! Stages, in order:
//! 1. Frontend: either three conv/batch-norm/ELU/avg-pool blocks (each halving
//!    both spatial axes) or a single strided convolution.
//! 2. Primary capsules: a 3x3 same-padded stride-2 convolution whose channels
//!    are grouped into capsules, plus bias, reshaped to `[N, caps, dim]` and
//!    squashed so each capsule length lies in [0, 1). Dropout is applied here
//!    in train mode (component-wise, inverted scaling).
//! 3. Self-attention across the capsules of each utterance: scaled dot-product
//!    weights from learned query/key projections, applied either to the
//!    capsules directly or to a learned value projection.
//! 4. Aggregation into one capsule per class: iterative agreement routing, or
//!    a recurrent layer as a cheaper baseline.
//!
//! Class scores are the lengths of the class capsules; `softmax(lengths)`
//! gives the probabilities used by cross-entropy and the adaptation heads.

use capser_audio::MfccFeatures;
use capser_tensor::{Mode, Padding, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

use crate::config::{AttnOutput, ModelConfig};
use crate::error::{ModelError, Result};
use crate::params::{AggParams, FrontendParams, LinearParams, ModelParams, TapeBinding, BN_EPS};

/// Tape ids of one frontend block's parameters plus its running statistics.
#[derive(Debug, Clone)]
struct BoundConvBlock {
    name: String,
    kernel: TensorId,
    gamma: TensorId,
    beta: TensorId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum BoundFrontend {
    ConvPool(Vec<BoundConvBlock>),
    SingleConv { kernel: TensorId },
}

#[derive(Debug, Clone)]
struct BoundAttn {
    query: TensorId,
    key: TensorId,
    value: TensorId,
}

#[derive(Debug, Clone)]
enum BoundAgg {
    Routing { transforms: TensorId },
    Recurrent {
        wx: TensorId,
        wh: TensorId,
        bias: TensorId,
        out_w: TensorId,
        out_b: TensorId,
    },
}

/// A parameter set leafed onto a tape, reusable across several forward passes
/// (for example one source batch and one target batch sharing weights).
#[derive(Debug, Clone)]
pub struct BoundModel {
    frontend: BoundFrontend,
    primary_kernel: TensorId,
    primary_bias: TensorId,
    attention: Option<BoundAttn>,
    aggregator: BoundAgg,
    /// (name, id) pairs for gradient harvesting, in parameter visit order.
    pub binding: TapeBinding,
}

/// Leafs every parameter onto `tape` and records the binding.
pub fn bind_model(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    let mut binding = TapeBinding::default();
    let frontend = match &params.frontend {
        FrontendParams::ConvPool(blocks) => {
            let mut bound = Vec::with_capacity(blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                let name = format!("frontend.block{i}");
                let kernel = tape.leaf(&b.kernel);
                let gamma = tape.leaf(&b.gamma);
                let beta = tape.leaf(&b.beta);
                binding.push(format!("{name}.kernel"), kernel);
                binding.push(format!("{name}.gamma"), gamma);
                binding.push(format!("{name}.beta"), beta);
                bound.push(BoundConvBlock {
                    name,
                    kernel,
                    gamma,
                    beta,
                    running_mean: b.running_mean.data.clone(),
                    running_var: b.running_var.data.clone(),
                });
            }
            BoundFrontend::ConvPool(bound)
        }
        FrontendParams::SingleConv { kernel } => {
            let id = tape.leaf(kernel);
            binding.push("frontend.kernel", id);
            BoundFrontend::SingleConv { kernel: id }
        }
    };
    let primary_kernel = tape.leaf(&params.primary_kernel);
    let primary_bias = tape.leaf(&params.primary_bias);
    binding.push("primary.kernel", primary_kernel);
    binding.push("primary.bias", primary_bias);
    let attention = params.attention.as_ref().map(|a| {
        let query = tape.leaf(&a.query);
        let key = tape.leaf(&a.key);
        let value = tape.leaf(&a.value);
        binding.push("attention.query", query);
        binding.push("attention.key", key);
        binding.push("attention.value", value);
        BoundAttn { query, key, value }
    });
    let aggregator = match &params.aggregator {
        AggParams::Routing { transforms } => {
            let id = tape.leaf(transforms);
            binding.push("routing.transforms", id);
            BoundAgg::Routing { transforms: id }
        }
        AggParams::Recurrent {
            wx,
            wh,
            bias,
            out_w,
            out_b,
        } => {
            let wx = tape.leaf(wx);
            let wh = tape.leaf(wh);
            let bias = tape.leaf(bias);
            let out_w = tape.leaf(out_w);
            let out_b = tape.leaf(out_b);
            binding.push("recurrent.wx", wx);
            binding.push("recurrent.wh", wh);
            binding.push("recurrent.bias", bias);
            binding.push("recurrent.out_w", out_w);
            binding.push("recurrent.out_b", out_b);
            BoundAgg::Recurrent {
                wx,
                wh,
                bias,
                out_w,
                out_b,
            }
        }
    };
    BoundModel {
        frontend,
        primary_kernel,
        primary_bias,
        attention,
        aggregator,
        binding,
    }
}

/// Binds a linear head onto the tape under `name.weight` / `name.bias`.
pub fn bind_linear(
    tape: &mut Tape,
    head: &LinearParams,
    name: &str,
    binding: &mut TapeBinding,
) -> (TensorId, TensorId) {
    let w = tape.leaf(&head.weight);
    let b = tape.leaf(&head.bias);
    binding.push(format!("{name}.weight"), w);
    binding.push(format!("{name}.bias"), b);
    (w, b)
}

/// Everything a forward pass exposes about one batch.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Class capsules, shape `[N, num_classes, digit_dim]`.
    pub digit_caps: TensorId,
    /// Capsule lengths (class scores), shape `[N, num_classes]`.
    pub lengths: TensorId,
    /// `softmax(lengths)` per utterance, shape `[N, num_classes]`.
    pub probs: TensorId,
    /// Flattened class capsules, shape `[N, num_classes * digit_dim]`.
    pub embedding: TensorId,
    /// Train-mode batch-norm nodes, paired with their block's name prefix,
    /// for folding batch statistics into the running averages.
    pub bn_nodes: Vec<(String, TensorId)>,
    /// Coupling coefficients from each routing iteration, shape `[N, caps,
    /// num_classes]`; empty for the recurrent aggregator.
    pub routing_couplings: Vec<TensorId>,
    /// Attention weights, shape `[N, caps, caps]`, when attention is enabled.
    pub attention_weights: Option<TensorId>,
}

fn batch_input(tape: &mut Tape, cfg: &ModelConfig, batch: &[&MfccFeatures]) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(ModelError::Contract("forward pass needs a non-empty batch".into()));
    }
    for (i, feat) in batch.iter().enumerate() {
        if feat.num_frames != cfg.input_frames || feat.num_coeffs != cfg.input_coeffs {
            return Err(ModelError::Contract(format!(
                "utterance {i} is {}x{}, model expects {}x{}",
                feat.num_frames, feat.num_coeffs, cfg.input_frames, cfg.input_coeffs
            )));
        }
    }
    let (n, f, c) = (batch.len(), cfg.input_frames, cfg.input_coeffs);
    let mut data = Vec::with_capacity(n * f * c);
    for feat in batch {
        data.extend_from_slice(&feat.data);
    }
    Ok(tape.constant(&[n, f, c, 1], &data)?)
}

fn frontend_pass(
    tape: &mut Tape,
    bound: &BoundModel,
    mode: Mode,
    input: TensorId,
    bn_nodes: &mut Vec<(String, TensorId)>,
) -> Result<TensorId> {
    match &bound.frontend {
        BoundFrontend::ConvPool(blocks) => {
            let mut x = input;
            for b in blocks {
                x = tape.conv2d(x, b.kernel, (1, 1), Padding::Same)?;
                x = tape.batch_norm(
                    x,
                    b.gamma,
                    b.beta,
                    &b.running_mean,
                    &b.running_var,
                    BN_EPS,
                    mode,
                )?;
                if mode == Mode::Train {
                    bn_nodes.push((b.name.clone(), x));
                }
                x = tape.elu(x)?;
                x = tape.avg_pool2d(x, (2, 2), (2, 2))?;
            }
            Ok(x)
        }
        BoundFrontend::SingleConv { kernel } => {
            let x = tape.conv2d(input, *kernel, (2, 2), Padding::Valid)?;
            Ok(tape.elu(x)?)
        }
    }
}

fn attention_pass(
    tape: &mut Tape,
    attn: &BoundAttn,
    output: AttnOutput,
    caps: TensorId,
    n: usize,
    num_caps: usize,
    dim: usize,
) -> Result<(TensorId, TensorId)> {
    let flat = tape.reshape(caps, &[n * num_caps, dim])?;
    let project = |tape: &mut Tape, w: TensorId| -> Result<TensorId> {
        let p = tape.matmul(flat, w)?;
        Ok(tape.reshape(p, &[n, num_caps, dim])?)
    };
    let q = project(tape, attn.query)?;
    let k = project(tape, attn.key)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt())?;
    let weights = tape.softmax(scaled, 2)?;
    let out = match output {
        AttnOutput::PrimaryCaps => tape.bmm(weights, caps)?,
        AttnOutput::ValueProjection => {
            let v = project(tape, attn.value)?;
            tape.bmm(weights, v)?
        }
    };
    Ok((out, weights))
}

fn routing_pass(
    tape: &mut Tape,
    transforms: TensorId,
    caps: TensorId,
    n: usize,
    num_caps: usize,
    d_in: usize,
    k: usize,
    d_out: usize,
    iters: usize,
    couplings: &mut Vec<TensorId>,
) -> Result<TensorId> {
    // Predictions: u_hat[n, i, j, :] = caps[n, i, :] . transforms[i, j, :, :],
    // expressed as a broadcast product summed over the input dimension.
    let u5 = tape.reshape(caps, &[n, num_caps, 1, d_in, 1])?;
    let w5 = tape.reshape(transforms, &[1, num_caps, k, d_in, d_out])?;
    let prod = tape.mul(u5, w5)?;
    let u_hat = tape.sum_axis(prod, 3)?; // [n, caps, k, d_out]

    let zeros = vec![0.0; n * num_caps * k];
    let mut logits = tape.constant(&[n, num_caps, k], &zeros)?;
    let mut digit = None;
    for it in 0..iters {
        let coupling = tape.softmax(logits, 2)?;
        couplings.push(coupling);
        let c4 = tape.reshape(coupling, &[n, num_caps, k, 1])?;
        let weighted = tape.mul(c4, u_hat)?;
        let s = tape.sum_axis(weighted, 1)?; // [n, k, d_out]
        let v = tape.squash(s)?;
        digit = Some(v);
        if it + 1 < iters {
            let v4 = tape.reshape(v, &[n, 1, k, d_out])?;
            let dots = tape.mul(u_hat, v4)?;
            let agree = tape.sum_axis(dots, 3)?; // [n, caps, k]
            logits = tape.add(logits, agree)?;
        }
    }
    Ok(digit.expect("routing_iters is validated positive"))
}

fn recurrent_pass(
    tape: &mut Tape,
    wx: TensorId,
    wh: TensorId,
    bias: TensorId,
    out_w: TensorId,
    out_b: TensorId,
    caps: TensorId,
    n: usize,
    num_caps: usize,
    hidden: usize,
    k: usize,
    d_out: usize,
) -> Result<TensorId> {
    let zeros = vec![0.0; n * hidden];
    let mut h = tape.constant(&[n, hidden], &zeros)?;
    for t in 0..num_caps {
        let x_t = tape.select1(caps, t)?;
        let xw = tape.matmul(x_t, wx)?;
        let hw = tape.matmul(h, wh)?;
        let pre = tape.add(xw, hw)?;
        let pre = tape.add(pre, bias)?;
        h = tape.tanh(pre)?;
    }
    let o = tape.matmul(h, out_w)?;
    let o = tape.add(o, out_b)?;
    let o = tape.reshape(o, &[n, k, d_out])?;
    Ok(tape.squash(o)?)
}

/// Runs a batch through an already-bound model.
pub fn forward_bound(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    batch: &[&MfccFeatures],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Activations> {
    let geo = cfg.geometry()?;
    let n = batch.len();
    let input = batch_input(tape, cfg, batch)?;

    let mut bn_nodes = Vec::new();
    let fmap = frontend_pass(tape, bound, mode, input, &mut bn_nodes)?;

    // Primary capsules.
    let pconv = tape.conv2d(fmap, bound.primary_kernel, (2, 2), Padding::Same)?;
    let pbias = tape.add(pconv, bound.primary_bias)?;
    let grouped = tape.reshape(pbias, &[n, geo.num_capsules, cfg.primary_dim])?;
    let squashed = tape.squash(grouped)?;
    let caps = if mode == Mode::Train && cfg.dropout > 0.0 {
        tape.dropout(squashed, cfg.dropout, mode, rng)?
    } else {
        squashed
    };

    let (routed_input, attention_weights) = match (&bound.attention, cfg.attention) {
        (Some(attn), true) => {
            let (out, weights) = attention_pass(
                tape,
                attn,
                cfg.attn_output,
                caps,
                n,
                geo.num_capsules,
                cfg.primary_dim,
            )?;
            (out, Some(weights))
        }
        (None, false) => (caps, None),
        _ => {
            return Err(ModelError::Contract(
                "attention parameters do not match the configuration".into(),
            ))
        }
    };

    let mut routing_couplings = Vec::new();
    let digit_caps = match &bound.aggregator {
        BoundAgg::Routing { transforms } => routing_pass(
            tape,
            *transforms,
            routed_input,
            n,
            geo.num_capsules,
            cfg.primary_dim,
            cfg.num_classes,
            cfg.digit_dim,
            cfg.routing_iters,
            &mut routing_couplings,
        )?,
        BoundAgg::Recurrent {
            wx,
            wh,
            bias,
            out_w,
            out_b,
        } => recurrent_pass(
            tape,
            *wx,
            *wh,
            *bias,
            *out_w,
            *out_b,
            routed_input,
            n,
            geo.num_capsules,
            cfg.recurrent_hidden,
            cfg.num_classes,
            cfg.digit_dim,
        )?,
    };

    let lengths = tape.row_norms(digit_caps)?;
    let probs = tape.softmax(lengths, 1)?;
    let embedding = tape.reshape(digit_caps, &[n, geo.embedding_dim])?;

    Ok(Activations {
        digit_caps,
        lengths,
        probs,
        embedding,
        bn_nodes,
        routing_couplings,
        attention_weights,
    })
}

/// Binds `params` and runs one batch. Convenience wrapper around
/// [`bind_model`] + [`forward_bound`].
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&MfccFeatures],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Activations, TapeBinding)> {
    let bound = bind_model(tape, params);
    let acts = forward_bound(tape, &bound, cfg, batch, mode, rng)?;
    Ok((acts, bound.binding))
}

/// Argmax over each row of a `[N, K]` score node; ties go to the lowest index.
pub fn predict(tape: &Tape, scores: TensorId) -> Vec<usize> {
    let shape = tape.shape(scores);
    let k = *shape.last().unwrap_or(&1);
    tape.data(scores)
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
        .collect()
}
