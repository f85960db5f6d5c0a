//! Finite-difference validation of tape gradients.
//!
//! [`finite_diff_gradient`] is the independent oracle: central differences
//! of a black-box scalar function. [`op_gradient_suite`] instantiates every
//! tape operation on random inputs across many seeds and compares
//! [`crate::Tape::backward`] against that oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seeding::child_rng;
use crate::{Tape, Tensor, TensorId};

/// Central-difference gradient of `f` at `x`.
///
/// Step size `h` should sit in `[1e-6, 1e-4]`: large enough to survive
/// cancellation in `f64`, small enough to keep the O(h^2) truncation term
/// below the comparison tolerances.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    debug_assert!((1e-6..=1e-4).contains(&h), "step {h} outside sane range");
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Compares analytic and numeric gradients componentwise: relative error
/// below `1e-5` where the larger magnitude exceeds `1e-6`, absolute error
/// below `1e-7` otherwise. Returns the first offending component.
pub fn grads_match(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "length mismatch: {} analytic vs {} numeric",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let mag = a.abs().max(n.abs());
        if mag > 1e-6 {
            let rel = (a - n).abs() / mag;
            if rel > 1e-5 {
                return Err(format!(
                    "component {i}: analytic {a}, numeric {n}, relative error {rel:.3e}"
                ));
            }
        } else if (a - n).abs() > 1e-7 {
            return Err(format!(
                "component {i}: analytic {a}, numeric {n}, absolute error {:.3e}",
                (a - n).abs()
            ));
        }
    }
    Ok(())
}

type Builder = dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

/// Checks a tape-built scalar against finite differences over all inputs.
///
/// `numeric_scale` multiplies the oracle gradient before comparison; it is
/// 1 except for gradient-reversal, whose backward is deliberately `-lambda`
/// times the identity forward that the oracle sees.
pub fn check_gradients_scaled(
    inputs: &[Tensor],
    h: f64,
    numeric_scale: f64,
    build: &Builder,
) -> Result<(), String> {
    let mut tape: Tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &ids);
    tape.backward(out).map_err(|e| e.to_string())?;
    let mut analytic = Vec::new();
    for (&id, t) in ids.iter().zip(inputs) {
        match tape.grad(id) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape.clone()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data.iter().copied()).collect();
    let eval = |xs: &[f64]| -> f64 {
        let mut tape: Tape = Tape::new();
        let mut off = 0usize;
        let mut ids = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let numel: usize = shape.iter().product();
            let t = Tensor::from_vec(shape, xs[off..off + numel].to_vec())
                .unwrap()
                .with_grad();
            ids.push(tape.leaf(&t));
            off += numel;
        }
        let out = build(&mut tape, &ids);
        tape.value(out).unwrap()
    };
    let mut numeric = finite_diff_gradient(eval, &flat, h);
    for v in numeric.iter_mut() {
        *v *= numeric_scale;
    }
    grads_match(&analytic, &numeric)
}

/// [`check_gradients_scaled`] with the usual scale of 1.
pub fn check_gradients(inputs: &[Tensor], h: f64, build: &Builder) -> Result<(), String> {
    check_gradients_scaled(inputs, h, 1.0, build)
}

/// Outcome of one operation's multi-seed gradient check.
#[derive(Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub seeds: usize,
    pub failures: Vec<String>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn randn_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

/// Random positive tensor, bounded away from zero.
fn randpos_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t: Tensor = Tensor::randn(shape, 1.0, rng);
    for v in t.data.iter_mut() {
        *v = v.exp() + 0.1;
    }
    t.with_grad()
}

/// Nudges values away from the kink at `c` so central differences stay on
/// one side of it.
fn away_from(mut t: Tensor, c: f64) -> Tensor {
    for v in t.data.iter_mut() {
        if (*v - c).abs() < 0.01 {
            *v += 0.05;
        }
    }
    t
}

/// Pushes every trailing-axis row away from the origin, where norm-based
/// ops are non-differentiable.
fn rows_off_origin(mut t: Tensor) -> Tensor {
    let d = *t.shape.last().unwrap();
    for row in t.data.chunks_mut(d) {
        while row.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.2 {
            row[0] += 0.7;
        }
    }
    t
}

type Case = (Vec<Tensor>, f64, Box<dyn Fn(&mut Tape, &[TensorId]) -> TensorId>);

fn run_seeds(
    name: &'static str,
    seeds: usize,
    checks: &mut Vec<OpCheck>,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Case,
) {
    let mut failures = Vec::new();
    for s in 0..seeds {
        let mut rng = child_rng(s as u64, name);
        let (inputs, scale, build) = case(&mut rng);
        if let Err(e) = check_gradients_scaled(&inputs, 1e-5, scale, build.as_ref()) {
            failures.push(format!("seed {s}: {e}"));
        }
    }
    checks.push(OpCheck {
        name,
        seeds,
        failures,
    });
}

/// Weights the (possibly non-scalar) node with fixed random coefficients
/// and sums, so the scalar output is sensitive to every component.
fn weighted_sum(tape: &mut Tape, id: TensorId, w: &[f64]) -> TensorId {
    let shape = tape.shape(id).to_vec();
    let wid = tape.constant(&shape, w).unwrap();
    let p = tape.mul(id, wid).unwrap();
    tape.sum_all(p).unwrap()
}

fn rand_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Runs every differentiable tape operation through the finite-difference
/// oracle on `seeds_per_op` random instances each.
pub fn op_gradient_suite(seeds_per_op: usize) -> Vec<OpCheck> {
    let n = seeds_per_op;
    let mut checks = Vec::new();

    run_seeds("add_broadcast", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let b = randn_t(&[3, 1], rng);
        let w = rand_weights(24, rng);
        (
            vec![a, b],
            1.0,
            Box::new(move |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("sub_broadcast", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let b = randn_t(&[2, 1, 4], rng);
        let w = rand_weights(24, rng);
        (
            vec![a, b],
            1.0,
            Box::new(move |t, ids| {
                let s = t.sub(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("mul_broadcast", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let b = randn_t(&[4], rng);
        let w = rand_weights(24, rng);
        (
            vec![a, b],
            1.0,
            Box::new(move |t, ids| {
                let s = t.mul(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("scale", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let k = rng.gen_range(-2.0..2.0);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.scale(ids[0], k).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("add_scalar", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let k = rng.gen_range(-2.0..2.0);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.add_scalar(ids[0], k).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("matmul", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let b = randn_t(&[4, 2], rng);
        let w = rand_weights(6, rng);
        (
            vec![a, b],
            1.0,
            Box::new(move |t, ids| {
                let s = t.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("bmm", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let b = randn_t(&[2, 4, 2], rng);
        let w = rand_weights(12, rng);
        (
            vec![a, b],
            1.0,
            Box::new(move |t, ids| {
                let s = t.bmm(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("transpose_last2", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let w = rand_weights(24, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.transpose_last2(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("reshape", n, &mut checks, |rng| {
        let a = randn_t(&[2, 6], rng);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.reshape(ids[0], &[3, 4]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("select1", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4, 2], rng);
        let idx = rng.gen_range(0..4);
        let w = rand_weights(6, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.select1(ids[0], idx).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("sum_all", n, &mut checks, |rng| {
        let a = randn_t(&[3, 3], rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| t.sum_all(ids[0]).unwrap()),
        )
    });

    run_seeds("mean_all", n, &mut checks, |rng| {
        let a = randn_t(&[3, 3], rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| t.mean_all(ids[0]).unwrap()),
        )
    });

    run_seeds("sum_axis", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let axis = rng.gen_range(0..3);
        let w = rand_weights(24 / [2, 3, 4][axis], rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.sum_axis(ids[0], axis).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("conv2d_valid", n, &mut checks, |rng| {
        let x = randn_t(&[2, 5, 6, 3], rng);
        let k = randn_t(&[3, 3, 3, 2], rng);
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let oh = (5 - 3) / stride.0 + 1;
        let ow = (6 - 3) / stride.1 + 1;
        let w = rand_weights(2 * oh * ow * 2, rng);
        (
            vec![x, k],
            1.0,
            Box::new(move |t, ids| {
                let s = t.conv2d(ids[0], ids[1], stride, crate::Padding::Valid).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("conv2d_same", n, &mut checks, |rng| {
        let x = randn_t(&[2, 5, 6, 3], rng);
        let k = randn_t(&[3, 3, 3, 2], rng);
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let oh = (5 + 2 - 3) / stride.0 + 1;
        let ow = (6 + 2 - 3) / stride.1 + 1;
        let w = rand_weights(2 * oh * ow * 2, rng);
        (
            vec![x, k],
            1.0,
            Box::new(move |t, ids| {
                let s = t.conv2d(ids[0], ids[1], stride, crate::Padding::Same).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("avg_pool2d", n, &mut checks, |rng| {
        let x = randn_t(&[2, 5, 6, 3], rng);
        let w = rand_weights(2 * 4 * 3 * 3, rng);
        (
            vec![x],
            1.0,
            Box::new(move |t, ids| {
                let s = t.avg_pool2d(ids[0], (2, 2), (1, 2)).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("batch_norm_train", n, &mut checks, |rng| {
        let x = randn_t(&[2, 3, 2, 4], rng);
        let gamma = randn_t(&[4], rng);
        let beta = randn_t(&[4], rng);
        let w = rand_weights(48, rng);
        (
            vec![x, gamma, beta],
            1.0,
            Box::new(move |t, ids| {
                let s = t
                    .batch_norm(
                        ids[0],
                        ids[1],
                        ids[2],
                        &[0.0; 4],
                        &[1.0; 4],
                        1e-5,
                        crate::Mode::Train,
                    )
                    .unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("batch_norm_eval", n, &mut checks, |rng| {
        let x = randn_t(&[6, 3], rng);
        let gamma = randn_t(&[3], rng);
        let beta = randn_t(&[3], rng);
        let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..2.0)).collect();
        let w = rand_weights(18, rng);
        (
            vec![x, gamma, beta],
            1.0,
            Box::new(move |t, ids| {
                let s = t
                    .batch_norm(ids[0], ids[1], ids[2], &mean, &var, 1e-5, crate::Mode::Eval)
                    .unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("elu", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.elu(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("tanh", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.tanh(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("clamp_min", n, &mut checks, |rng| {
        let a = away_from(randn_t(&[3, 4], rng), 0.2);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.clamp_min(ids[0], 0.2).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("log", n, &mut checks, |rng| {
        let a = randpos_t(&[3, 4], rng);
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.log(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("softmax", n, &mut checks, |rng| {
        let a = randn_t(&[2, 3, 4], rng);
        let axis = rng.gen_range(0..3);
        let w = rand_weights(24, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.softmax(ids[0], axis).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("dropout_train", n, &mut checks, |rng| {
        let a = randn_t(&[4, 5], rng);
        let mask_seed: u64 = rng.gen();
        let w = rand_weights(20, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                // The mask must be identical across oracle re-evaluations,
                // so the stream is reseeded inside the builder.
                let mut mrng = child_rng(mask_seed, "dropout-mask");
                let s = t.dropout(ids[0], 0.25, crate::Mode::Train, &mut mrng).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("squash", n, &mut checks, |rng| {
        let a = rows_off_origin(randn_t(&[3, 4], rng));
        let w = rand_weights(12, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.squash(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("row_norms", n, &mut checks, |rng| {
        let a = rows_off_origin(randn_t(&[3, 4], rng));
        let w = rand_weights(3, rng);
        (
            vec![a],
            1.0,
            Box::new(move |t, ids| {
                let s = t.row_norms(ids[0]).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    run_seeds("grl", n, &mut checks, |rng| {
        let a = randn_t(&[3, 4], rng);
        let lambda = rng.gen_range(0.2..2.0);
        let w = rand_weights(12, rng);
        (
            vec![a],
            -lambda,
            Box::new(move |t, ids| {
                let s = t.grl(ids[0], lambda).unwrap();
                weighted_sum(t, s, &w)
            }),
        )
    });

    checks
}
