//! Arena-based computation tape.
//!
//! Forward operations append a node holding the result data plus the op
//! metadata needed for its adjoint, and return a [`TensorId`]. Gradients
//! are produced by [`Tape::backward`], which seeds the root with 1 and
//! sweeps the arena in reverse. Nodes whose subtree contains no trainable
//! leaf are skipped.
//!
//! Broadcasting for the elementwise ops follows the usual trailing-axes
//! rule: shapes are right-aligned and a dimension of 1 stretches.

use rand::Rng;

use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Whether stochastic layers (dropout) and batch statistics are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Spatial padding scheme for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding of `(k - 1) / 2` per side; requires odd kernel dims and
    /// preserves spatial size at stride 1.
    Same,
}

/// Per-channel statistics captured by a train-mode batch-norm node, for the
/// caller to fold into its running averages.
#[derive(Debug, Clone)]
pub struct BnStats<S: Scalar = f64> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize, S),
    Matmul(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    Reshape(usize),
    Select1(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    AvgPool2d {
        input: usize,
        window: (usize, usize),
        stride: (usize, usize),
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: S,
        mean: Vec<S>,
        var: Vec<S>,
        train: bool,
    },
    Elu(usize),
    Tanh(usize),
    ClampMin(usize, S),
    Log(usize),
    Softmax(usize, usize),
    Dropout {
        input: usize,
        mask: Vec<S>,
    },
    Squash(usize),
    RowNorms(usize),
    Grl(usize, S),
}

struct Node<S: Scalar> {
    op: Op<S>,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

/// Arena of computation nodes; see the module docs.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies a tensor onto the tape, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Non-trainable leaf from raw parts.
    pub fn constant(&mut self, shape: &[usize], data: &[S]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Shape(format!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data.to_vec(), Op::Leaf, false))
    }

    /// Rank-0 non-trainable leaf.
    pub fn scalar_const(&mut self, v: S) -> TensorId {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Extracts the value of a single-element node.
    pub fn value(&self, id: TensorId) -> Result<S> {
        if self.nodes[id.0].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "value() needs a single-element node, got shape {:?}",
                self.nodes[id.0].shape
            )));
        }
        Ok(self.nodes[id.0].data[0])
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Batch statistics of a train-mode batch-norm node.
    pub fn batch_stats(&self, id: TensorId) -> Option<BnStats<S>> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean, var, train, ..
            } if *train => Some(BnStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            _ => None,
        }
    }

    // ---- elementwise & broadcast ----

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape).ok_or_else(|| {
            TensorError::Shape(format!(
                "{what}: cannot broadcast {:?} with {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            ))
        })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = self.binary_shapes(a, b, "add")?;
        let data = self.bcast_zip(&out_shape, a, b, |x, y| x + y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out_shape, data, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = self.binary_shapes(a, b, "sub")?;
        let data = self.bcast_zip(&out_shape, a, b, |x, y| x - y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out_shape, data, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = self.binary_shapes(a, b, "mul")?;
        let data = self.bcast_zip(&out_shape, a, b, |x, y| x * y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out_shape, data, Op::Mul(a.0, b.0), rg))
    }

    fn bcast_zip(
        &self,
        out_shape: &[usize],
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
    ) -> Vec<S> {
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            return da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        }
        let numel: usize = out_shape.iter().product();
        let mut out = vec![S::zero(); numel];
        let sa = bcast_strides(&self.nodes[a.0].shape, out_shape);
        let sb = bcast_strides(&self.nodes[b.0].shape, out_shape);
        for_each_bcast(out_shape, &sa, &sb, |o, ia, ib| {
            out[o] = f(da[ia], db[ib]);
        });
        out
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> Result<TensorId> {
        let k = S::from_f64(k);
        let data = self.nodes[a.0].data.iter().map(|&x| x * k).collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a.0, k), rg))
    }

    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> Result<TensorId> {
        let k = S::from_f64(k);
        let data = self.nodes[a.0].data.iter().map(|&x| x + k).collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::AddScalar(a.0, k), rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Shape(format!(
                "matmul needs two rank-2 operands, got {sa:?} x {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(TensorError::Shape(format!(
                "matmul inner dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a.0, b.0), rg))
    }

    /// Batched matmul: `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape(format!(
                "bmm needs [B,m,k] x [B,k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        for bi in 0..bs {
            matmul_into(
                &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![bs, m, n], out, Op::Bmm(a.0, b.0), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() < 2 {
            return Err(TensorError::Shape(format!(
                "transpose_last2 needs rank >= 2, got {sa:?}"
            )));
        }
        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); src.len()];
        for bi in 0..batch {
            let so = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[so + j * m + i] = src[so + i * n + j];
                }
            }
        }
        let mut shape = sa.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.req(a);
        Ok(self.push(shape, out, Op::TransposeLast2(a.0), rg))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(TensorError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.req(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), rg))
    }

    /// Picks index `idx` along axis 1: `[A, B, rest...] -> [A, rest...]`.
    pub fn select1(&mut self, a: TensorId, idx: usize) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() < 2 {
            return Err(TensorError::Shape(format!(
                "select1 needs rank >= 2, got {sa:?}"
            )));
        }
        if idx >= sa[1] {
            return Err(TensorError::Dimension(format!(
                "select1 index {idx} out of range for axis of size {}",
                sa[1]
            )));
        }
        let (a0, a1) = (sa[0], sa[1]);
        let rest: usize = sa[2..].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); a0 * rest];
        for i in 0..a0 {
            let so = (i * a1 + idx) * rest;
            out[i * rest..(i + 1) * rest].copy_from_slice(&src[so..so + rest]);
        }
        let mut shape = vec![a0];
        shape.extend_from_slice(&sa[2..]);
        let rg = self.req(a);
        Ok(self.push(shape, out, Op::Select1(a.0, idx), rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: S = self.nodes[a.0].data.iter().copied().sum();
        let rg = self.req(a);
        Ok(self.push(vec![], vec![s], Op::SumAll(a.0), rg))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s: S = self.nodes[a.0].data.iter().copied().sum();
        let m = s / S::from_f64(n as f64);
        let rg = self.req(a);
        Ok(self.push(vec![], vec![m], Op::MeanAll(a.0), rg))
    }

    /// Sums out one axis, dropping it from the shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if axis >= sa.len() {
            return Err(TensorError::Dimension(format!(
                "sum_axis {axis} out of range for shape {sa:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let ax = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..ax {
                let so = (o * ax + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[so + i];
                }
            }
        }
        let mut shape = sa[..axis].to_vec();
        shape.extend_from_slice(&sa[axis + 1..]);
        let rg = self.req(a);
        Ok(self.push(shape, out, Op::SumAxis(a.0, axis), rg))
    }

    // ---- structured ops ----

    fn conv_geom(
        &self,
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<(ConvGeom, bool)> {
        let si = &self.nodes[input.0].shape;
        let sk = &self.nodes[kernel.0].shape;
        let (batched, n, h, w, cin) = match si.len() {
            3 => (false, 1, si[0], si[1], si[2]),
            4 => (true, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(TensorError::Shape(format!(
                    "conv2d input must be [H,W,C] or [N,H,W,C], got {si:?}"
                )))
            }
        };
        if sk.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d kernel must be [KH,KW,Cin,Cout], got {sk:?}"
            )));
        }
        let (kh, kw, kcin, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin {
            return Err(TensorError::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Contract("conv2d stride must be >= 1".into()));
        }
        let pad = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::Dimension(format!(
                        "same padding needs odd kernel dims, got {kh}x{kw}"
                    )));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
        };
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(TensorError::Dimension(format!(
                "{kh}x{kw} kernel exceeds padded input {}x{}",
                h + 2 * pad.0,
                w + 2 * pad.1
            )));
        }
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        Ok((
            ConvGeom {
                n,
                h,
                w,
                cin,
                kh,
                kw,
                cout,
                stride,
                pad,
                oh,
                ow,
            },
            batched,
        ))
    }

    /// 2-D convolution over channels-last input (`[N,H,W,C]`, or `[H,W,C]`
    /// treated as a batch of one).
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<TensorId> {
        let (geom, batched) = self.conv_geom(input, kernel, stride, padding)?;
        let mut out = vec![S::zero(); geom.n * geom.oh * geom.ow * geom.cout];
        kernels::conv2d_forward(
            &geom,
            &self.nodes[input.0].data,
            &self.nodes[kernel.0].data,
            &mut out,
        );
        let shape = if batched {
            vec![geom.n, geom.oh, geom.ow, geom.cout]
        } else {
            vec![geom.oh, geom.ow, geom.cout]
        };
        let rg = self.req(input) || self.req(kernel);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad: geom.pad,
            },
            rg,
        ))
    }

    fn pool_geom(
        &self,
        input: TensorId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(PoolGeom, bool)> {
        let si = &self.nodes[input.0].shape;
        let (batched, n, h, w, c) = match si.len() {
            3 => (false, 1, si[0], si[1], si[2]),
            4 => (true, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(TensorError::Shape(format!(
                    "avg_pool2d input must be [H,W,C] or [N,H,W,C], got {si:?}"
                )))
            }
        };
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Contract(
                "avg_pool2d window and stride must be >= 1".into(),
            ));
        }
        if window.0 > h || window.1 > w {
            return Err(TensorError::Dimension(format!(
                "{}x{} pooling window exceeds input {h}x{w}",
                window.0, window.1
            )));
        }
        let oh = (h - window.0) / stride.0 + 1;
        let ow = (w - window.1) / stride.1 + 1;
        Ok((
            PoolGeom {
                n,
                h,
                w,
                c,
                window,
                stride,
                oh,
                ow,
            },
            batched,
        ))
    }

    /// Average pooling (valid region only, no padding).
    pub fn avg_pool2d(
        &mut self,
        input: TensorId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<TensorId> {
        let (geom, batched) = self.pool_geom(input, window, stride)?;
        let mut out = vec![S::zero(); geom.n * geom.oh * geom.ow * geom.c];
        kernels::avg_pool_forward(&geom, &self.nodes[input.0].data, &mut out);
        let shape = if batched {
            vec![geom.n, geom.oh, geom.ow, geom.c]
        } else {
            vec![geom.oh, geom.ow, geom.c]
        };
        let rg = self.req(input);
        Ok(self.push(
            shape,
            out,
            Op::AvgPool2d {
                input: input.0,
                window,
                stride,
            },
            rg,
        ))
    }

    /// Batch normalization over the trailing channel axis.
    ///
    /// `Mode::Train` normalizes with biased batch statistics (retrievable
    /// through [`Tape::batch_stats`] so the caller can update its running
    /// averages); `Mode::Eval` normalizes with the supplied running
    /// statistics, which are treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
        mode: Mode,
    ) -> Result<TensorId> {
        let si = &self.nodes[input.0].shape;
        if si.len() < 2 {
            return Err(TensorError::Shape(format!(
                "batch_norm input must have rank >= 2, got {si:?}"
            )));
        }
        let c = *si.last().unwrap();
        let rows = self.nodes[input.0].data.len() / c;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].data.len() != c {
                return Err(TensorError::Shape(format!(
                    "batch_norm {name} must have {c} elements, got shape {:?}",
                    self.nodes[id.0].shape
                )));
            }
        }
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let x = &self.nodes[input.0].data;
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] += x[r * c + ch];
                }
            }
            let inv = S::from_f64(1.0 / rows as f64);
            for ch in 0..c {
                mean[ch] *= inv;
            }
            for r in 0..rows {
                for ch in 0..c {
                    let d = x[r * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            for ch in 0..c {
                var[ch] *= inv;
            }
            (mean, var)
        } else {
            if running_mean.len() != c || running_var.len() != c {
                return Err(TensorError::Shape(format!(
                    "batch_norm running stats must have {c} elements, got {}/{}",
                    running_mean.len(),
                    running_var.len()
                )));
            }
            (running_mean.to_vec(), running_var.to_vec())
        };
        let epss = S::from_f64(eps);
        let x = &self.nodes[input.0].data;
        let ga = &self.nodes[gamma.0].data;
        let be = &self.nodes[beta.0].data;
        let istd: Vec<S> = var.iter().map(|&v| (v + epss).sqrt().recip()).collect();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            for ch in 0..c {
                let xhat = (x[r * c + ch] - mean[ch]) * istd[ch];
                out[r * c + ch] = ga[ch] * xhat + be[ch];
            }
        }
        let rg = self.req(input) || self.req(gamma) || self.req(beta);
        let shape = si.clone();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                eps: epss,
                mean,
                var,
                train,
            },
            rg,
        ))
    }

    // ---- nonlinearities ----

    /// Exponential linear unit with unit slope: `x` for `x > 0`, else
    /// `exp(x) - 1`.
    pub fn elu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > S::zero() { x } else { x.exp() - S::one() })
            .collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Elu(a.0), rg))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Tanh(a.0), rg))
    }

    /// `max(x, c)`. The derivative at the boundary `x == c` is taken as 0
    /// (the flat side), so hinge losses built from this op propagate no
    /// gradient from exactly-satisfied margins.
    pub fn clamp_min(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cs = S::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(cs)).collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::ClampMin(a.0, cs), rg))
    }

    /// Natural log. The caller is responsible for keeping inputs positive
    /// (typically via [`Tape::clamp_min`]).
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let rg = self.req(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Log(a.0), rg))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if axis >= sa.len() {
            return Err(TensorError::Dimension(format!(
                "softmax axis {axis} out of range for shape {sa:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let ax = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * ax + k) * inner + i;
                let mut mx = src[at(0)];
                for k in 1..ax {
                    mx = mx.max(src[at(k)]);
                }
                let mut denom = S::zero();
                for k in 0..ax {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    denom += e;
                }
                for k in 0..ax {
                    out[at(k)] /= denom;
                }
            }
        }
        let rg = self.req(a);
        let shape = sa.clone();
        Ok(self.push(shape, out, Op::Softmax(a.0, axis), rg))
    }

    /// Inverted dropout: in train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.nodes[a.0].data.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.req(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Dropout { input: a.0, mask },
            rg,
        ))
    }

    /// Capsule squashing along the last axis: each row `s` maps to
    /// `(|s|^2 / (1 + |s|^2)) * s / |s|`, i.e. same direction, norm in
    /// `[0, 1)`. The zero row maps to zero.
    pub fn squash(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(TensorError::Shape("squash needs rank >= 1".into()));
        }
        let d = *sa.last().unwrap();
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); src.len()];
        for row in src.chunks(d).zip(out.chunks_mut(d)) {
            let (x, y) = row;
            let r2: S = x.iter().map(|&v| v * v).sum();
            let r = r2.sqrt();
            let phi = r / (S::one() + r2);
            for (yo, &xi) in y.iter_mut().zip(x) {
                *yo = xi * phi;
            }
        }
        let rg = self.req(a);
        let shape = sa.clone();
        Ok(self.push(shape, out, Op::Squash(a.0), rg))
    }

    /// Euclidean norm of each row along the last axis; the axis is dropped.
    /// The derivative at an exactly-zero row is taken as 0.
    pub fn row_norms(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(TensorError::Shape("row_norms needs rank >= 1".into()));
        }
        let d = *sa.last().unwrap();
        let src = &self.nodes[a.0].data;
        let out: Vec<S> = src
            .chunks(d)
            .map(|x| x.iter().map(|&v| v * v).sum::<S>().sqrt())
            .collect();
        let shape = sa[..sa.len() - 1].to_vec();
        let rg = self.req(a);
        Ok(self.push(shape, out, Op::RowNorms(a.0), rg))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` on
    /// the way back.
    pub fn grl(&mut self, a: TensorId, lambda: f64) -> Result<TensorId> {
        let data = self.nodes[a.0].data.clone();
        let rg = self.req(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Grl(a.0, S::from_f64(lambda)),
            rg,
        ))
    }

    // ---- reverse sweep ----

    /// Accumulates gradients of the scalar `root` into every trainable
    /// ancestor; read them back with [`Tape::grad`]. Prior gradients on
    /// this tape are cleared.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let nodes = &self.nodes;
        let ensure = |grads: &mut Vec<Option<Vec<S>>>, id: usize| {
            if grads[id].is_none() {
                grads[id] = Some(vec![S::zero(); nodes[id].data.len()]);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bcast_accumulate(i, *a, g, grads, |go| go);
                self.bcast_accumulate(i, *b, g, grads, |go| go);
            }
            Op::Sub(a, b) => {
                self.bcast_accumulate(i, *a, g, grads, |go| go);
                self.bcast_accumulate(i, *b, g, grads, |go| -go);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.bcast_accumulate_paired(i, a, b, g, grads);
                self.bcast_accumulate_paired(i, b, a, g, grads);
            }
            Op::Scale(a, k) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    for (d, &go) in da.iter_mut().zip(g) {
                        *d += go * *k;
                    }
                }
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    for (d, &go) in da.iter_mut().zip(g) {
                        *d += go;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n2 = nodes[*b].shape[1];
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    matmul_grad_lhs(g, &nodes[*b].data, da, m, k, n2);
                }
                if nodes[*b].requires_grad {
                    ensure(grads, *b);
                    let db = grads[*b].as_mut().unwrap();
                    matmul_grad_rhs(&nodes[*a].data, g, db, m, k, n2);
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = (nodes[*a].shape[0], nodes[*a].shape[1], nodes[*a].shape[2]);
                let n2 = nodes[*b].shape[2];
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    for bi in 0..bs {
                        matmul_grad_lhs(
                            &g[bi * m * n2..(bi + 1) * m * n2],
                            &nodes[*b].data[bi * k * n2..(bi + 1) * k * n2],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n2,
                        );
                    }
                }
                if nodes[*b].requires_grad {
                    ensure(grads, *b);
                    let db = grads[*b].as_mut().unwrap();
                    for bi in 0..bs {
                        matmul_grad_rhs(
                            &nodes[*a].data[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n2..(bi + 1) * m * n2],
                            &mut db[bi * k * n2..(bi + 1) * k * n2],
                            m,
                            k,
                            n2,
                        );
                    }
                }
            }
            Op::TransposeLast2(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let sa = &nodes[*a].shape;
                    let (m, n2) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    for bi in 0..batch {
                        let so = bi * m * n2;
                        for r in 0..m {
                            for c2 in 0..n2 {
                                da[so + r * n2 + c2] += g[so + c2 * m + r];
                            }
                        }
                    }
                }
            }
            Op::Select1(a, idx) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let sa = &nodes[*a].shape;
                    let (a0, a1) = (sa[0], sa[1]);
                    let rest: usize = sa[2..].iter().product();
                    for r in 0..a0 {
                        let doff = (r * a1 + idx) * rest;
                        for j in 0..rest {
                            da[doff + j] += g[r * rest + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let inv = S::from_f64(1.0 / nodes[*a].data.len() as f64);
                    for d in da.iter_mut() {
                        *d += g[0] * inv;
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let sa = &nodes[*a].shape;
                    let outer: usize = sa[..*axis].iter().product();
                    let ax = sa[*axis];
                    let inner: usize = sa[*axis + 1..].iter().product();
                    for o in 0..outer {
                        for k in 0..ax {
                            let doff = (o * ax + k) * inner;
                            for j in 0..inner {
                                da[doff + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let geom = self.rebuild_conv_geom(*input, *kernel, *stride, *pad);
                let mut gi = if nodes[*input].requires_grad {
                    ensure(grads, *input);
                    grads[*input].take()
                } else {
                    None
                };
                let mut gk = if nodes[*kernel].requires_grad {
                    ensure(grads, *kernel);
                    grads[*kernel].take()
                } else {
                    None
                };
                kernels::conv2d_backward(
                    &geom,
                    &nodes[*input].data,
                    &nodes[*kernel].data,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if gi.is_some() {
                    grads[*input] = gi;
                }
                if gk.is_some() {
                    grads[*kernel] = gk;
                }
            }
            Op::AvgPool2d {
                input,
                window,
                stride,
            } => {
                if nodes[*input].requires_grad {
                    ensure(grads, *input);
                    let si = &nodes[*input].shape;
                    let (n2, h, w, c) = if si.len() == 3 {
                        (1, si[0], si[1], si[2])
                    } else {
                        (si[0], si[1], si[2], si[3])
                    };
                    let geom = PoolGeom {
                        n: n2,
                        h,
                        w,
                        c,
                        window: *window,
                        stride: *stride,
                        oh: (h - window.0) / stride.0 + 1,
                        ow: (w - window.1) / stride.1 + 1,
                    };
                    kernels::avg_pool_backward(&geom, g, grads[*input].as_mut().unwrap());
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
                train,
            } => {
                let x = &nodes[*input].data;
                let c = *nodes[i].shape.last().unwrap();
                let rows = x.len() / c;
                let istd: Vec<S> = var.iter().map(|&v| (v + *eps).sqrt().recip()).collect();
                // Per-channel sums of g and g * xhat feed all three adjoints.
                let mut s1 = vec![S::zero(); c];
                let mut s2 = vec![S::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        let go = g[r * c + ch];
                        let xhat = (x[r * c + ch] - mean[ch]) * istd[ch];
                        s1[ch] += go;
                        s2[ch] += go * xhat;
                    }
                }
                if nodes[*gamma].requires_grad {
                    ensure(grads, *gamma);
                    let dg = grads[*gamma].as_mut().unwrap();
                    for ch in 0..c {
                        dg[ch] += s2[ch];
                    }
                }
                if nodes[*beta].requires_grad {
                    ensure(grads, *beta);
                    let db = grads[*beta].as_mut().unwrap();
                    for ch in 0..c {
                        db[ch] += s1[ch];
                    }
                }
                if nodes[*input].requires_grad {
                    ensure(grads, *input);
                    let dx = grads[*input].as_mut().unwrap();
                    let ga = &nodes[*gamma].data;
                    let inv_rows = S::from_f64(1.0 / rows as f64);
                    for r in 0..rows {
                        for ch in 0..c {
                            let go = g[r * c + ch];
                            let coef = ga[ch] * istd[ch];
                            if *train {
                                let xhat = (x[r * c + ch] - mean[ch]) * istd[ch];
                                dx[r * c + ch] +=
                                    coef * (go - s1[ch] * inv_rows - xhat * s2[ch] * inv_rows);
                            } else {
                                dx[r * c + ch] += coef * go;
                            }
                        }
                    }
                }
            }
            Op::Elu(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let x = &nodes[*a].data;
                    let y = &nodes[i].data;
                    for j in 0..x.len() {
                        let d = if x[j] > S::zero() {
                            S::one()
                        } else {
                            y[j] + S::one()
                        };
                        da[j] += g[j] * d;
                    }
                }
            }
            Op::Tanh(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let y = &nodes[i].data;
                    for j in 0..y.len() {
                        da[j] += g[j] * (S::one() - y[j] * y[j]);
                    }
                }
            }
            Op::ClampMin(a, c) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let x = &nodes[*a].data;
                    for j in 0..x.len() {
                        if x[j] > *c {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Log(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let x = &nodes[*a].data;
                    for j in 0..x.len() {
                        da[j] += g[j] / x[j];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let y = &nodes[i].data;
                    let sa = &nodes[i].shape;
                    let outer: usize = sa[..*axis].iter().product();
                    let ax = sa[*axis];
                    let inner: usize = sa[*axis + 1..].iter().product();
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * ax + k) * inner + j;
                            let mut dot = S::zero();
                            for k in 0..ax {
                                dot += g[at(k)] * y[at(k)];
                            }
                            for k in 0..ax {
                                da[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if nodes[*input].requires_grad {
                    ensure(grads, *input);
                    let da = grads[*input].as_mut().unwrap();
                    for j in 0..mask.len() {
                        da[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Squash(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let x = &nodes[*a].data;
                    let d = *nodes[*a].shape.last().unwrap();
                    for row in 0..x.len() / d {
                        let xr = &x[row * d..(row + 1) * d];
                        let gr = &g[row * d..(row + 1) * d];
                        let r2: S = xr.iter().map(|&v| v * v).sum();
                        let r = r2.sqrt();
                        if r <= S::zero() {
                            continue;
                        }
                        let denom = S::one() + r2;
                        let phi = r / denom;
                        let ux: S = gr.iter().zip(xr).map(|(&u, &v)| u * v).sum();
                        // d(phi)/dr = (1 - r^2) / (1 + r^2)^2
                        let c2 = ux * (S::one() - r2) / (denom * denom * r);
                        let dr = &mut da[row * d..(row + 1) * d];
                        for j in 0..d {
                            dr[j] += phi * gr[j] + c2 * xr[j];
                        }
                    }
                }
            }
            Op::RowNorms(a) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    let x = &nodes[*a].data;
                    let y = &nodes[i].data;
                    let d = *nodes[*a].shape.last().unwrap();
                    for row in 0..y.len() {
                        let r = y[row];
                        if r <= S::zero() {
                            continue;
                        }
                        let go = g[row] / r;
                        let xr = &x[row * d..(row + 1) * d];
                        let dr = &mut da[row * d..(row + 1) * d];
                        for j in 0..d {
                            dr[j] += go * xr[j];
                        }
                    }
                }
            }
            Op::Grl(a, lambda) => {
                if nodes[*a].requires_grad {
                    ensure(grads, *a);
                    let da = grads[*a].as_mut().unwrap();
                    for (dslot, &go) in da.iter_mut().zip(g) {
                        *dslot -= *lambda * go;
                    }
                }
            }
        }
    }

    fn rebuild_conv_geom(
        &self,
        input: usize,
        kernel: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> ConvGeom {
        let si = &self.nodes[input].shape;
        let sk = &self.nodes[kernel].shape;
        let (n, h, w, cin) = if si.len() == 3 {
            (1, si[0], si[1], si[2])
        } else {
            (si[0], si[1], si[2], si[3])
        };
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad.0 - kh) / stride.0 + 1,
            ow: (w + 2 * pad.1 - kw) / stride.1 + 1,
        }
    }

    /// Adds the (possibly reweighted) upstream gradient into `target`
    /// through the broadcast index map, summing over stretched axes.
    fn bcast_accumulate(
        &self,
        out: usize,
        target: usize,
        g: &[S],
        grads: &mut Vec<Option<Vec<S>>>,
        f: impl Fn(S) -> S,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        if grads[target].is_none() {
            grads[target] = Some(vec![S::zero(); self.nodes[target].data.len()]);
        }
        let da = grads[target].as_mut().unwrap();
        let out_shape = &self.nodes[out].shape;
        if self.nodes[target].shape == *out_shape {
            for (d, &go) in da.iter_mut().zip(g) {
                *d += f(go);
            }
            return;
        }
        let st = bcast_strides(&self.nodes[target].shape, out_shape);
        let zero = vec![0usize; out_shape.len()];
        for_each_bcast(out_shape, &st, &zero, |o, it, _| {
            da[it] += f(g[o]);
        });
    }

    /// Product-rule half: accumulates `g * other` into `target` through the
    /// broadcast maps of a `Mul` node.
    fn bcast_accumulate_paired(
        &self,
        out: usize,
        target: usize,
        other: usize,
        g: &[S],
        grads: &mut Vec<Option<Vec<S>>>,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        if grads[target].is_none() {
            grads[target] = Some(vec![S::zero(); self.nodes[target].data.len()]);
        }
        let da = grads[target].as_mut().unwrap();
        let dother = &self.nodes[other].data;
        let out_shape = &self.nodes[out].shape;
        if self.nodes[target].shape == *out_shape && self.nodes[other].shape == *out_shape {
            for j in 0..g.len() {
                da[j] += g[j] * dother[j];
            }
            return;
        }
        let st = bcast_strides(&self.nodes[target].shape, out_shape);
        let so = bcast_strides(&self.nodes[other].shape, out_shape);
        for_each_bcast(out_shape, &st, &so, |o, it, io| {
            da[it] += g[o] * dother[io];
        });
    }
}

/// Broadcast shape of `a` and `b` under the trailing-axes rule, or `None`
/// if they are incompatible.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape` viewed through `out` (left-padded with 1s),
/// with stride 0 on stretched axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut real = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        real[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    real
}

/// Walks the flattened broadcast output, handing each visit the flat output
/// index plus the mapped indices into the two operands.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let v = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += v * brow[j];
            }
        }
    }
}

/// dA += G * B^T for C = A*B with A [m,k], B [k,n], G [m,n].
fn matmul_grad_lhs<S: Scalar>(g: &[S], b: &[S], da: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            da[i * k + kk] += acc;
        }
    }
}

/// dB += A^T * G for C = A*B.
fn matmul_grad_rhs<S: Scalar>(a: &[S], g: &[S], db: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let v = a[i * k + kk];
            let brow = &mut db[kk * n..(kk + 1) * n];
            for j in 0..n {
                brow[j] += v * grow[j];
            }
        }
    }
}
