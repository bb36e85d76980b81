//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records what its gradient rule needs. Node
//! ids are handed out in creation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{bilinear, bilinear_adjoint, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Floor applied inside [`Graph::ln`].
pub const LN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable op. `backward` returns one gradient per input,
/// each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    Ln,
    Sum,
    Mean,
    Reshape,
    Conv3d(ConvGeom),
    Conv2d(ConvGeom),
    BiasAdd,
    TemporalAvgPool,
    GlobalAvgPool,
    Upsample,
    SpatialSoftmax,
    SoftmaxVector,
    LogSoftmax,
    Pick(usize),
    Attention,
    ConcatChannels(Vec<usize>),
    FullyConnected,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Standardize { inv_std: f64 },
    WeightedSum(Tensor),
    Custom(Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scalar_mul",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Ln => "ln",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::Conv3d(_) => "conv3d",
            Op::Conv2d(_) => "conv2d_spatial",
            Op::BiasAdd => "bias_add",
            Op::TemporalAvgPool => "temporal_avg_pool",
            Op::GlobalAvgPool => "global_temporal_avg_pool",
            Op::Upsample => "upsample_spatial",
            Op::SpatialSoftmax => "spatial_softmax",
            Op::SoftmaxVector => "softmax_vector",
            Op::LogSoftmax => "log_softmax",
            Op::Pick(_) => "pick",
            Op::Attention => "apply_attention",
            Op::ConcatChannels(_) => "concat_channels",
            Op::FullyConnected => "fully_connected",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Standardize { .. } => "standardize",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Custom(c) => c.name(),
        }
    }
}

/// Names of every built-in differentiable op (leaves and custom ops excluded).
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "add_scalar",
    "relu",
    "sigmoid",
    "softplus",
    "ln",
    "sum",
    "mean",
    "reshape",
    "conv3d",
    "conv2d_spatial",
    "bias_add",
    "temporal_avg_pool",
    "global_temporal_avg_pool",
    "upsample_spatial",
    "spatial_softmax",
    "softmax_vector",
    "log_softmax",
    "pick",
    "apply_attention",
    "concat_channels",
    "fully_connected",
    "batch_norm",
    "standardize",
    "weighted_sum",
];

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_all(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Population mean and standard deviation; `None` for a (numerically) constant
/// input.
pub(crate) fn mean_std(x: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if sd <= 1e-12 * scale {
        None
    } else {
        Some((mu, sd))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// All node ids in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.len()).map(NodeId)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Ok(id)
    }

    /// Appends a node whose gradient rule is supplied by `op`.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId], output: Tensor) -> Result<NodeId> {
        self.push(Op::Custom(op), inputs.to_vec(), output)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, op.name())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, vec![a, b], t)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let t = self.value(x).map(f);
        self.push(op, vec![x], t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, Op::AddScalar, |v| v + c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Softplus, softplus)
    }

    /// Natural log with inputs floored at [`LN_FLOOR`]; floored entries get a
    /// zero gradient.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Ln, |v| v.max(LN_FLOOR).ln())
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).mean();
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], t)
    }

    /// 3D cross-correlation with zero padding: `input [C,T,H,W]`,
    /// `kernel [C',C,kT,kH,kW]`.
    pub fn conv3d(&mut self, input: NodeId, kernel: NodeId, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let (x, k) = (self.value(input), self.value(kernel));
        if x.rank() != 4 || k.rank() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects [C,T,H,W] input and [C',C,kT,kH,kW] kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        }
        if k.shape()[1] != x.shape()[0] {
            return Err(Error::dim(format!(
                "conv3d kernel expects {} input channels, input has {}",
                k.shape()[1],
                x.shape()[0]
            )));
        }
        let geom = ConvGeom::new(
            x.shape()[0],
            k.shape()[0],
            [x.shape()[1], x.shape()[2], x.shape()[3]],
            [k.shape()[2], k.shape()[3], k.shape()[4]],
            stride,
            pad,
        )
        .ok_or_else(|| Error::dim(format!("conv3d kernel {:?} does not fit input {:?} (pad {pad:?}, stride {stride:?})", k.shape(), x.shape())))?;
        let out = geom.forward(x.data(), k.data());
        let mut shape = vec![geom.c_out];
        shape.extend_from_slice(&geom.out_dims);
        let t = Tensor::new(shape, out)?;
        self.push(Op::Conv3d(geom), vec![input, kernel], t)
    }

    /// 2D cross-correlation: `input [C,H,W]`, `kernel [C',C,kH,kW]`.
    pub fn conv2d_spatial(&mut self, input: NodeId, kernel: NodeId, stride: [usize; 2], pad: [usize; 2]) -> Result<NodeId> {
        let (x, k) = (self.value(input), self.value(kernel));
        if x.rank() != 3 || k.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d_spatial expects [C,H,W] input and [C',C,kH,kW] kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        }
        if k.shape()[1] != x.shape()[0] {
            return Err(Error::dim(format!(
                "conv2d_spatial kernel expects {} input channels, input has {}",
                k.shape()[1],
                x.shape()[0]
            )));
        }
        let geom = ConvGeom::new(
            x.shape()[0],
            k.shape()[0],
            [1, x.shape()[1], x.shape()[2]],
            [1, k.shape()[2], k.shape()[3]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
        )
        .ok_or_else(|| Error::dim(format!("conv2d_spatial kernel {:?} does not fit input {:?}", k.shape(), x.shape())))?;
        let out = geom.forward(x.data(), k.data());
        let t = Tensor::new(vec![geom.c_out, geom.out_dims[1], geom.out_dims[2]], out)?;
        self.push(Op::Conv2d(geom), vec![input, kernel], t)
    }

    /// Adds `bias [C]` to every position of `x [C, ...]`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (v, b) = (self.value(x), self.value(bias));
        if b.rank() != 1 || v.shape()[0] != b.len() {
            return Err(Error::dim(format!("bias {:?} does not match leading dim of {:?}", b.shape(), v.shape())));
        }
        let inner = v.len() / b.len();
        let data = v.data().iter().enumerate().map(|(i, &val)| val + b.data()[i / inner]).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::BiasAdd, vec![x, bias], t)
    }

    /// `[C,T,H,W] -> [C,H,W]`, mean over time.
    pub fn temporal_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::dim(format!("temporal_avg_pool expects [C,T,H,W], got {:?}", v.shape())));
        }
        let (c, t, hw) = (v.shape()[0], v.shape()[1], v.shape()[2] * v.shape()[3]);
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            for ti in 0..t {
                let src = &v.data()[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
                for (o, s) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let tensor = Tensor::new(vec![c, v.shape()[2], v.shape()[3]], out)?;
        self.push(Op::TemporalAvgPool, vec![x], tensor)
    }

    /// `[C,T,H,W] -> [C]`, mean over time and space jointly.
    pub fn global_temporal_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::dim(format!("global_temporal_avg_pool expects [C,T,H,W], got {:?}", v.shape())));
        }
        let c = v.shape()[0];
        let inner = v.len() / c;
        let out = v.data().chunks_exact(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        self.push(Op::GlobalAvgPool, vec![x], Tensor::from_vec(out))
    }

    /// Bilinear upsampling with aligned corners, `[C,h,w] -> [C,H,W]`.
    pub fn upsample_spatial(&mut self, x: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::dim(format!("upsample_spatial expects [C,h,w], got {:?}", v.shape())));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if target.0 < h || target.1 < w {
            return Err(Error::dim(format!("upsample target {target:?} smaller than input {h}x{w}")));
        }
        let out = bilinear(v.data(), c, (h, w), target);
        let t = Tensor::new(vec![c, target.0, target.1], out)?;
        self.push(Op::Upsample, vec![x], t)
    }

    /// Softmax over every entry of a 2D map.
    pub fn spatial_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::dim(format!("spatial_softmax expects [H,W], got {:?}", v.shape())));
        }
        let t = Tensor::new(v.shape().to_vec(), softmax_all(v.data()))?;
        self.push(Op::SpatialSoftmax, vec![a], t)
    }

    pub fn softmax_vector(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::dim(format!("softmax_vector expects a vector, got {:?}", v.shape())));
        }
        let t = Tensor::from_vec(softmax_all(v.data()));
        self.push(Op::SoftmaxVector, vec![x], t)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::dim(format!("log_softmax expects a vector, got {:?}", v.shape())));
        }
        let m = v.max();
        let lse = m + v.data().iter().map(|&a| (a - m).exp()).sum::<f64>().ln();
        let t = v.map(|a| a - lse);
        self.push(Op::LogSoftmax, vec![x], t)
    }

    /// Selects one element of a vector as a scalar.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::dim(format!("index {index} out of range for length {}", v.len())));
        }
        let t = Tensor::scalar(v.data()[index]);
        self.push(Op::Pick(index), vec![x], t)
    }

    /// `(1 + M) ⊙ X` with `M [h,w]` broadcast over the channel and time axes of
    /// `X [C,T,h,w]`.
    pub fn apply_attention(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(m));
        if xv.rank() != 4 || mv.rank() != 2 || xv.shape()[2..] != mv.shape()[..] {
            return Err(Error::dim(format!(
                "attention map {:?} does not match spatial dims of {:?}",
                mv.shape(),
                xv.shape()
            )));
        }
        let hw = mv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (1.0 + mv.data()[i % hw]) * v)
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Attention, vec![x, m], t)
    }

    /// Concatenates tensors along the leading (channel) axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rest = self.value(*first).shape()[1..].to_vec();
        let mut sizes = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.shape()[1..] != rest[..] {
                return Err(Error::dim(format!("concat_channels: {:?} vs trailing dims {rest:?}", v.shape())));
            }
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend_from_slice(&rest);
        let t = Tensor::new(shape, data)?;
        self.push(Op::ConcatChannels(sizes), xs.to_vec(), t)
    }

    /// `W x + b` with `x [n]`, `W [m,n]`, `b [m]`.
    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1 || wv.shape()[1] != xv.len() || wv.shape()[0] != bv.len() {
            return Err(Error::dim(format!(
                "fully_connected: x {:?}, W {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let n = xv.len();
        let out = wv
            .data()
            .chunks_exact(n)
            .zip(bv.data())
            .map(|(row, &bias)| row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect();
        self.push(Op::FullyConnected, vec![x, w, b], Tensor::from_vec(out))
    }

    /// Batch normalization of `x [N, C, ...]` with per-channel `gamma`, `beta`.
    ///
    /// With `training` set and `N > 1` the batch statistics normalize the input
    /// and updated running statistics are returned; otherwise the running
    /// statistics are used as-is and `None` is returned.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &RunningStats,
        training: bool,
    ) -> Result<(NodeId, Option<RunningStats>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() < 2 {
            return Err(Error::dim(format!("batch_norm expects [N,C,...], got {:?}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if gv.shape() != [c] || bv.shape() != [c] || running.mean.len() != c {
            return Err(Error::dim(format!("batch_norm parameters do not match {c} channels")));
        }
        let inner = xv.len() / (n * c);
        let batch_stats = training && n > 1;
        let (mean, var) = if batch_stats {
            let m = (n * inner) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    mean[ch] += xv.data()[off..off + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    var[ch] += xv.data()[off..off + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.data().iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *h = (v - mean[ch]) * inv_std[ch];
            *o = gv.data()[ch] * *h + bv.data()[ch];
        }
        let updated = batch_stats.then(|| {
            let m = (n * inner) as f64;
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            RunningStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - BATCH_NORM_MOMENTUM) * r + BATCH_NORM_MOMENTUM * b)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - BATCH_NORM_MOMENTUM) * r + BATCH_NORM_MOMENTUM * b * unbiased)
                    .collect(),
            }
        });
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let id = self.push(
            Op::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
            vec![x, gamma, beta],
            t,
        )?;
        Ok((id, updated))
    }

    /// `(x - mean) / std` over all entries, population statistics.
    pub fn standardize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (mu, sd) = mean_std(v.data())
            .ok_or_else(|| Error::ZeroVariance(format!("cannot standardize a constant map of shape {:?}", v.shape())))?;
        let inv = 1.0 / sd;
        let t = v.map(|a| (a - mu) * inv);
        self.push(Op::Standardize { inv_std: inv }, vec![x], t)
    }

    /// `Σ w ⊙ x` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = self.value(x);
        v.check_same_shape(&weights, "weighted_sum")?;
        let s = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Op::WeightedSum(weights), vec![x], Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across fan-out;
    /// previously stored gradients are cleared first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad || self.nodes[idx].inputs.is_empty() {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let input_grads = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            let inputs = self.nodes[idx].inputs.clone();
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                let node = &mut self.nodes[inp.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Gradients of node `idx` with respect to each of its inputs, `None` where
    /// the input does not require one.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[idx];
        let want = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        let like = |k: usize, data: Vec<f64>| Some(Tensor::new(inp(k).shape().to_vec(), data).expect("gradient shape"));
        let gd = g.data();
        let zip_map = |a: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(gd).map(|(&x, &gi)| f(x, gi)).collect() };

        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
            Op::Mul => vec![
                if want(0) { like(0, zip_map(inp(1).data(), &|b, gi| b * gi)) } else { None },
                if want(1) { like(1, zip_map(inp(0).data(), &|a, gi| a * gi)) } else { None },
            ],
            Op::Scale(c) => vec![Some(g.map(|v| c * v))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Relu => vec![like(0, zip_map(inp(0).data(), &|x, gi| if x > 0.0 { gi } else { 0.0 }))],
            Op::Sigmoid => vec![like(0, zip_map(out.data(), &|y, gi| gi * y * (1.0 - y)))],
            Op::Softplus => vec![like(0, zip_map(inp(0).data(), &|x, gi| gi * sigmoid(x)))],
            Op::Ln => vec![like(0, zip_map(inp(0).data(), &|x, gi| if x > LN_FLOOR { gi / x } else { 0.0 }))],
            Op::Sum => vec![Some(Tensor::full(inp(0).shape(), gd[0]))],
            Op::Mean => vec![Some(Tensor::full(inp(0).shape(), gd[0] / inp(0).len() as f64))],
            Op::Reshape => vec![like(0, gd.to_vec())],
            Op::Conv3d(geom) | Op::Conv2d(geom) => vec![
                if want(0) { like(0, geom.backward_input(gd, inp(1).data())) } else { None },
                if want(1) { like(1, geom.backward_kernel(gd, inp(0).data())) } else { None },
            ],
            Op::BiasAdd => {
                let c = inp(1).len();
                let inner = gd.len() / c;
                vec![
                    want(0).then(|| g.clone()),
                    if want(1) { like(1, gd.chunks_exact(inner).map(|ch| ch.iter().sum()).collect()) } else { None },
                ]
            }
            Op::TemporalAvgPool => {
                let s = inp(0).shape();
                let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
                let inv = 1.0 / t as f64;
                let mut gi = vec![0.0; inp(0).len()];
                for ci in 0..c {
                    for ti in 0..t {
                        let dst = &mut gi[(ci * t + ti) * hw..(ci * t + ti + 1) * hw];
                        for (d, &src) in dst.iter_mut().zip(&gd[ci * hw..(ci + 1) * hw]) {
                            *d = src * inv;
                        }
                    }
                }
                vec![like(0, gi)]
            }
            Op::GlobalAvgPool => {
                let c = inp(0).shape()[0];
                let inner = inp(0).len() / c;
                let gi = (0..inp(0).len()).map(|i| gd[i / inner] / inner as f64).collect();
                vec![like(0, gi)]
            }
            Op::Upsample => {
                let s = inp(0).shape();
                let os = out.shape();
                vec![like(0, bilinear_adjoint(gd, s[0], (s[1], s[2]), (os[1], os[2])))]
            }
            Op::SpatialSoftmax | Op::SoftmaxVector => {
                let dot: f64 = out.data().iter().zip(gd).map(|(y, gi)| y * gi).sum();
                vec![like(0, zip_map(out.data(), &|y, gi| y * (gi - dot)))]
            }
            Op::LogSoftmax => {
                let total: f64 = gd.iter().sum();
                vec![like(0, zip_map(out.data(), &|y, gi| gi - y.exp() * total))]
            }
            Op::Pick(index) => {
                let mut gi = vec![0.0; inp(0).len()];
                gi[*index] = gd[0];
                vec![like(0, gi)]
            }
            Op::Attention => {
                let (x, m) = (inp(0), inp(1));
                let hw = m.len();
                let gx = if want(0) {
                    like(0, gd.iter().enumerate().map(|(i, &gi)| gi * (1.0 + m.data()[i % hw])).collect())
                } else {
                    None
                };
                let gm = if want(1) {
                    let mut acc = vec![0.0; hw];
                    for (i, (&gi, &xv)) in gd.iter().zip(x.data()).enumerate() {
                        acc[i % hw] += gi * xv;
                    }
                    like(1, acc)
                } else {
                    None
                };
                vec![gx, gm]
            }
            Op::ConcatChannels(sizes) => {
                let inner = out.len() / out.shape()[0];
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| {
                        let part = gd[off * inner..(off + c) * inner].to_vec();
                        off += c;
                        if want(k) { like(k, part) } else { None }
                    })
                    .collect()
            }
            Op::FullyConnected => {
                let (x, w) = (inp(0), inp(1));
                let n = x.len();
                let gx = if want(0) {
                    let mut acc = vec![0.0; n];
                    for (row, &gi) in w.data().chunks_exact(n).zip(gd) {
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += wv * gi;
                        }
                    }
                    like(0, acc)
                } else {
                    None
                };
                let gw = if want(1) {
                    like(1, gd.iter().flat_map(|&gi| x.data().iter().map(move |&xv| gi * xv)).collect())
                } else {
                    None
                };
                vec![gx, gw, want(2).then(|| g.clone())]
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = inp(0).shape();
                let (n, c) = (s[0], s[1]);
                let inner = inp(0).len() / (n * c);
                let gamma = inp(1).data();
                let mut g_gamma = vec![0.0; c];
                let mut g_beta = vec![0.0; c];
                for (i, (&gi, &h)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    g_gamma[ch] += gi * h;
                    g_beta[ch] += gi;
                }
                let gx = if want(0) {
                    let m = (n * inner) as f64;
                    let data = gd
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gi, &h))| {
                            let ch = (i / inner) % c;
                            if *batch_stats {
                                gamma[ch] * inv_std[ch] * (gi - g_beta[ch] / m - h * g_gamma[ch] / m)
                            } else {
                                gamma[ch] * inv_std[ch] * gi
                            }
                        })
                        .collect();
                    like(0, data)
                } else {
                    None
                };
                vec![
                    gx,
                    if want(1) { like(1, g_gamma) } else { None },
                    if want(2) { like(2, g_beta) } else { None },
                ]
            }
            Op::Standardize { inv_std } => {
                let n = out.len() as f64;
                let g_mean = gd.iter().sum::<f64>() / n;
                let gz_mean = gd.iter().zip(out.data()).map(|(a, z)| a * z).sum::<f64>() / n;
                vec![like(0, zip_map(out.data(), &|z, gi| inv_std * (gi - g_mean - z * gz_mean)))]
            }
            Op::WeightedSum(w) => vec![like(0, w.data().iter().map(|&wv| wv * gd[0]).collect())],
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = (0..node.inputs.len()).map(inp).collect();
                op.backward(&inputs, out, g)
                    .into_iter()
                    .enumerate()
                    .map(|(k, t)| want(k).then_some(t))
                    .collect()
            }
        }
    }
}
