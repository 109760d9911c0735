//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever it needs to differentiate later (argmax indices, dropout masks,
//! normalization statistics, FFT spectra). Nodes only reference earlier
//! nodes, so the backward sweep is a single pass in reverse insertion order.
//!
//! ```
//! use xflood_core::graph::{Graph, Mode};
//! use xflood_core::tensor::Tensor;
//!
//! let mut g = Graph::new(Mode::Eval, 0);
//! let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.gradients(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::fft;
pub use crate::kernels::norm::NormAxis;
use crate::kernels::norm::{self, NormStats};
use crate::kernels::pool;
use crate::params::ParamStore;
use crate::tensor::{check_shape, matmul_kernel, transpose_kernel, Tensor, MAX_RANK};

/// Lower/upper clip applied to probabilities before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch-norm uses batch statistics and records running
    /// statistic updates.
    Train,
    Eval,
}

/// User-defined differentiable operation.
///
/// The forward value is computed by the caller; `backward` maps the upstream
/// gradient to one gradient per input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Normalize {
        x: Var,
        axis: NormAxis,
        stats: NormStats,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Conv1d {
        x: Var,
        kernel: Var,
    },
    FftMagnitude {
        x: Var,
        spectrum: Vec<Complex64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn tag(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::Normalize { .. } => "normalize",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Stack(_) => "stack",
            Op::Select { .. } => "select",
            Op::Sum(_) => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1d { .. } => "conv1d",
            Op::FftMagnitude { .. } => "fft2d_magnitude",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Dropout { .. } => "dropout",
            Op::Bce { .. } => "bce",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_cache: HashMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

/// Numpy-style broadcast of two shapes (right-aligned).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the broadcast source
/// element in a tensor of shape `in_shape`.
fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if i >= pad {
            let ext = in_shape[i - pad];
            strides[i] = if ext == 1 { 0 } else { s };
            s *= ext;
        }
    }
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like the broadcast output) back into `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let offs = broadcast_offsets(shape, grad.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (g, &o) in grad.data().iter().zip(&offs) {
        out[o] += g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Logistic function kept inside the open unit interval: far tails saturate
/// at the representable neighbours of 0 and 1 instead of rounding onto them.
fn sigmoid(x: f64) -> f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::from_bits(1), BELOW_ONE)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(
            op,
            format!("expected an H×W×C map, got {:?}", t.shape()),
        )),
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_cache: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Operation tag of a node, e.g. `"conv2d"`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients are computed for it but never stored.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Leaf bound to a named trainable parameter. Repeated lookups of the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(Op::Param(name.to_string()), value);
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    /// Running-statistic updates recorded by train-mode batch norms, as
    /// `(buffer name, new value)` pairs.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, value: Tensor) {
        self.buffer_updates.push((name, value));
    }

    // ----- elementwise -------------------------------------------------

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(
                    op,
                    format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
                )
            })?;
            if out_shape.len() > MAX_RANK {
                return Err(Error::shape(op, "broadcast rank exceeds 4"));
            }
            let oa = broadcast_offsets(ta.shape(), &out_shape);
            let ob = broadcast_offsets(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.push(make(a, b), value))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(Op::Scale(x, factor), v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(Op::AddConst(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(Op::Softmax(x), v)
    }

    /// Zero-mean, unit-variance normalization (ε = 1e-5) without affine terms.
    pub fn normalize(&mut self, x: Var, axis: NormAxis) -> Var {
        let t = self.value(x);
        let stats = norm::normalize_forward(t.data(), t.last_dim(), axis);
        let v = Tensor::from_parts(t.shape().to_vec(), stats.xhat.clone());
        self.push(Op::Normalize { x, axis, stats }, v)
    }

    /// Layer normalization along the last axis.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        self.normalize(x, NormAxis::Last)
    }

    /// Per-channel statistics of the last normalization node `v`, if it is one.
    pub(crate) fn norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Normalize { stats, .. } => Some((&stats.mean, &stats.var)),
            _ => None,
        }
    }

    // ----- linear algebra and shape ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose(x), v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// `x·W + b` for `x: n×d_in`, `W: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(Op::Slice { x, axis, start }, value))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() + 1 > MAX_RANK {
            return Err(Error::shape("stack", format!("cannot stack rank-{} tensors", base.len())));
        }
        let mut data = Vec::with_capacity(inputs.len() * base.iter().product::<usize>());
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} differs from {base:?}", self.shape(v)),
                ));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&base);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(Op::Stack(inputs.to_vec()), value))
    }

    /// Entry `index` along the leading axis (the axis is dropped).
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::shape("select", format!("index {index} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let value = Tensor::from_parts(
            shape[1..].to_vec(),
            t.data()[index * inner..(index + 1) * inner].to_vec(),
        );
        Ok(self.push(Op::Select { x, index }, value))
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean along `axis`; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s / n as f64;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(Op::MeanAxis { x, axis }, value))
    }

    // ----- neural primitives -------------------------------------------

    /// Same-padded stride-1 grouped convolution of an `H×W×C_in` map with a
    /// `K×K×(C_in/G)×C_out` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, groups: usize) -> Result<Var> {
        let (h, w, cin) = hwc("conv2d", self.value(x))?;
        let ks = self.shape(kernel).to_vec();
        let [k, k2, cig, cout] = ks[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{groups} must divide C_in={cin} and C_out={cout}"),
            ));
        }
        if k != k2 || k % 2 == 0 || cig != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} incompatible with input channels {cin}, groups {groups} (odd square kernels only)"),
            ));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            groups,
        };
        let data = conv::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let value = Tensor::from_parts(vec![h, w, cout], data);
        Ok(self.push(Op::Conv2d { x, kernel, geom }, value))
    }

    /// Same-padded 1-D correlation of a vector with an odd-length kernel.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 1 || tk.rank() != 1 || tk.numel() % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("vector {:?} with odd kernel {:?}", tx.shape(), tk.shape()),
            ));
        }
        let data = conv::conv1d_forward(tx.data(), tk.data());
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(Op::Conv1d { x, kernel }, value))
    }

    /// Per-channel magnitude of the 2-D discrete Fourier transform.
    pub fn fft2d_magnitude(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = hwc("fft2d_magnitude", self.value(x))?;
        let (spectrum, mag) = fft::fft2_magnitude_forward(self.value(x).data(), h, w, c);
        let value = Tensor::from_parts(vec![h, w, c], mag);
        Ok(self.push(Op::FftMagnitude { x, spectrum }, value))
    }

    /// 2×2 max pooling (odd extents padded by edge replication).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = hwc("max_pool2", self.value(x))?;
        let (data, argmax) = pool::max_pool2_forward(self.value(x).data(), h, w, c);
        let value = Tensor::from_parts(vec![h.div_ceil(2), w.div_ceil(2), c], data);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    /// Non-overlapping `factor×factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = hwc("avg_pool", self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("factor {factor} must divide {h}×{w}"),
            ));
        }
        let data = pool::avg_pool_forward(self.value(x).data(), h, w, c, factor);
        let value = Tensor::from_parts(vec![h / factor, w / factor, c], data);
        Ok(self.push(Op::AvgPool { x, factor }, value))
    }

    /// Global average pooling `H×W×C → 1×1×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = hwc("global_avg_pool", self.value(x))?;
        let flat = self.reshape(x, &[h * w, c])?;
        let m = self.mean_axis(flat, 0)?;
        self.reshape(m, &[1, 1, c])
    }

    /// Nearest-neighbour upsampling by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = hwc("upsample_nearest", self.value(x))?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be positive"));
        }
        let data = pool::upsample_forward(self.value(x).data(), h, w, c, factor);
        let value = Tensor::from_parts(vec![h * factor, w * factor, c], data);
        Ok(self.push(Op::Upsample { x, factor }, value))
    }

    /// Inverted dropout; the identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// Mean binary cross-entropy of probabilities `p` (clipped to
    /// `[1e-7, 1 − 1e-7]`) against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities vs {} labels", t.numel(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input(format!("label {bad} is not 0 or 1")));
        }
        let n = labels.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Records a user-defined op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Result<Var> {
        check_shape(value.shape())?;
        Ok(self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            value,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Gradients of a shape-`[1]` node with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            if let Op::Select { x, index } = self.nodes[i].op {
                // Scatter into the accumulator directly; one full-size
                // gradient per selected slice would be quadratic in the batch.
                let inner = dout.numel();
                let acc = grads[x.0].get_or_insert_with(|| self.nodes[x.0].value.zeros_like());
                acc.data_mut()[index * inner..(index + 1) * inner]
                    .iter_mut()
                    .zip(dout.data())
                    .for_each(|(a, b)| *a += b);
                grads[i] = Some(dout);
                continue;
            }
            for (v, g) in self.node_backward(i, &dout) {
                debug_assert!(v.0 < i, "graph inputs must precede their consumers");
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates d`loss`/dθ into the gradient slot of every parameter leaf.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dout: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        let zip = |a: &[f64], b: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(dout, val(*a).shape())),
                (*b, reduce_to(dout, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(dout, val(*a).shape())),
                (*b, reduce_to(&dout.map(|g| -g), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let shape = out.shape();
                let (ga, gb) = if ta.shape() == tb.shape() {
                    (
                        like(ta, zip(dout.data(), tb.data(), &|g, y| g * y)),
                        like(tb, zip(dout.data(), ta.data(), &|g, x| g * x)),
                    )
                } else {
                    let oa = broadcast_offsets(ta.shape(), shape);
                    let ob = broadcast_offsets(tb.shape(), shape);
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    for (k, &g) in dout.data().iter().enumerate() {
                        ga[oa[k]] += g * tb.data()[ob[k]];
                        gb[ob[k]] += g * ta.data()[oa[k]];
                    }
                    (like(ta, ga), like(tb, gb))
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, dout.map(|g| g * f))],
            Op::AddConst(x) => vec![(*x, dout.clone())],
            Op::Sigmoid(x) => vec![(*x, like(out, zip(dout.data(), out.data(), &|g, s| g * s * (1.0 - s))))],
            Op::Relu(x) => vec![(
                *x,
                like(out, zip(dout.data(), val(*x).data(), &|g, v| if v > 0.0 { g } else { 0.0 })),
            )],
            Op::Tanh(x) => vec![(*x, like(out, zip(dout.data(), out.data(), &|g, t| g * (1.0 - t * t))))],
            Op::Softmax(x) => {
                let n = out.last_dim();
                let mut dx = vec![0.0; out.numel()];
                for ((drow, yrow), grow) in dx
                    .chunks_mut(n)
                    .zip(out.data().chunks(n))
                    .zip(dout.data().chunks(n))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*x, like(out, dx))]
            }
            Op::Normalize { x, axis, stats } => {
                let dx = norm::normalize_backward(stats, dout.data(), out.last_dim(), *axis);
                vec![(*x, like(out, dx))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose_kernel(tb.data(), k, n);
                let at = transpose_kernel(ta.data(), m, k);
                let da = matmul_kernel(dout.data(), &bt, m, n, k);
                let db = matmul_kernel(&at, dout.data(), k, m, n);
                vec![(*a, like(ta, da)), (*b, like(tb, db))]
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                vec![(*x, like(val(*x), transpose_kernel(dout.data(), r, c)))]
            }
            Op::Reshape(x) => vec![(*x, like(val(*x), dout.data().to_vec()))],
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&dout.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, p)| (*v, like(val(*v), p)))
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let src = val(*x);
                let shape = src.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; src.numel()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&dout.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, like(src, dx))]
            }
            Op::Stack(inputs) => {
                let inner = val(inputs[0]).numel();
                inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (*v, like(val(*v), dout.data()[k * inner..(k + 1) * inner].to_vec())))
                    .collect()
            }
            Op::Select { x, index } => {
                let src = val(*x);
                let inner = out.numel();
                let mut dx = vec![0.0; src.numel()];
                dx[index * inner..(index + 1) * inner].copy_from_slice(dout.data());
                vec![(*x, like(src, dx))]
            }
            Op::Sum(x) => {
                let g = dout.data()[0];
                vec![(*x, val(*x).map(|_| g))]
            }
            Op::MeanAxis { x, axis } => {
                let src = val(*x);
                let shape = src.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let n = shape[*axis];
                let mut dx = vec![0.0; src.numel()];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            dx[(o * n + k) * inner + j] = dout.data()[o * inner + j] / n as f64;
                        }
                    }
                }
                vec![(*x, like(src, dx))]
            }
            Op::Conv2d { x, kernel, geom } => {
                let (dx, dk) = conv::conv2d_backward(val(*x).data(), val(*kernel).data(), dout.data(), geom);
                vec![(*x, like(val(*x), dx)), (*kernel, like(val(*kernel), dk))]
            }
            Op::Conv1d { x, kernel } => {
                let (dx, dk) = conv::conv1d_backward(val(*x).data(), val(*kernel).data(), dout.data());
                vec![(*x, like(val(*x), dx)), (*kernel, like(val(*kernel), dk))]
            }
            Op::FftMagnitude { x, spectrum } => {
                let s = out.shape();
                let dx = fft::fft2_magnitude_backward(spectrum, dout.data(), s[0], s[1], s[2]);
                vec![(*x, like(out, dx))]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (g, &i) in dout.data().iter().zip(argmax) {
                    dx[i] += g;
                }
                vec![(*x, like(val(*x), dx))]
            }
            Op::AvgPool { x, factor } => {
                let s = val(*x).shape();
                let dx = pool::avg_pool_backward(dout.data(), s[0], s[1], s[2], *factor);
                vec![(*x, like(val(*x), dx))]
            }
            Op::Upsample { x, factor } => {
                let s = val(*x).shape();
                let dx = pool::upsample_backward(dout.data(), s[0], s[1], s[2], *factor);
                vec![(*x, like(val(*x), dx))]
            }
            Op::Dropout { x, mask } => vec![(*x, like(out, zip(dout.data(), mask, &|g, m| g * m)))],
            Op::Bce { p, labels } => {
                let g = dout.data()[0];
                let n = labels.len() as f64;
                let tp = val(*p);
                let dp = tp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < PROB_CLIP || p > 1.0 - PROB_CLIP {
                            0.0
                        } else {
                            -g * (y / p - (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![(*p, like(tp, dp))]
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs.iter().copied().zip(op.backward(&ins, out, dout)).collect()
            }
        }
    }
}
