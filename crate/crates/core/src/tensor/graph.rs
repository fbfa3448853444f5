use rand::Rng as _;

use super::conv::{self, ConvDims, Conv3dGeom};
use super::{conv_out_extent, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    ScaleChannels(Var, Var),
    MatMul(Var, Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Upsample(Var, usize),
    Concat(Vec<Var>, usize),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    GlobalAvgPool(Var),
    GatherRows(Var, Vec<usize>),
    NeighborMax(Var, Vec<usize>),
    /// Per-column `1 / sqrt(var + eps)`.
    NormalizeColumns(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | ScaleChannels(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Conv3d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Concat(vs, _) => vs.clone(),
            Scale(a, _) | AddScalar(a) | Upsample(a, _) | Sigmoid(a) | LeakyRelu(a, _) | Log(a)
            | Softmax(a, _) | LogSoftmax(a, _) | GlobalAvgPool(a) | GatherRows(a, _)
            | NeighborMax(a, _) | NormalizeColumns(a, _) | Dropout(a, _) | Sum(a) | Mean(a) | SumAxis(a, _)
            | Reshape(a) => vec![*a],
        }
    }
}

struct Node {
    value: Option<Tensor>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Tape of tensor operations.
///
/// A graph built with [`Graph::new`] records backward rules for every op that
/// touches a `requires_grad` input. [`Graph::inference`] builds a graph that
/// records nothing and lets callers [`free`](Graph::free) intermediate values.
/// A graph is meant to be used from one thread for one step.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    backward_done: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            backward_done: false,
            grads: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad: requires_grad && self.record,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient. Panics on non-finite data.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true).expect("parameter values must be finite")
    }

    /// Leaf without a gradient. Panics on non-finite data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false).expect("constant values must be finite")
    }

    pub fn try_constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v).expect("value was freed")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("node {} was freed", v.0)))
    }

    /// Drops the stored value of `v`. Only allowed on non-recording graphs.
    pub fn free(&mut self, v: Var) -> Result<()> {
        if self.record {
            return Err(Error::InvalidArgument(
                "cannot free values of a recording graph".into(),
            ));
        }
        self.nodes[v.0].value = None;
        Ok(())
    }

    /// Drops every node created after the first `len`. Only allowed on
    /// non-recording graphs; handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if self.record {
            return Err(Error::InvalidArgument(
                "cannot truncate a recording graph".into(),
            ));
        }
        self.nodes.truncate(len);
        Ok(())
    }

    /// Gradient of a leaf after [`backward`](Graph::backward).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    fn map(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.val(a)?;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, "scale", Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, "add_scalar", Op::AddScalar(a), |x| x + c)
    }

    /// `a[.., j] + b[j]`: broadcast a bias vector over the last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let bias = tb.data();
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, b), "add_row")
    }

    /// `a[c, ..] * w[c]`: per-channel rescaling of a channel-first tensor.
    pub fn scale_channels(&mut self, a: Var, w: Var) -> Result<Var> {
        let c = self.shape(a)[0];
        if self.shape(w) != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("{:?} * {:?}", self.shape(a), self.shape(w)),
            ));
        }
        let (ta, tw) = (self.val(a)?, self.val(w)?);
        let per = ta.numel() / c;
        let data = ta
            .data()
            .chunks(per)
            .zip(tw.data())
            .flat_map(|(chunk, &s)| chunk.iter().map(move |x| x * s))
            .collect();
        let t = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(t, Op::ScaleChannels(a, w), "scale_channels")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// 3D convolution of a `[Cin, D, H, W]` input with a `[Cout, Cin, k, k, k]` kernel.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: Conv3dGeom) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 5 || sw[1] != si[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(Error::shape("conv3d", format!("input {si:?}, weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv3d", format!("bias {:?}", self.shape(b))));
            }
        }
        let k = sw[2];
        let out = [
            conv_out_extent(si[1], k, geom)?,
            conv_out_extent(si[2], k, geom)?,
            conv_out_extent(si[3], k, geom)?,
        ];
        let dims = ConvDims {
            cin: si[0],
            cout: sw[0],
            k,
            inp: [si[1], si[2], si[3]],
            out,
            geom,
        };
        let bias_data = match bias {
            Some(b) => Some(self.val(b)?.data()),
            None => None,
        };
        let data = conv::forward(self.val(input)?.data(), self.val(weight)?.data(), bias_data, &dims);
        let t = Tensor::from_vec(vec![dims.cout, out[0], out[1], out[2]], data)?;
        self.push(
            t,
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            },
            "conv3d",
        )
    }

    /// Nearest-neighbour upsampling of `[C, D, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample", format!("{s:?} by {factor}")));
        }
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let src = self.val(a)?.data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let row = ((ci * d + z / factor) * h + y / factor) * w;
                    out.extend((0..ow).map(|x| src[row + x / factor]));
                }
            }
        }
        let t = Tensor::from_vec(vec![c, od, oh, ow], out)?;
        self.push(t, Op::Upsample(a, factor), "upsample")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.val(p)?.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::from_vec(shape, out)?;
        self.push(t, Op::Concat(parts.to_vec(), axis), "concat")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, "leaky_relu", Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, "log", Op::Log(a), f64::ln)
    }

    fn softmax_like(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.val(a)?.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|j| (src[at(j)] - m).exp()).sum();
                for j in 0..len {
                    out[at(j)] = if log {
                        src[at(j)] - m - z.ln()
                    } else {
                        (src[at(j)] - m).exp() / z
                    };
                }
            }
        }
        let t = Tensor::from_vec(shape, out)?;
        if log {
            self.push(t, Op::LogSoftmax(a, axis), "log_softmax")
        } else {
            self.push(t, Op::Softmax(a, axis), "softmax")
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, true)
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let c = self.shape(a)[0];
        let t = self.val(a)?;
        let per = t.numel() / c;
        let data = t.data().chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect();
        let t = Tensor::from_vec(vec![c], data)?;
        self.push(t, Op::GlobalAvgPool(a), "global_avg_pool")
    }

    /// Rows of a `[N, C]` tensor picked by index: `[index.len(), C]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || index.is_empty() {
            return Err(Error::shape("gather_rows", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let src = self.val(a)?.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(vec![index.len(), c], out)?;
        self.push(t, Op::GatherRows(a, index.to_vec()), "gather_rows")
    }

    /// Max over the neighbour axis of `[N, K, C]`, giving `[N, C]`.
    pub fn neighbor_max(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("neighbor_max", format!("{s:?}")));
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        let src = self.val(a)?.data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for p in 0..n {
            for j in 0..k {
                for ch in 0..c {
                    let idx = (p * k + j) * c + ch;
                    if src[idx] > out[p * c + ch] {
                        out[p * c + ch] = src[idx];
                        arg[p * c + ch] = idx;
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c], out)?;
        self.push(t, Op::NeighborMax(a, arg), "neighbor_max")
    }

    /// Standardizes every column of `[N, C]` to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn normalize_columns(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 || !(eps > 0.0) {
            return Err(Error::shape("normalize_columns", format!("{s:?} with eps {eps}")));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.val(a)?.data();
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + eps).sqrt()).collect();
        let out = src
            .chunks(c)
            .flat_map(|row| (0..c).map(|j| (row[j] - mean[j]) * inv[j]).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(vec![n, c], out)?;
        self.push(t, Op::NormalizeColumns(a, inv), "normalize_columns")
    }

    /// Inverted dropout: in training mode each element survives with probability
    /// `keep` and is scaled by `1 / keep`; otherwise the input passes through.
    pub fn dropout(&mut self, a: Var, keep: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::InvalidArgument(format!("dropout keep probability {keep}")));
        }
        if !train || keep == 1.0 {
            return Ok(a);
        }
        let n = self.val(a)?.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.val(a)?;
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.push(t, Op::Dropout(a, mask), "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Sum along one axis; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.val(a)?.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let t = Tensor::from_vec(oshape, out)?;
        self.push(t, Op::SumAxis(a, axis), "sum_axis")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a)?.clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Reverse sweep from a one-element `loss`. Leaf gradients are then
    /// available through [`grad`](Graph::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::Backward("graph was built in inference mode".into()));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| self.val(v);
        let y = self.val(Var(i))?.data();
        // Hands out the gradient buffer of `v` when it needs one.
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len: usize = nodes[v.0].shape.iter().product();
                    let $g: &mut [f64] = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body;
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |g| add_into(g, gy));
                acc!(*b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc!(*a, |g| add_into(g, gy));
                acc!(*b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a)?.data(), val(*b)?.data());
                acc!(*a, |g| for j in 0..g.len() {
                    g[j] += gy[j] * xb[j]
                });
                acc!(*b, |g| for j in 0..g.len() {
                    g[j] += gy[j] * xa[j]
                });
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a)?.data(), val(*b)?.data());
                acc!(*a, |g| for j in 0..g.len() {
                    g[j] += gy[j] / xb[j]
                });
                acc!(*b, |g| for j in 0..g.len() {
                    g[j] -= gy[j] * xa[j] / (xb[j] * xb[j])
                });
            }
            Op::Scale(a, c) => acc!(*a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => acc!(*a, |g| add_into(g, gy)),
            Op::AddRow(a, b) => {
                acc!(*a, |g| add_into(g, gy));
                acc!(*b, |g| {
                    let c = g.len();
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::ScaleChannels(a, w) => {
                let (xa, xw) = (val(*a)?.data(), val(*w)?.data());
                let per = xa.len() / xw.len();
                acc!(*a, |g| for j in 0..g.len() {
                    g[j] += gy[j] * xw[j / per]
                });
                acc!(*w, |g| for (c, gc) in g.iter_mut().enumerate() {
                    let r = c * per..(c + 1) * per;
                    *gc += gy[r.clone()].iter().zip(&xa[r]).map(|(d, x)| d * x).sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a)?.data(), val(*b)?.data());
                // dA = dY * B^T
                acc!(*a, |g| for r in 0..m {
                    let gyr = &gy[r * n..(r + 1) * n];
                    for c in 0..k {
                        let brow = &xb[c * n..(c + 1) * n];
                        g[r * k + c] += gyr.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
                // dB = A^T * dY
                acc!(*b, |g| for r in 0..m {
                    let gyr = &gy[r * n..(r + 1) * n];
                    for c in 0..k {
                        let av = xa[r * k + c];
                        if av != 0.0 {
                            let grow = &mut g[c * n..(c + 1) * n];
                            grow.iter_mut().zip(gyr).for_each(|(g, d)| *g += av * d);
                        }
                    }
                });
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            } => {
                let (x, w) = (val(*input)?.data(), val(*weight)?.data());
                let mut gx = nodes[input.0].requires_grad.then(|| {
                    grads[input.0].take().unwrap_or_else(|| vec![0.0; x.len()])
                });
                let mut gw = nodes[weight.0].requires_grad.then(|| {
                    grads[weight.0].take().unwrap_or_else(|| vec![0.0; w.len()])
                });
                let mut gb = (*bias).filter(|b| nodes[b.0].requires_grad).map(|b| {
                    grads[b.0].take().unwrap_or_else(|| vec![0.0; dims.cout])
                });
                conv::backward(x, w, gy, dims, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(g) = gx {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[weight.0] = Some(g);
                }
                if let (Some(g), Some(b)) = (gb, *bias) {
                    grads[b.0] = Some(g);
                }
            }
            Op::Upsample(a, f) => {
                let s = &nodes[a.0].shape;
                let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                let (od, oh, ow) = (d * f, h * f, w * f);
                acc!(*a, |g| {
                    let mut o = 0;
                    for ci in 0..c {
                        for z in 0..od {
                            for yy in 0..oh {
                                let row = ((ci * d + z / f) * h + yy / f) * w;
                                for xx in 0..ow {
                                    g[row + xx / f] += gy[o];
                                    o += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(&nodes[i].shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis] * inner;
                    acc!(p, |g| for o in 0..outer {
                        let src = &gy[o * total * inner + offset..o * total * inner + offset + len];
                        add_into(&mut g[o * len..(o + 1) * len], src);
                    });
                    offset += len;
                }
            }
            Op::Sigmoid(a) => acc!(*a, |g| for j in 0..g.len() {
                g[j] += gy[j] * y[j] * (1.0 - y[j])
            }),
            Op::LeakyRelu(a, slope) => {
                let x = val(*a)?.data();
                acc!(*a, |g| for j in 0..g.len() {
                    g[j] += if x[j] > 0.0 { gy[j] } else { slope * gy[j] }
                });
            }
            Op::Log(a) => {
                let x = val(*a)?.data();
                acc!(*a, |g| for j in 0..g.len() {
                    g[j] += gy[j] / x[j]
                });
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(nodes[i].op, Op::LogSoftmax(..));
                let (outer, len, inner) = axis_split(&nodes[i].shape, *axis);
                acc!(*a, |g| for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        if log {
                            let s: f64 = (0..len).map(|j| gy[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += gy[at(j)] - y[at(j)].exp() * s;
                            }
                        } else {
                            let s: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let c = nodes[i].shape[0];
                acc!(*a, |g| {
                    let per = g.len() / c;
                    for (ch, chunk) in g.chunks_mut(per).enumerate() {
                        let d = gy[ch] / per as f64;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let c = nodes[a.0].shape[1];
                acc!(*a, |g| for (r, &src) in index.iter().enumerate() {
                    add_into(&mut g[src * c..(src + 1) * c], &gy[r * c..(r + 1) * c]);
                });
            }
            Op::NeighborMax(a, arg) => acc!(*a, |g| for (j, &src) in arg.iter().enumerate() {
                g[src] += gy[j]
            }),
            Op::NormalizeColumns(a, inv) => {
                let c = inv.len();
                let n = gy.len() / c;
                let (mut mg, mut mgy) = (vec![0.0; c], vec![0.0; c]);
                for (row_g, row_y) in gy.chunks(c).zip(y.chunks(c)) {
                    for j in 0..c {
                        mg[j] += row_g[j] / n as f64;
                        mgy[j] += row_g[j] * row_y[j] / n as f64;
                    }
                }
                acc!(*a, |g| for (r, (row_g, row_y)) in gy.chunks(c).zip(y.chunks(c)).enumerate() {
                    for j in 0..c {
                        g[r * c + j] += inv[j] * (row_g[j] - mg[j] - row_y[j] * mgy[j]);
                    }
                });
            }
            Op::Dropout(a, mask) => acc!(*a, |g| for j in 0..g.len() {
                g[j] += gy[j] * mask[j]
            }),
            Op::Sum(a) => acc!(*a, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(a) => acc!(*a, |g| {
                let d = gy[0] / g.len() as f64;
                g.iter_mut().for_each(|v| *v += d);
            }),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&nodes[a.0].shape, *axis);
                acc!(*a, |g| for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut g[(o * len + j) * inner..(o * len + j + 1) * inner];
                        add_into(dst, &gy[o * inner..(o + 1) * inner]);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}
