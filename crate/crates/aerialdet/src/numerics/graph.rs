//! Recorded forward graph with explicit per-op analytic backward passes.
//!
//! Every differentiable operation pushes a node holding its output value and
//! enough context to run the matching backward kernel from `ops`. Reverse-mode
//! differentiation walks the nodes once in reverse order, accumulating
//! gradients into per-node buffers. There is no re-execution of forwards and
//! no numerical differentiation on this path.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tensor::{ConvSpec, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

/// A composite differentiable operation defined outside this module.
///
/// The forward value is computed by the caller; the graph only needs the
/// input list and the backward rule.
pub trait CustomOp: fmt::Debug {
    fn inputs(&self) -> Vec<Var>;
    /// Gradients w.r.t. `inputs()`, in the same order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>>;
    fn name(&self) -> &'static str;
}

enum OpRecord {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    ResizeBilinear { x: Var },
    UpsampleNearest { x: Var, factor: usize },
    ConcatChannels { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Reshape { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    SoftmaxChannels { x: Var },
    WeightedBatchSum { x: Var, weights: Var },
    Unary { x: Var, kind: UnaryKind },
    Binary { a: Var, b: Var, kind: BinaryKind },
    AffineScalar { x: Var, mul: f64 },
    Sum { x: Var },
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: OpRecord,
}

/// Gradients per node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zeros when no path reached it.
    pub fn wrt_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Eagerly evaluated tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: OpRecord) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// New leaf node (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, OpRecord::Leaf)
    }

    /// Grouped convolution; `bias` must be a (1, C_out, 1, 1) leaf or node.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let c_out = self.value(w).shape()[0];
        let bs = self.value(b).shape();
        if bs != [1, c_out, 1, 1] {
            return Err(Error::shape("bias channels", c_out, bs[1], "conv2d bias must be (1,C_out,1,1)"));
        }
        let bias: Vec<f64> = self.value(b).data().to_vec();
        let out = ops::conv2d(self.value(x), self.value(w), &bias, &spec)?;
        Ok(self.push(out, OpRecord::Conv2d { x, w, b, spec }))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(out, OpRecord::ResizeBilinear { x }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(out, OpRecord::UpsampleNearest { x, factor }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, OpRecord::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, OpRecord::SliceChannels { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, OpRecord::Reshape { x }))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_with_argmax(self.value(x), window, stride)?;
        Ok(self.push(out, OpRecord::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, OpRecord::GlobalAvgPool { x }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(x))?;
        Ok(self.push(out, OpRecord::SoftmaxChannels { x }))
    }

    pub fn weighted_batch_sum(&mut self, x: Var, weights: Var) -> Result<Var> {
        let out = ops::weighted_batch_sum(self.value(x), self.value(weights))?;
        Ok(self.push(out, OpRecord::WeightedBatchSum { x, weights }))
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let out = {
            let xt = self.value(x);
            let mut out = xt.clone();
            for v in out.data_mut() {
                *v = unary_forward(kind, *v);
            }
            out
        };
        self.push(out, OpRecord::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(
                "element count",
                sa.iter().product(),
                sb.iter().product(),
                format!("binary {kind:?} on {sa:?} vs {sb:?}"),
            ));
        }
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let mut out = ta.clone();
            for (o, (&va, &vb)) in out
                .data_mut()
                .iter_mut()
                .zip(ta.data().iter().zip(tb.data().iter()))
            {
                *o = binary_forward(kind, va, vb);
            }
            out
        };
        Ok(self.push(out, OpRecord::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = {
            let mut out = self.value(x).clone();
            for v in out.data_mut() {
                *v = mul * *v + add;
            }
            out
        };
        self.push(out, OpRecord::AffineScalar { x, mul })
    }

    /// Sum of all elements, as a (1,1,1,1) scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::filled([1, 1, 1, 1], total);
        self.push(out, OpRecord::Sum { x })
    }

    /// Record a composite op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, value: Tensor) -> Var {
        self.push(value, OpRecord::Custom(op))
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Reverse pass from `root`, seeding its gradient with `seed`.
    pub fn backward(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(
                "element count",
                self.value(root).len(),
                seed.len(),
                "backward seed vs root value",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.clone());

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from a scalar root with seed 1.
    pub fn backward_scalar(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != [1, 1, 1, 1] {
            return Err(Error::invalid(format!(
                "backward_scalar root must be (1,1,1,1), got {:?}",
                self.value(root).shape()
            )));
        }
        self.backward(root, &Tensor::filled([1, 1, 1, 1], 1.0))
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            OpRecord::Leaf => {}
            OpRecord::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = ops::conv2d_backward(self.value(*x), self.value(*w), spec, g);
                Self::accumulate(grads, *x, gx);
                Self::accumulate(grads, *w, gw);
                let c_out = gb.len();
                Self::accumulate(grads, *b, Tensor::from_vec([1, c_out, 1, 1], gb)?);
            }
            OpRecord::ResizeBilinear { x } => {
                let gx = ops::resize_bilinear_backward(self.value(*x).shape(), g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::UpsampleNearest { x, factor } => {
                let gx = ops::upsample_nearest_backward(self.value(*x).shape(), *factor, g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::ConcatChannels { parts } => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).channels();
                    let gp = ops::slice_channels(g, start, c)?;
                    Self::accumulate(grads, *p, gp);
                    start += c;
                }
            }
            OpRecord::SliceChannels { x, start } => {
                let gx = ops::slice_channels_backward(self.value(*x).shape(), *start, g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::Reshape { x } => {
                let gx = g.reshaped(self.value(*x).shape())?;
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::MaxPool { x, argmax } => {
                let gx = ops::max_pool2d_backward(self.value(*x).shape(), argmax, g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::GlobalAvgPool { x } => {
                let gx = ops::global_avg_pool_backward(self.value(*x).shape(), g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::SoftmaxChannels { x } => {
                let gx = ops::softmax_channels_backward(&self.nodes[id].value, g);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::WeightedBatchSum { x, weights } => {
                let (gx, gw) = ops::weighted_batch_sum_backward(self.value(*x), self.value(*weights), g);
                Self::accumulate(grads, *x, gx);
                Self::accumulate(grads, *weights, gw);
            }
            OpRecord::Unary { x, kind } => {
                let xt = self.value(*x);
                let out = &self.nodes[id].value;
                let mut gx = Tensor::zeros(xt.shape());
                for i in 0..gx.len() {
                    gx.data_mut()[i] = g.data()[i] * unary_derivative(*kind, xt.data()[i], out.data()[i]);
                }
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::Binary { a, b, kind } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..ga.len() {
                    let (da, db) = binary_derivative(*kind, ta.data()[i], tb.data()[i]);
                    ga.data_mut()[i] = g.data()[i] * da;
                    gb.data_mut()[i] = g.data()[i] * db;
                }
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            OpRecord::AffineScalar { x, mul } => {
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v *= mul;
                }
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::Sum { x } => {
                let gx = Tensor::filled(self.value(*x).shape(), g.data()[0]);
                Self::accumulate(grads, *x, gx);
            }
            OpRecord::Custom(op) => {
                let input_vars = op.inputs();
                let inputs: Vec<&Tensor> = input_vars.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&inputs, &self.nodes[id].value, g)?;
                if input_grads.len() != input_vars.len() {
                    return Err(Error::invalid(format!(
                        "{} backward returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        input_vars.len()
                    )));
                }
                for (v, gi) in input_vars.into_iter().zip(input_grads) {
                    Self::accumulate(grads, v, gi);
                }
            }
        }
        Ok(())
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Sigmoid => stable_sigmoid(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Softplus => stable_softplus(x),
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, out: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => out * (1.0 - out),
        UnaryKind::Exp => out,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Softplus => stable_sigmoid(x),
    }
}

fn binary_forward(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
        BinaryKind::Min => a.min(b),
        BinaryKind::Max => a.max(b),
    }
}

fn binary_derivative(kind: BinaryKind, a: f64, b: f64) -> (f64, f64) {
    match kind {
        BinaryKind::Add => (1.0, 1.0),
        BinaryKind::Sub => (1.0, -1.0),
        BinaryKind::Mul => (b, a),
        BinaryKind::Div => (1.0 / b, -a / (b * b)),
        BinaryKind::Min => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        BinaryKind::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
