//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! information to recompute it. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction.

use super::kernels::{self, Conv2dSpec, ConvDims};
use super::value::Tensor;
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => arg_err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    BinaryCrossEntropy,
    CategoricalCrossEntropy,
    Mse,
    /// One minus the class-summed ratio `sum(y*p) / (sum(y) + sum(p) + eps)`.
    Dice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary-cross-entropy" | "bce" => Ok(LossKind::BinaryCrossEntropy),
            "categorical-cross-entropy" | "cce" => Ok(LossKind::CategoricalCrossEntropy),
            "mse" => Ok(LossKind::Mse),
            "dice" => Ok(LossKind::Dice),
            other => arg_err(format!("unknown loss `{other}`")),
        }
    }
}

/// Probability clamp applied inside the cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-12;
/// Added to each per-class denominator of the dice loss.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        spec: Conv2dSpec,
    },
    MaxPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    /// Bilinear sampling on a separable grid of index-space coordinates.
    Resample {
        input: Var,
        ys: Vec<f64>,
        xs: Vec<f64>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    /// Concatenation along the last axis.
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
        shape: Vec<usize>,
    },
    Reshape {
        input: Var,
        shape: Vec<usize>,
    },
    /// `[n, in] x [in, out] + [out]`.
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Loss {
        pred: Var,
        target: Tensor,
        kind: LossKind,
    },
    /// Elementwise step function; has no derivative.
    Threshold {
        input: Var,
        level: f64,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::MaxPool { input, .. }
            | Op::Resample { input, .. }
            | Op::Activation { input, .. }
            | Op::Scale { input, .. }
            | Op::Gather { input, .. }
            | Op::Reshape { input, .. }
            | Op::Threshold { input, .. } => vec![*input],
            Op::Loss { pred, .. } => vec![*pred],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { a, b } => vec![*a, *b],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Resample { .. } => "resample",
            Op::Activation { .. } => "activation",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::Loss { .. } => "loss",
            Op::Threshold { .. } => "threshold",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    /// Maxpool winners.
    argmax: Vec<usize>,
}

/// The computation record: an append-only tape of operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return arg_err(format!("operand {bad:?} is not in this graph"));
        }
        let (value, argmax) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            argmax,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            kernel,
            bias,
            spec,
        })
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.push(Op::MaxPool {
            input,
            window,
            stride,
        })
    }

    /// Align-corners bilinear resize of an HWC tensor.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return arg_err("resize to a zero extent");
        }
        let (h, w, _) = self.value(input).dims3()?;
        let ys = kernels::align_corners_coords(h, out_h);
        let xs = kernels::align_corners_coords(w, out_w);
        self.resample(input, ys, xs)
    }

    pub fn resample(&mut self, input: Var, ys: Vec<f64>, xs: Vec<f64>) -> Result<Var> {
        self.push(Op::Resample { input, ys, xs })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.push(Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Softmax)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale { input, factor })
    }

    /// Picks elements by flat index into a tensor of the given shape.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            input,
            indices,
            shape: shape.to_vec(),
        })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(Op::Linear {
            input,
            weight,
            bias,
        })
    }

    pub fn loss(&mut self, pred: Var, target: Tensor, kind: LossKind) -> Result<Var> {
        self.push(Op::Loss { pred, target, kind })
    }

    pub fn threshold(&mut self, input: Var, level: f64) -> Result<Var> {
        self.push(Op::Threshold { input, level })
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` node receives a
    /// gradient buffer; nodes the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse sweep with an explicit output cotangent `seed` (same length as
    /// the value of `root`).
    pub fn backward_seeded(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return shape_err("backward seed does not match the root value");
        }
        let loss = root;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let inputs = node.op.inputs();
            let wants: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            if wants.iter().any(|&w| w) {
                let input_grads = self.vjp(idx, &g, &wants)?;
                for ((v, want), ig) in inputs.iter().zip(&wants).zip(input_grads) {
                    if !want {
                        continue;
                    }
                    let Some(ig) = ig else { continue };
                    match &mut grads[v.0] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&ig) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            node.grad = if node.requires_grad {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data)?)
            } else {
                None
            };
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `idx` for each of its inputs.
    fn vjp(&self, idx: usize, g: &[f64], wants: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[idx];
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias: _,
                spec,
            } => {
                let d = conv_dims(val(input), val(kernel), spec)?;
                let (gi, gk, gb) =
                    kernels::conv2d_backward(val(input).data(), val(kernel).data(), g, &d, spec);
                vec![Some(gi), Some(gk), Some(gb)]
            }
            Op::MaxPool { input, .. } => {
                let mut gi = vec![0.0; val(input).len()];
                for (&src, &gv) in node.argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                vec![Some(gi)]
            }
            Op::Resample { input, ys, xs } => {
                let dims = val(input).dims3()?;
                vec![Some(kernels::resample_backward(g, dims, ys, xs))]
            }
            Op::Activation { kind, .. } => {
                let y = out.data();
                let gi = match kind {
                    Activation::Relu => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => {
                        y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect()
                    }
                    Activation::Softmax => {
                        let k = *out.shape().last().unwrap();
                        let mut gi = vec![0.0; y.len()];
                        for ((yr, gr), ir) in y.chunks(k).zip(g.chunks(k)).zip(gi.chunks_mut(k)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..k {
                                ir[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        gi
                    }
                };
                vec![Some(gi)]
            }
            Op::Concat { inputs } => {
                let widths: Vec<usize> = inputs
                    .iter()
                    .map(|v| *val(v).shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = out.len() / total;
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for (i, &wd) in widths.iter().enumerate() {
                    if wants[i] {
                        let mut gi = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            gi.extend_from_slice(&g[r * total + offset..][..wd]);
                        }
                        res.push(Some(gi));
                    } else {
                        res.push(None);
                    }
                    offset += wd;
                }
                res
            }
            Op::Add { .. } => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Scale { factor, .. } => vec![Some(g.iter().map(|v| v * factor).collect())],
            Op::Gather { input, indices, .. } => {
                let mut gi = vec![0.0; val(input).len()];
                for (&src, &gv) in indices.iter().zip(g) {
                    gi[src] += gv;
                }
                vec![Some(gi)]
            }
            Op::Reshape { .. } => vec![Some(g.to_vec())],
            Op::Linear {
                input,
                weight,
                bias: _,
            } => {
                let x = val(input).data();
                let wt = val(weight).data();
                let (n_in, n_out) = (val(weight).shape()[0], val(weight).shape()[1]);
                let rows = x.len() / n_in;
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; wt.len()];
                let mut gb = vec![0.0; n_out];
                for r in 0..rows {
                    let gr = &g[r * n_out..][..n_out];
                    for (b, &gv) in gb.iter_mut().zip(gr) {
                        *b += gv;
                    }
                    for i in 0..n_in {
                        let wrow = &wt[i * n_out..][..n_out];
                        gx[r * n_in + i] = wrow.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let xv = x[r * n_in + i];
                        if xv != 0.0 {
                            for (acc, &gv) in gw[i * n_out..][..n_out].iter_mut().zip(gr) {
                                *acc += xv * gv;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }
            Op::Loss { pred, target, kind } => {
                vec![Some(loss_grad(*kind, val(pred), target, g[0]))]
            }
            Op::Threshold { .. } => {
                return Err(Error::Unsupported(
                    "threshold has no registered derivative".into(),
                ))
            }
        })
    }

    /// Recomputes every non-leaf node from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| &values[v.0]).collect();
                    eval(op, &ins)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Output values in tape order, for comparison against [`Graph::replay`].
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Whether any node between the leaves and `root` lacks a derivative.
    pub fn find_nondifferentiable(&self, root: Var) -> Option<&'static str> {
        let mut reach = vec![false; root.0 + 1];
        reach[root.0] = true;
        for idx in (0..=root.0).rev() {
            if !reach[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Threshold { .. }) && node.requires_grad {
                return Some(node.op.name());
            }
            for v in node.op.inputs() {
                reach[v.0] = true;
            }
        }
        None
    }
}

fn conv_dims(input: &Tensor, kernel: &Tensor, spec: &Conv2dSpec) -> Result<ConvDims> {
    let (h, w, cin) = input.dims3()?;
    let (kh, kw, kcin, cout) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return shape_err(format!(
                "conv kernel must be rank 4, got {:?}",
                kernel.shape()
            ))
        }
    };
    if kcin != cin {
        return shape_err(format!(
            "conv input has {cin} channels, kernel expects {kcin}"
        ));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return arg_err("conv stride and dilation must be positive");
    }
    let (Some(oh), Some(ow)) = (spec.out_extent(h, kh), spec.out_extent(w, kw)) else {
        return arg_err(format!(
            "{h}x{w} input with padding {} admits no {kh}x{kw} placement at dilation {}",
            spec.padding, spec.dilation
        ));
    };
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    })
}

fn eval(op: &Op, ins: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let plain = |t: Result<Tensor>| t.map(|t| (t, Vec::new()));
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv2d { spec, .. } => {
            let (x, k, b) = (ins[0], ins[1], ins[2]);
            let d = conv_dims(x, k, spec)?;
            if b.len() != d.cout {
                return shape_err(format!(
                    "conv bias has {} entries for {} outputs",
                    b.len(),
                    d.cout
                ));
            }
            let out = kernels::conv2d_forward(x.data(), k.data(), b.data(), &d, spec);
            plain(Tensor::new(vec![d.oh, d.ow, d.cout], out))
        }
        Op::MaxPool { window, stride, .. } => {
            let (h, w, c) = ins[0].dims3()?;
            if *window == 0 || *stride == 0 {
                return arg_err("pool window and stride must be positive");
            }
            if h < *window || w < *window {
                return arg_err(format!("pool window {window} exceeds {h}x{w} input"));
            }
            let (out, arg, oh, ow) =
                kernels::maxpool_forward(ins[0].data(), (h, w, c), *window, *stride);
            Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
        }
        Op::Resample { ys, xs, .. } => {
            let dims = ins[0].dims3()?;
            if ys.is_empty() || xs.is_empty() {
                return arg_err("resample to a zero extent");
            }
            let out = kernels::resample_forward(ins[0].data(), dims, ys, xs);
            plain(Tensor::new(vec![ys.len(), xs.len(), dims.2], out))
        }
        Op::Activation { kind, .. } => {
            let x = ins[0];
            let data: Vec<f64> = match kind {
                Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
                Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
                Activation::Softmax => {
                    let k = *x.shape().last().unwrap();
                    let mut out = Vec::with_capacity(x.len());
                    for row in x.data().chunks(k) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        out.extend(e.iter().map(|v| v / s));
                    }
                    out
                }
            };
            plain(Tensor::new(x.shape().to_vec(), data))
        }
        Op::Concat { .. } => {
            if ins.is_empty() {
                return arg_err("concat of nothing");
            }
            let lead = &ins[0].shape()[..ins[0].shape().len() - 1];
            let mut total = 0;
            for t in ins {
                let s = t.shape();
                if &s[..s.len() - 1] != lead {
                    return shape_err(format!(
                        "concat leading extents {:?} vs {:?}",
                        s,
                        ins[0].shape()
                    ));
                }
                total += s[s.len() - 1];
            }
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in ins {
                    let wd = *t.shape().last().unwrap();
                    out.extend_from_slice(&t.data()[r * wd..][..wd]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            plain(Tensor::new(shape, out))
        }
        Op::Add { .. } => {
            if ins[0].shape() != ins[1].shape() {
                return shape_err(format!("add {:?} + {:?}", ins[0].shape(), ins[1].shape()));
            }
            let data = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| a + b)
                .collect();
            plain(Tensor::new(ins[0].shape().to_vec(), data))
        }
        Op::Scale { factor, .. } => {
            let data = ins[0].data().iter().map(|v| v * factor).collect();
            plain(Tensor::new(ins[0].shape().to_vec(), data))
        }
        Op::Gather { indices, shape, .. } => {
            let src = ins[0].data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
                return shape_err(format!("gather index {bad} out of {} values", src.len()));
            }
            plain(Tensor::new(
                shape.clone(),
                indices.iter().map(|&i| src[i]).collect(),
            ))
        }
        Op::Reshape { shape, .. } => plain(ins[0].clone().reshape(shape)),
        Op::Linear { .. } => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let (n_in, n_out) = match w.shape()[..] {
                [a, b] => (a, b),
                _ => {
                    return shape_err(format!("linear weight must be rank 2, got {:?}", w.shape()))
                }
            };
            let xs = x.shape();
            if *xs.last().unwrap() != n_in || xs.len() != 2 {
                return shape_err(format!(
                    "linear input {xs:?} does not match weight {:?}",
                    w.shape()
                ));
            }
            if b.len() != n_out {
                return shape_err("linear bias length mismatch");
            }
            let rows = xs[0];
            let mut out = Vec::with_capacity(rows * n_out);
            for r in 0..rows {
                let mut acc = b.data().to_vec();
                for i in 0..n_in {
                    let xv = x.data()[r * n_in + i];
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, wv) in acc.iter_mut().zip(&w.data()[i * n_out..][..n_out]) {
                        *a += xv * wv;
                    }
                }
                out.extend(acc);
            }
            plain(Tensor::new(vec![rows, n_out], out))
        }
        Op::Loss { target, kind, .. } => {
            plain(loss_value(*kind, ins[0], target).map(Tensor::scalar))
        }
        Op::Threshold { level, .. } => {
            let data = ins[0]
                .data()
                .iter()
                .map(|&v| if v > *level { 1.0 } else { 0.0 })
                .collect();
            plain(Tensor::new(ins[0].shape().to_vec(), data))
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_one_hot(target: &Tensor) -> Result<()> {
    let k = *target.shape().last().unwrap();
    for row in target.data().chunks(k) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return arg_err(format!("target row {row:?} is not one-hot"));
        }
    }
    Ok(())
}

fn loss_value(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "loss prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let (p, t) = (pred.data(), target.data());
    let n = p.len() as f64;
    Ok(match kind {
        LossKind::BinaryCrossEntropy => {
            let s: f64 = p
                .iter()
                .zip(t)
                .map(|(&p, &t)| {
                    let p = clamp_prob(p);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            s / n
        }
        LossKind::CategoricalCrossEntropy => {
            let k = *pred.shape().last().unwrap();
            let samples = (p.len() / k) as f64;
            let s: f64 = p
                .iter()
                .zip(t)
                .filter(|(_, &t)| t != 0.0)
                .map(|(&p, &t)| -t * clamp_prob(p).ln())
                .sum();
            s / samples
        }
        LossKind::Mse => p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
        LossKind::Dice => {
            check_one_hot(target)?;
            let k = *pred.shape().last().unwrap();
            let mut ratio = 0.0;
            for (inter, denom) in dice_sums(p, t, k) {
                ratio += inter / denom;
            }
            1.0 - ratio
        }
    })
}

/// Per-class `(sum y*p, sum y + sum p + eps)`.
fn dice_sums(p: &[f64], t: &[f64], k: usize) -> Vec<(f64, f64)> {
    let mut inter = vec![0.0; k];
    let mut denom = vec![DICE_EPS; k];
    for (pr, tr) in p.chunks(k).zip(t.chunks(k)) {
        for c in 0..k {
            inter[c] += pr[c] * tr[c];
            denom[c] += pr[c] + tr[c];
        }
    }
    inter.into_iter().zip(denom).collect()
}

fn loss_grad(kind: LossKind, pred: &Tensor, target: &Tensor, g: f64) -> Vec<f64> {
    let (p, t) = (pred.data(), target.data());
    let n = p.len() as f64;
    match kind {
        LossKind::BinaryCrossEntropy => p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                    0.0
                } else {
                    g * (p - t) / (p * (1.0 - p)) / n
                }
            })
            .collect(),
        LossKind::CategoricalCrossEntropy => {
            let k = *pred.shape().last().unwrap();
            let samples = (p.len() / k) as f64;
            p.iter()
                .zip(t)
                .map(|(&p, &t)| {
                    if t == 0.0 || p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        -g * t / p / samples
                    }
                })
                .collect()
        }
        LossKind::Mse => p
            .iter()
            .zip(t)
            .map(|(a, b)| g * 2.0 * (a - b) / n)
            .collect(),
        LossKind::Dice => {
            let k = *pred.shape().last().unwrap();
            let sums = dice_sums(p, t, k);
            let mut out = Vec::with_capacity(p.len());
            for tr in t.chunks(k) {
                for (c, &(inter, denom)) in sums.iter().enumerate() {
                    out.push(-g * (tr[c] / denom - inter / (denom * denom)));
                }
            }
            out
        }
    }
}
