//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every differentiable op in execution order
//! (define-by-run). [`Graph::backward`] walks the record once in reverse,
//! accumulating vector-Jacobian products. The tape is single-owner: it is
//! deliberately not `Sync` and must not be shared across concurrent rollouts.

use super::element::Element;
use super::kernels::{self, Conv2dGeom, GroupNormSaved, TConv2dGeom};
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Hadamard,
}

enum Payload<E: Element> {
    Leaf { requires_grad: bool },
    Conv2d { geom: Conv2dGeom },
    TConv2d { geom: TConv2dGeom },
    GroupNorm { groups: usize, saved: GroupNormSaved<E> },
    Act { kind: Activation },
    Binary { op: BinaryOp },
    PeepholeMul,
    ConcatChannels { channels: Vec<usize> },
    SliceChannels { from: usize, to: usize },
    Corr { max_disp: usize, stride: usize },
    Warp,
    Clamp01,
    Scale { factor: f64 },
    Sum,
    WeightedPixelLoss { weights: Arc<Vec<E>>, target: Arc<Vec<E>> },
    GdlLoss { target: Arc<Vec<E>>, exponent: i32 },
}

struct Node<E: Element> {
    value: Tensor<E>,
    inputs: Vec<usize>,
    payload: Payload<E>,
    needs_grad: bool,
}

pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a tensor as a leaf; it participates in `backward` when its
    /// `requires_grad` flag is set.
    pub fn leaf(&self, tensor: Tensor<E>) -> Value {
        let rg = tensor.requires_grad();
        self.push(tensor, vec![], Payload::Leaf { requires_grad: rg })
    }

    /// Registers a constant (never differentiated, regardless of flags).
    pub fn constant(&self, tensor: Tensor<E>) -> Value {
        self.push(tensor, vec![], Payload::Leaf { requires_grad: false })
    }

    /// Snapshot of a node's current value (cheap: shares the buffer).
    pub fn value(&self, v: Value) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor<E>, inputs: Vec<usize>, payload: Payload<E>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match payload {
            Payload::Leaf { requires_grad } => requires_grad,
            _ => inputs.iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node {
            value,
            inputs,
            payload,
            needs_grad,
        });
        Value(nodes.len() - 1)
    }

    fn checked(&self, out: Tensor<E>, op: &str, inputs: Vec<usize>, payload: Payload<E>) -> Result<Value> {
        out.validate_finite(op)?;
        Ok(self.push(out, inputs, payload))
    }

    pub fn conv2d(
        &self,
        x: Value,
        kernel: Value,
        bias: Option<Value>,
        stride: (usize, usize),
        pad: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Value> {
        let xt = self.value(x);
        let wt = self.value(kernel);
        let geom = Conv2dGeom::new(xt.shape(), wt.shape(), stride, pad, dilation)?;
        let bt = bias.map(|b| self.value(b));
        if let Some(b) = &bt {
            if b.shape() != [geom.cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    b.shape(),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(&geom, xt.data(), wt.data(), bt.as_ref().map(|b| b.data()));
        let out = Tensor::from_shared(geom.out_shape(), Arc::new(out));
        let mut inputs = vec![x.0, kernel.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        self.checked(out, "conv2d", inputs, Payload::Conv2d { geom })
    }

    /// Fractionally-strided convolution; kernel layout `[cin, cout, kh, kw]`.
    pub fn transposed_conv2d(
        &self,
        x: Value,
        kernel: Value,
        bias: Option<Value>,
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Value> {
        let xt = self.value(x);
        let wt = self.value(kernel);
        let geom = TConv2dGeom::new(xt.shape(), wt.shape(), stride, pad, out_pad)?;
        let bt = bias.map(|b| self.value(b));
        if let Some(b) = &bt {
            if b.shape() != [geom.cout] {
                return Err(Error::Shape(format!(
                    "transposed_conv2d bias shape {:?} does not match {} output channels",
                    b.shape(),
                    geom.cout
                )));
            }
        }
        let out = kernels::tconv2d_forward(&geom, xt.data(), wt.data(), bt.as_ref().map(|b| b.data()));
        let out = Tensor::from_shared(geom.out_shape(), Arc::new(out));
        let mut inputs = vec![x.0, kernel.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        self.checked(out, "transposed_conv2d", inputs, Payload::TConv2d { geom })
    }

    pub fn group_norm(&self, x: Value, gamma: Value, beta: Value, groups: usize, eps: f64) -> Result<Value> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("group_norm eps must be positive".into()));
        }
        let gt = self.value(gamma);
        let bt = self.value(beta);
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::Shape(format!(
                "group_norm affine shapes {:?}/{:?} must be [{c}]",
                gt.shape(),
                bt.shape()
            )));
        }
        let (out, saved) =
            kernels::group_norm_forward(xt.data(), (n, c, h, w), groups, eps, gt.data(), bt.data());
        let out = Tensor::from_shared(xt.shape().to_vec(), Arc::new(out));
        self.checked(
            out,
            "group_norm",
            vec![x.0, gamma.0, beta.0],
            Payload::GroupNorm { groups, saved },
        )
    }

    pub fn activation(&self, x: Value, kind: Activation) -> Result<Value> {
        let xt = self.value(x);
        let out = match kind {
            Activation::Sigmoid => xt.map(|v| E::ONE / (E::ONE + (-v).exp())),
            Activation::Tanh => xt.map(|v| v.tanh()),
            Activation::LeakyRelu { slope } => {
                let s = E::from_f64(slope);
                xt.map(|v| if v >= E::ZERO { v } else { s * v })
            }
        };
        self.checked(out, "activation", vec![x.0], Payload::Act { kind })
    }

    pub fn binary(&self, a: Value, b: Value, op: BinaryOp) -> Result<Value> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!(
                "elementwise {:?}: shapes {:?} and {:?} differ",
                op,
                at.shape(),
                bt.shape()
            )));
        }
        let data: Vec<E> = at
            .data()
            .iter()
            .zip(bt.data().iter())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Hadamard => x * y,
            })
            .collect();
        let out = Tensor::from_shared(at.shape().to_vec(), Arc::new(data));
        self.checked(out, "elementwise", vec![a.0, b.0], Payload::Binary { op })
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn hadamard(&self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, BinaryOp::Hadamard)
    }

    /// `out[n] = weight ⊙ x[n]` for a `[C,H,W]` weight shared across the batch.
    pub fn peephole_mul(&self, weight: Value, x: Value) -> Result<Value> {
        let wt = self.value(weight);
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if wt.shape() != [c, h, w] {
            return Err(Error::Shape(format!(
                "peephole weight shape {:?} must be [{c}, {h}, {w}]",
                wt.shape()
            )));
        }
        let per = c * h * w;
        let mut data = vec![E::ZERO; xt.numel()];
        for ni in 0..n {
            for i in 0..per {
                data[ni * per + i] = wt.data()[i] * xt.data()[ni * per + i];
            }
        }
        let out = Tensor::from_shared(xt.shape().to_vec(), Arc::new(data));
        self.checked(out, "peephole_mul", vec![weight.0, x.0], Payload::PeepholeMul)
    }

    /// Stacks along the channel axis, preserving argument order.
    pub fn concat_channels(&self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels needs at least one input".into()));
        }
        let tensors: Vec<Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = tensors[0].dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for t in &tensors {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: shape {:?} incompatible with [{n}, _, {h}, {w}]",
                    t.shape()
                )));
            }
            channels.push(tc);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = vec![E::ZERO; n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0;
            for (t, &tc) in tensors.iter().zip(&channels) {
                let src = &t.data()[ni * tc * plane..(ni + 1) * tc * plane];
                data[(ni * c_total + c_off) * plane..(ni * c_total + c_off + tc) * plane]
                    .copy_from_slice(src);
                c_off += tc;
            }
        }
        let out = Tensor::from_shared(vec![n, c_total, h, w], Arc::new(data));
        self.checked(
            out,
            "concat_channels",
            parts.iter().map(|p| p.0).collect(),
            Payload::ConcatChannels { channels },
        )
    }

    /// Channel range `[from, to)` of an NCHW tensor.
    pub fn slice_channels(&self, x: Value, from: usize, to: usize) -> Result<Value> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if from >= to || to > c {
            return Err(Error::Shape(format!(
                "slice_channels range {from}..{to} invalid for {c} channels"
            )));
        }
        let plane = h * w;
        let sc = to - from;
        let mut data = vec![E::ZERO; n * sc * plane];
        for ni in 0..n {
            let src = &xt.data()[(ni * c + from) * plane..(ni * c + to) * plane];
            data[ni * sc * plane..(ni + 1) * sc * plane].copy_from_slice(src);
        }
        let out = Tensor::from_shared(vec![n, sc, h, w], Arc::new(data));
        self.checked(out, "slice_channels", vec![x.0], Payload::SliceChannels { from, to })
    }

    /// Cost volume of per-pixel dot products between displaced feature maps.
    pub fn corr(&self, prev: Value, curr: Value, max_disp: usize, stride: usize) -> Result<Value> {
        let at = self.value(prev);
        let bt = self.value(curr);
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!(
                "corr: feature maps {:?} and {:?} differ",
                at.shape(),
                bt.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("corr displacement stride must be >= 1".into()));
        }
        let (n, c, h, w) = at.dims4()?;
        let out = kernels::corr_forward(at.data(), bt.data(), (n, c, h, w), max_disp, stride);
        let d_ch = kernels::corr_channels(max_disp, stride);
        let out = Tensor::from_shared(vec![n, d_ch, h, w], Arc::new(out));
        self.checked(out, "corr", vec![prev.0, curr.0], Payload::Corr { max_disp, stride })
    }

    /// Bilinear gather of `src` along per-pixel displacements `(u, v)`;
    /// out-of-grid samples read as zero.
    pub fn warp(&self, src: Value, u: Value, v: Value) -> Result<Value> {
        let st = self.value(src);
        let ut = self.value(u);
        let vt = self.value(v);
        let (n, c, h, w) = st.dims4()?;
        for (name, t) in [("u", &ut), ("v", &vt)] {
            if t.shape() != [n, 1, h, w] {
                return Err(Error::Shape(format!(
                    "warp: flow component {name} has shape {:?}, expected [{n}, 1, {h}, {w}]",
                    t.shape()
                )));
            }
        }
        let out = kernels::warp_forward(st.data(), ut.data(), vt.data(), (n, c, h, w));
        let out = Tensor::from_shared(st.shape().to_vec(), Arc::new(out));
        self.checked(out, "warp", vec![src.0, u.0, v.0], Payload::Warp)
    }

    /// Clamps into [0, 1] (inference-side; the subgradient is zero outside).
    pub fn clamp01(&self, x: Value) -> Result<Value> {
        let xt = self.value(x);
        let out = xt.map(|v| v.maximum(E::ZERO).minimum(E::ONE));
        self.checked(out, "clamp01", vec![x.0], Payload::Clamp01)
    }

    pub fn scale(&self, x: Value, factor: f64) -> Result<Value> {
        let xt = self.value(x);
        let k = E::from_f64(factor);
        let out = xt.map(|v| v * k);
        self.checked(out, "scale", vec![x.0], Payload::Scale { factor })
    }

    /// Full reduction to a scalar (shape `[1]`).
    pub fn sum(&self, x: Value) -> Result<Value> {
        let xt = self.value(x);
        let mut s = E::ZERO;
        for &v in xt.data() {
            s += v;
        }
        self.checked(Tensor::scalar(s), "sum", vec![x.0], Payload::Sum)
    }

    /// `Σ w ⊙ (|pred−target| + (pred−target)²)`; weights and target are
    /// constants of the objective.
    pub fn weighted_pixel_loss(&self, pred: Value, target: &Tensor<E>, weights: &Tensor<E>) -> Result<Value> {
        let pt = self.value(pred);
        if pt.shape() != target.shape() || pt.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_pixel_loss: pred {:?}, target {:?}, weights {:?} must all match",
                pt.shape(),
                target.shape(),
                weights.shape()
            )));
        }
        let mut s = E::ZERO;
        for ((&p, &t), &w) in pt.data().iter().zip(target.data()).zip(weights.data()) {
            let d = p - t;
            s += w * (d.abs() + d * d);
        }
        self.checked(
            Tensor::scalar(s),
            "weighted_pixel_loss",
            vec![pred.0],
            Payload::WeightedPixelLoss {
                weights: weights.shared_data(),
                target: target.shared_data(),
            },
        )
    }

    /// Gradient difference loss over forward differences of the last two axes.
    pub fn gdl_loss(&self, pred: Value, target: &Tensor<E>, exponent: i32) -> Result<Value> {
        let pt = self.value(pred);
        if pt.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "gdl_loss: pred {:?} and target {:?} must match",
                pt.shape(),
                target.shape()
            )));
        }
        if pt.shape().len() < 2 {
            return Err(Error::Shape("gdl_loss needs rank >= 2".into()));
        }
        if exponent < 1 {
            return Err(Error::Config("gdl exponent must be >= 1".into()));
        }
        let (h, w) = last_two(pt.shape());
        let outer = pt.numel() / (h * w);
        let z = pt.data();
        let t = target.data();
        let mut s = E::ZERO;
        for o in 0..outer {
            let base = o * h * w;
            for i in 0..h {
                for j in 0..w {
                    let p = base + i * w + j;
                    if i > 0 {
                        let a = (t[p] - t[p - w]).abs() - (z[p] - z[p - w]).abs();
                        s += a.abs().powi(exponent);
                    }
                    if j > 0 {
                        let a = (t[p] - t[p - 1]).abs() - (z[p] - z[p - 1]).abs();
                        s += a.abs().powi(exponent);
                    }
                }
            }
        }
        self.checked(
            Tensor::scalar(s),
            "gdl_loss",
            vec![pred.0],
            Payload::GdlLoss {
                target: target.shared_data(),
                exponent,
            },
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// `requires_grad` leaf; untouched leaves read back as zeros.
    pub fn backward(&self, root: Value) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        if !nodes[root.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![E::ONE]);

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.payload, Payload::Leaf { .. }) {
                grads[idx] = Some(gy);
                continue;
            }
            let input_needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
            match &node.payload {
                Payload::Leaf { .. } => unreachable!("leaves handled above"),
                Payload::Conv2d { geom } => {
                    let x = &nodes[node.inputs[0]].value;
                    let w = &nodes[node.inputs[1]].value;
                    let need_db = node.inputs.len() > 2 && input_needs[2];
                    let g = kernels::conv2d_backward(
                        geom,
                        x.data(),
                        w.data(),
                        &gy,
                        input_needs[0],
                        input_needs[1],
                        need_db,
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads[node.inputs[0]], dx);
                    }
                    if let Some(dw) = g.dw {
                        accumulate(&mut grads[node.inputs[1]], dw);
                    }
                    if let Some(db) = g.db {
                        accumulate(&mut grads[node.inputs[2]], db);
                    }
                }
                Payload::TConv2d { geom } => {
                    let x = &nodes[node.inputs[0]].value;
                    let w = &nodes[node.inputs[1]].value;
                    let need_db = node.inputs.len() > 2 && input_needs[2];
                    let g = kernels::tconv2d_backward(
                        geom,
                        x.data(),
                        w.data(),
                        &gy,
                        input_needs[0],
                        input_needs[1],
                        need_db,
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads[node.inputs[0]], dx);
                    }
                    if let Some(dw) = g.dw {
                        accumulate(&mut grads[node.inputs[1]], dw);
                    }
                    if let Some(db) = g.db {
                        accumulate(&mut grads[node.inputs[2]], db);
                    }
                }
                Payload::GroupNorm { groups, saved } => {
                    let x = &nodes[node.inputs[0]].value;
                    let gamma = &nodes[node.inputs[1]].value;
                    let dims = x.dims4()?;
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(x.data(), dims, *groups, gamma.data(), saved, &gy);
                    if input_needs[0] {
                        accumulate(&mut grads[node.inputs[0]], dx);
                    }
                    if input_needs[1] {
                        accumulate(&mut grads[node.inputs[1]], dgamma);
                    }
                    if input_needs[2] {
                        accumulate(&mut grads[node.inputs[2]], dbeta);
                    }
                }
                Payload::Act { kind } => {
                    let y = node.value.data();
                    let x = nodes[node.inputs[0]].value.data();
                    let dx: Vec<E> = match kind {
                        Activation::Sigmoid => gy
                            .iter()
                            .zip(y)
                            .map(|(&g, &yv)| g * yv * (E::ONE - yv))
                            .collect(),
                        Activation::Tanh => gy
                            .iter()
                            .zip(y)
                            .map(|(&g, &yv)| g * (E::ONE - yv * yv))
                            .collect(),
                        Activation::LeakyRelu { slope } => {
                            let s = E::from_f64(*slope);
                            gy.iter()
                                .zip(x)
                                .map(|(&g, &xv)| if xv >= E::ZERO { g } else { g * s })
                                .collect()
                        }
                    };
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Payload::Binary { op } => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    match op {
                        BinaryOp::Add => {
                            if input_needs[0] {
                                accumulate(&mut grads[a], gy.clone());
                            }
                            if input_needs[1] {
                                accumulate(&mut grads[b], gy);
                            }
                        }
                        BinaryOp::Sub => {
                            if input_needs[1] {
                                accumulate(&mut grads[b], gy.iter().map(|&g| -g).collect());
                            }
                            if input_needs[0] {
                                accumulate(&mut grads[a], gy.clone());
                            }
                        }
                        BinaryOp::Hadamard => {
                            let at = nodes[a].value.data();
                            let bt = nodes[b].value.data();
                            if input_needs[0] {
                                accumulate(
                                    &mut grads[a],
                                    gy.iter().zip(bt).map(|(&g, &bv)| g * bv).collect(),
                                );
                            }
                            if input_needs[1] {
                                accumulate(
                                    &mut grads[b],
                                    gy.iter().zip(at).map(|(&g, &av)| g * av).collect(),
                                );
                            }
                        }
                    }
                }
                Payload::PeepholeMul => {
                    let w = nodes[node.inputs[0]].value.data();
                    let x = &nodes[node.inputs[1]].value;
                    let per = w.len();
                    let n = x.numel() / per;
                    if input_needs[0] {
                        let mut dw = vec![E::ZERO; per];
                        for ni in 0..n {
                            for i in 0..per {
                                dw[i] += gy[ni * per + i] * x.data()[ni * per + i];
                            }
                        }
                        accumulate(&mut grads[node.inputs[0]], dw);
                    }
                    if input_needs[1] {
                        let mut dx = vec![E::ZERO; x.numel()];
                        for ni in 0..n {
                            for i in 0..per {
                                dx[ni * per + i] = gy[ni * per + i] * w[i];
                            }
                        }
                        accumulate(&mut grads[node.inputs[1]], dx);
                    }
                }
                Payload::ConcatChannels { channels } => {
                    let (n, _, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let c_total: usize = channels.iter().sum();
                    let mut c_off = 0;
                    for (pi, (&part, &tc)) in node.inputs.iter().zip(channels).enumerate() {
                        if input_needs[pi] {
                            let mut dpart = vec![E::ZERO; n * tc * plane];
                            for ni in 0..n {
                                let src = &gy[(ni * c_total + c_off) * plane
                                    ..(ni * c_total + c_off + tc) * plane];
                                dpart[ni * tc * plane..(ni + 1) * tc * plane].copy_from_slice(src);
                            }
                            accumulate(&mut grads[part], dpart);
                        }
                        c_off += tc;
                    }
                }
                Payload::SliceChannels { from, to } => {
                    let x = &nodes[node.inputs[0]].value;
                    let (n, c, h, w) = x.dims4()?;
                    let plane = h * w;
                    let sc = to - from;
                    let mut dx = vec![E::ZERO; x.numel()];
                    for ni in 0..n {
                        dx[(ni * c + from) * plane..(ni * c + to) * plane]
                            .copy_from_slice(&gy[ni * sc * plane..(ni + 1) * sc * plane]);
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Payload::Corr { max_disp, stride } => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    let dims = a.dims4()?;
                    let (da, db) =
                        kernels::corr_backward(a.data(), b.data(), dims, *max_disp, *stride, &gy);
                    if input_needs[0] {
                        accumulate(&mut grads[node.inputs[0]], da);
                    }
                    if input_needs[1] {
                        accumulate(&mut grads[node.inputs[1]], db);
                    }
                }
                Payload::Warp => {
                    let src = &nodes[node.inputs[0]].value;
                    let u = &nodes[node.inputs[1]].value;
                    let v = &nodes[node.inputs[2]].value;
                    let dims = src.dims4()?;
                    let (dsrc, du, dv) =
                        kernels::warp_backward(src.data(), u.data(), v.data(), dims, &gy);
                    if input_needs[0] {
                        accumulate(&mut grads[node.inputs[0]], dsrc);
                    }
                    if input_needs[1] {
                        accumulate(&mut grads[node.inputs[1]], du);
                    }
                    if input_needs[2] {
                        accumulate(&mut grads[node.inputs[2]], dv);
                    }
                }
                Payload::Clamp01 => {
                    let x = nodes[node.inputs[0]].value.data();
                    let dx: Vec<E> = gy
                        .iter()
                        .zip(x)
                        .map(|(&g, &xv)| {
                            if xv >= E::ZERO && xv <= E::ONE {
                                g
                            } else {
                                E::ZERO
                            }
                        })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Payload::Scale { factor } => {
                    let k = E::from_f64(*factor);
                    accumulate(&mut grads[node.inputs[0]], gy.iter().map(|&g| g * k).collect());
                }
                Payload::Sum => {
                    let x = &nodes[node.inputs[0]].value;
                    let g = gy[0];
                    accumulate(&mut grads[node.inputs[0]], vec![g; x.numel()]);
                }
                Payload::WeightedPixelLoss { weights, target } => {
                    let p = nodes[node.inputs[0]].value.data();
                    let g = gy[0];
                    let two = E::from_f64(2.0);
                    let dp: Vec<E> = p
                        .iter()
                        .zip(target.iter())
                        .zip(weights.iter())
                        .map(|((&pv, &tv), &wv)| {
                            let d = pv - tv;
                            let sgn = if d > E::ZERO {
                                E::ONE
                            } else if d < E::ZERO {
                                -E::ONE
                            } else {
                                E::ZERO
                            };
                            g * wv * (sgn + two * d)
                        })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], dp);
                }
                Payload::GdlLoss { target, exponent } => {
                    let pred = &nodes[node.inputs[0]].value;
                    let (h, w) = last_two(pred.shape());
                    let outer = pred.numel() / (h * w);
                    let z = pred.data();
                    let t = &target[..];
                    let g = gy[0];
                    let lam = *exponent;
                    let mut dz = vec![E::ZERO; pred.numel()];
                    let sign = |x: E| {
                        if x > E::ZERO {
                            E::ONE
                        } else if x < E::ZERO {
                            -E::ONE
                        } else {
                            E::ZERO
                        }
                    };
                    for o in 0..outer {
                        let base = o * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let p = base + i * w + j;
                                for q in [if i > 0 { Some(p - w) } else { None }, if j > 0 {
                                    Some(p - 1)
                                } else {
                                    None
                                }]
                                .into_iter()
                                .flatten()
                                {
                                    let dzv = z[p] - z[q];
                                    let a = (t[p] - t[q]).abs() - dzv.abs();
                                    let outer_d = if lam == 1 {
                                        sign(a)
                                    } else {
                                        E::from_f64(lam as f64) * a.abs().powi(lam - 1) * sign(a)
                                    };
                                    // dL/d(dzv) = -outer_d * sign(dzv)
                                    let d = -g * outer_d * sign(dzv);
                                    dz[p] += d;
                                    dz[q] -= d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dz);
                }
            }
        }

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn last_two(shape: &[usize]) -> (usize, usize) {
    let r = shape.len();
    (shape[r - 2], shape[r - 1])
}

fn accumulate<E: Element>(slot: &mut Option<Vec<E>>, add: Vec<E>) {
    match slot {
        None => *slot = Some(add),
        Some(dst) => {
            debug_assert_eq!(dst.len(), add.len());
            for (d, s) in dst.iter_mut().zip(add) {
                *d += s;
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a node if it participated in the root's computation.
    pub fn get(&self, v: Value) -> Option<Tensor<E>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_shared(self.shapes[v.0].clone(), Arc::new(g.clone())))
    }

    /// Gradient with the leaf's shape; zeros when the leaf did not participate.
    pub fn get_or_zeros(&self, v: Value) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_shared(self.shapes[v.0].clone(), Arc::new(g.clone())),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
