//! Tape of differentiable operations and its reverse pass.
//!
//! Every operation appends a node whose inputs already exist, so node order
//! is a topological order and the reverse pass is a single backwards sweep.

use super::ops;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used to prove that gradient checks
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales every 1×1 convolution weight gradient by 1.01.
    Conv1x1WeightGrad,
}

enum Op<T> {
    Leaf,
    Conv1x1 { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Bilinear { x: Var },
    Nearest { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Softmax { x: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    WeightedSum { coeffs: Var, parts: Vec<Var> },
    GlobalAvg { x: Var },
    BroadcastAdd { x: Var, v: Var },
    RescaleToSum { x: Var, target: f64, eps: f64 },
    Sum { x: Var },
    Dot { x: Var, weights: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Tensor<T>, valid: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv2d { .. } => "conv2d",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::Nearest { .. } => "nearest_resize",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Softmax { .. } => "softmax_spatial",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scalar_scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::GlobalAvg { .. } => "global_avg_spatial",
            Op::BroadcastAdd { .. } => "broadcast_add_channel",
            Op::RescaleToSum { .. } => "rescale_to_sum",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv1x1 { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Matmul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::BroadcastAdd { x, v } => vec![*x, *v],
            Op::Concat { parts } => parts.clone(),
            Op::WeightedSum { coeffs, parts } => {
                let mut v = vec![*coeffs];
                v.extend(parts);
                v
            }
            Op::Bilinear { x }
            | Op::Nearest { x }
            | Op::MaxPool { x, .. }
            | Op::Softmax { x }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::GlobalAvg { x }
            | Op::RescaleToSum { x, .. }
            | Op::Sum { x }
            | Op::Dot { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use record of forward operations.
///
/// Build it once per forward pass, call [`Graph::backward`] once, then read
/// gradients with [`Graph::grad`].
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<BackwardFault>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// When enabled, any primitive that turns finite inputs into NaN/Inf
    /// returns [`Error::NonFinite`].
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        if self.check_finite && !value.is_finite() && inputs.iter().all(|i| self.nodes[i.0].value.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::conv1x1(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Conv1x1 { x, w, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(y, Op::Bilinear { x })
    }

    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::nearest_resize(self.value(x), out_h, out_w)?;
        self.push(y, Op::Nearest { x })
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2x2(self.value(x))?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_spatial(self.value(x))?;
        self.push(y, Op::Softmax { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose(self.value(x))?;
        self.push(y, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        self.push(y, Op::Reshape { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        self.push(y, Op::Concat { parts: parts.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        self.push(y, Op::Add { a, b })
    }

    pub fn scalar_scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::lit(factor);
        let y = ops::scalar_scale(self.value(x), factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// `Σ_j coeffs[j] · parts[j]`; gradients flow into the coefficients too.
    pub fn weighted_sum(&mut self, coeffs: Var, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::weighted_sum(self.value(coeffs), &tensors)?;
        self.push(
            y,
            Op::WeightedSum {
                coeffs,
                parts: parts.to_vec(),
            },
        )
    }

    pub fn global_avg_spatial(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_spatial(self.value(x))?;
        self.push(y, Op::GlobalAvg { x })
    }

    pub fn broadcast_add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = ops::broadcast_add_channel(self.value(x), self.value(v))?;
        self.push(y, Op::BroadcastAdd { x, v })
    }

    pub fn rescale_to_sum(&mut self, x: Var, target: f64, eps: f64) -> Result<Var> {
        let y = ops::rescale_to_sum(self.value(x), target, eps)?;
        self.push(y, Op::RescaleToSum { x, target, eps })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.value(x).dims() != weights.dims() {
            return Err(Error::shape(
                "dot",
                format!("weights {:?} vs input {:?}", weights.dims(), self.value(x).dims()),
            ));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { x, weights })
    }

    /// Mean cross-entropy over non-ignored pixels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (loss, probs, valid) = ops::cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                valid,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients reaching a node through
    /// several consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let dims = self.value(loss).dims().to_vec();
        if !dims.is_empty() {
            return Err(Error::NotScalar(dims));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                for (input, contribution) in self.node_backward(id, &g) {
                    assert!(input.0 < id, "graph order violated");
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, id: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } => {
                let (dx, mut dw, db) = ops::conv1x1_backward(val(*x), val(*w), g);
                if self.fault == Some(BackwardFault::Conv1x1WeightGrad) {
                    dw = dw.map(|v| v * T::lit(1.01));
                }
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad, self.wants(*x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Bilinear { x } => out.push((*x, ops::bilinear_resize_backward(val(*x).dims(), g))),
            Op::Nearest { x } => out.push((*x, ops::nearest_resize_backward(val(*x).dims(), g))),
            Op::MaxPool { x, argmax } => out.push((*x, ops::maxpool2x2_backward(val(*x).dims(), argmax, g))),
            Op::Softmax { x } => out.push((*x, ops::softmax_spatial_backward(&node.value, g))),
            Op::Matmul { a, b } => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Transpose { x } => out.push((*x, ops::transpose(g).unwrap())),
            Op::Reshape { x } => out.push((*x, g.clone().reshape(val(*x).dims().to_vec()).unwrap())),
            Op::Relu { x } => out.push((*x, ops::relu_backward(val(*x), g))),
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    let slice = g.data()[offset..offset + n].to_vec();
                    out.push((*p, Tensor::new(val(*p).dims().to_vec(), slice).unwrap()));
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale { x, factor } => out.push((*x, ops::scalar_scale(g, *factor))),
            Op::WeightedSum { coeffs, parts } => {
                let c = val(*coeffs);
                let dc: Vec<T> = parts
                    .iter()
                    .map(|p| val(*p).data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum())
                    .collect();
                out.push((*coeffs, Tensor::new(c.dims().to_vec(), dc).unwrap()));
                for (p, &a) in parts.iter().zip(c.data()) {
                    out.push((*p, ops::scalar_scale(g, a)));
                }
            }
            Op::GlobalAvg { x } => {
                let (c, h, w) = val(*x).chw().unwrap();
                let n = T::lit((h * w) as f64);
                let data = (0..c * h * w).map(|i| g.data()[i / (h * w)] / n).collect();
                out.push((*x, Tensor::new(vec![c, h, w], data).unwrap()));
            }
            Op::BroadcastAdd { x, v } => {
                out.push((*x, g.clone()));
                let c = val(*v).numel();
                let dv = (0..c).map(|ch| g.channel(ch).iter().copied().sum()).collect();
                out.push((*v, Tensor::new(vec![c], dv).unwrap()));
            }
            Op::RescaleToSum { x, target, eps } => {
                out.push((*x, ops::rescale_to_sum_backward(val(*x), *target, *eps, g)))
            }
            Op::Sum { x } => out.push((*x, Tensor::full(val(*x).dims().to_vec(), g.data()[0]))),
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                out.push((*x, weights.map(|w| w * s)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                valid,
            } => out.push((*logits, ops::cross_entropy_backward(probs, labels, *valid, g.data()[0]))),
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }
}
