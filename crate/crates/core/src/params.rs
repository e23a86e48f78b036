//! Named parameter tensors and their graph bindings.
//!
//! Parameter records (`*Params`) own tensors; binding one into a [`Graph`]
//! yields the matching `*Vars` record of leaf handles. Both sides enumerate
//! their members under the same dotted names, which is how gradients, SGD
//! state, checkpoints and gradient checks line up.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A record of trainable tensors.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Mutable access to one tensor by its dotted name.
    fn with_tensor_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut Tensor<T>)) -> bool {
        let mut found = false;
        self.visit_mut("", &mut |n, t| {
            if n == name {
                f(t);
                found = true;
            }
        });
        found
    }
}

/// Graph handles mirroring a [`Parameters`] record.
pub trait VarSet {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var));

    fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit_vars("", &mut |n, v| out.push((n, v)));
        out
    }
}

/// Gradients of every bound parameter after a backward pass, keyed by name.
/// Parameters the loss never reached get zero gradients.
pub fn collect_grads<T: Real>(graph: &Graph<T>, vars: &dyn VarSet) -> IndexMap<String, Tensor<T>> {
    vars.named_vars()
        .into_iter()
        .map(|(name, v)| {
            let g = graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).dims().to_vec()));
            (name, g)
        })
        .collect()
}

/// Uniform init with bound `gain · sqrt(3 / fan_in)`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(dims: Vec<usize>, fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(dims, -bound, bound, rng)
}

/// Gain for kernels followed by a ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// Gain for purely affine kernels.
pub const LINEAR_GAIN: f64 = 1.0;

/// Convolution kernel plus bias. A rank-2 weight `(c_out, c_in)` is a 1×1
/// convolution; a rank-4 weight `(c_out, c_in, k, k)` is a k×k one.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T: Real = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(c_out: usize, c_in: usize, kernel: usize) -> Self {
        let weight = if kernel == 1 {
            Tensor::zeros(vec![c_out, c_in])
        } else {
            Tensor::zeros(vec![c_out, c_in, kernel, kernel])
        };
        Self {
            weight,
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    pub fn init<R: Rng + ?Sized>(c_out: usize, c_in: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        let dims = if kernel == 1 {
            vec![c_out, c_in]
        } else {
            vec![c_out, c_in, kernel, kernel]
        };
        Self {
            weight: fan_in_uniform(dims, c_in * kernel * kernel, gain, rng),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        if self.weight.rank() == 4 {
            self.weight.dims()[2]
        } else {
            1
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ConvVars {
        ConvVars {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
            kernel: self.kernel(),
        }
    }
}

impl<T: Real> Parameters<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    kernel: usize,
}

impl ConvVars {
    /// Stride-1 "same" convolution.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.kernel == 1 {
            g.conv1x1(x, self.weight, self.bias)
        } else {
            g.conv2d(x, self.weight, self.bias, 1, self.kernel / 2)
        }
    }

    pub fn apply_strided<T: Real>(&self, g: &mut Graph<T>, x: Var, stride: usize) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, stride, self.kernel / 2)
    }
}

impl VarSet for ConvVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        f(join(prefix, "weight"), self.weight);
        f(join(prefix, "bias"), self.bias);
    }
}
