//! Minimal dense-layer toolkit with hand-written reverse-mode gradients.
//!
//! Every trainable tensor is a [`Param`] (value plus gradient buffer, both
//! 2-D; biases are `1 x n`). Containers expose their tensors in a fixed
//! declared order through [`Parameterized`], which is what the optimizer and
//! the checkpoint writer walk.

mod adam;

pub use adam::{Adam, AdamConfig};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale));
        Self::new(value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning trainable tensors.
pub trait Parameterized {
    /// Visits every tensor in declared order with a stable dotted name.
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.grad.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// `(name, L2 norm)` of every tensor, for divergence diagnostics.
    fn param_norms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            out.push((name.to_string(), p.value.iter().map(|v| v * v).sum::<f64>().sqrt()))
        });
        out
    }
}

/// Affine map `y = x W + b` on row-major batches; `W` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Fan-in scaled uniform init, zero bias.
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut Rng) -> Self {
        Self::scaled(input, output, bias, 1.0, rng)
    }

    pub fn scaled(input: usize, output: usize, bias: bool, gain: f64, rng: &mut Rng) -> Self {
        let scale = gain / (input.max(1) as f64).sqrt();
        Self {
            weight: Param::uniform(input, output, scale, rng),
            bias: bias.then(|| Param::zeros(1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(input, output),
            bias: bias.then(|| Param::zeros(1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        self.weight.grad += &x.t().dot(&dy);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.value.t())
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU, `x * sigmoid(x)`: the hidden nonlinearity of the drift network.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
