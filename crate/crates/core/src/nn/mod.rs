//! Minimal differentiable kernel.
//!
//! Layers are plain structs holding their [`Param`]s. Each layer has a pure `forward` that
//! returns its output together with a cache, and a `backward` that consumes the cache and
//! the upstream gradient, accumulates parameter gradients and returns the input gradient.
//! Models compose these passes in reverse order; there is no global tape.

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod gru;
pub mod highway;
pub mod linear;
pub mod pool;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{conv1d_forward, Conv1d, ConvCache};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, relative_error, GradCheckReport, Stencil, DEFAULT_EPS, FIVE_POINT_STEP,
};
pub use gru::{BiGru, BiGruCache, Direction, Gru, GruCache, GruStack, GruStackCache};
pub use highway::{Highway, HighwayCache};
pub use linear::{linear_forward, Linear, LinearCache};
pub use pool::{maxpool1d_same, MaxPool1d, PoolCache};

/// Random source used for every initializer and generator in the crate.
pub type SeededRng = ChaCha8Rng;

/// Whether batch normalization uses batch statistics (and updates its running averages)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param::new(name, Tensor::zeros(shape))
    }

    /// Uniform initialization on `[-limit, limit]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], limit: f64, rng: &mut SeededRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Param::new(name, Tensor::from_vec(shape, data).expect("shape product"))
    }
}

/// Non-trainable state that still has to be checkpointed (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Anything that owns parameters. Visit order is fixed and defines the order of optimizer
/// state and checkpoint records.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Gradient of ReLU given the post-activation output.
pub(crate) fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &y) in dx.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub(crate) fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
