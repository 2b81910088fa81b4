//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are dense NCHW `f32` buffers. Every layer keeps whatever it
//! needs for the backward pass in an explicit cache value returned by its
//! training forward; gradients accumulate into [`Param::grad`]. Work is
//! split across batch samples and reduced in sample order, so results do
//! not depend on the thread count.

pub mod adam;
pub mod conv;
pub mod norm;
pub mod ops;

pub use adam::Adam;
pub use conv::Conv2d;
pub use norm::BatchNorm2d;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A named learnable tensor or buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers (batch-norm running statistics) are not optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if trainable { vec![0.0; value.len()] } else { Vec::new() };
        Self {
            shape,
            value,
            grad,
            trainable,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], trainable)
    }

    /// He-normal initialization for a layer with `fan_in` inputs.
    pub fn kaiming<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self::new(shape, value, true)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over `(name, param)` pairs in a fixed order.
pub trait VisitParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
