//! Learnable layer parameters and the naming/visiting machinery shared by
//! the attention blocks, branch U-Nets, and checkpointing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub(crate) fn key(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Uniform(-bound, bound) leaf parameter.
pub fn uniform_param<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::param(shape, data).expect("uniform_param shape")
}

/// Weight + bias of one convolution layer. Weights start at
/// uniform(±1/√fan_in), biases at zero.
#[derive(Debug, Clone)]
pub struct Conv2dParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Conv2dParams<E> {
    pub fn init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv2dParams {
            weight: uniform_param(rng, &[cout, cin, k, k], bound),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).unwrap(),
        }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        Conv2dParams {
            weight: Tensor::param(&[cout, cin, k, k], vec![E::zero(); cout * cin * k * k]).unwrap(),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).unwrap(),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Stride-1 convolution with "same" padding (k−1)/2.
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(&self.weight, &self.bias, 1, (self.kernel_size() - 1) / 2)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&key(prefix, "weight"), &self.weight);
        f(&key(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&key(prefix, "weight"), &mut self.weight);
        f(&key(prefix, "bias"), &mut self.bias);
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> Conv2dParams<F> {
        Conv2dParams { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

/// Per-channel PReLU slopes, initialized to 0.25.
#[derive(Debug, Clone)]
pub struct PreluParams<E: Element> {
    pub slope: Tensor<E>,
}

impl<E: Element> PreluParams<E> {
    pub fn init(channels: usize) -> Self {
        PreluParams {
            slope: Tensor::param(&[channels], vec![E::from_f64(0.25); channels]).unwrap(),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        PreluParams { slope: Tensor::param(&[channels], vec![E::zero(); channels]).unwrap() }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.prelu(&self.slope)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&key(prefix, "slope"), &self.slope);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&key(prefix, "slope"), &mut self.slope);
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> PreluParams<F> {
        PreluParams { slope: f(&self.slope) }
    }
}
