use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Named, flat-addressable trainable tensors.
pub trait ParamSet<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, v| v.fill(T::zero()));
    }
}

/// One convolutional (or dense) layer: weight, bias and optional affine
/// normalization parameters (empty when the layer is not normalized).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn init<R: Rng + ?Sized>(weight_len: usize, bias_len: usize, norm_channels: usize, rng: &mut R) -> Self {
        LayerParams {
            weight: gaussian(weight_len, rng),
            bias: vec![T::zero(); bias_len],
            gamma: vec![T::one(); norm_channels],
            beta: vec![T::zero(); norm_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            gamma: vec![T::zero(); self.gamma.len()],
            beta: vec![T::zero(); self.beta.len()],
        }
    }

    pub fn is_normalized(&self) -> bool {
        !self.gamma.is_empty()
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
        if self.is_normalized() {
            f(&format!("{prefix}.gamma"), &self.gamma);
            f(&format!("{prefix}.beta"), &self.beta);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
        if self.is_normalized() {
            f(&format!("{prefix}.gamma"), &mut self.gamma);
            f(&format!("{prefix}.beta"), &mut self.beta);
        }
    }
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..len).map(|_| T::lit(normal.sample(rng))).collect()
}
