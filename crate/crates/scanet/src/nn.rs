//! Layer-level building blocks: convolution layers with seedable
//! Kaiming-uniform init, resampling blocks, and parameter traversal used by
//! the optimizer, checkpointing, and the gradient audits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Structural traversal over named parameters. Visit order is fixed by
/// construction; consumers that need canonical order sort by name.
pub trait ParamSet<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub fn collect_params<T: Scalar, M: ParamSet<T>>(m: &mut M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn zero_grads<T: Scalar, M: ParamSet<T>>(m: &mut M) {
    m.visit_params("", &mut |_, t| t.zero_grad());
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-uniform fan-in weights, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let fan_in = (in_channels / groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let wshape = Shape::new(out_channels, in_channels / groups, kernel, kernel);
        let data: Vec<T> = (0..wshape.numel())
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Conv2d {
            weight: Tensor::param(wshape, data),
            bias: Tensor::param(
                Shape::new(1, out_channels, 1, 1),
                vec![T::zero(); out_channels],
            ),
            stride,
            padding,
            groups,
        }
    }

    /// Kaiming init with weights shrunk by `gain`. Convs that feed residual
    /// additions use gain < 1 so stacked blocks keep activations near the
    /// input scale at init instead of compounding per block.
    pub fn new_scaled(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Self::new(in_channels, out_channels, kernel, stride, padding, groups, rng);
        let data: Vec<T> = conv
            .weight
            .data()
            .iter()
            .map(|&v| v * T::from_f64(gain))
            .collect();
        Conv2d { weight: Tensor::param(conv.weight.shape(), data), ..conv }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(
            x,
            &self.weight,
            Some(&self.bias),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

impl<T: Scalar> ParamSet<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Stride-2 3×3 convolution; halves H and W.
pub struct Downsample<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Downsample { conv: Conv2d::new(in_channels, out_channels, 3, 2, 1, 1, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(crate::Error::InvalidInput(format!(
                "downsample requires even spatial dims, got {s}"
            )));
        }
        self.conv.forward(x)
    }
}

impl<T: Scalar> ParamSet<T> for Downsample<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
    }
}

/// Nearest-neighbor 2× followed by a 3×3 convolution.
pub struct Upsample<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Upsample<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Upsample { conv: Conv2d::new(in_channels, out_channels, 3, 1, 1, 1, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&ops::upsample2x_nearest(x))
    }
}

impl<T: Scalar> ParamSet<T> for Upsample<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
    }
}
