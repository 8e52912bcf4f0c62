//! Network building blocks: stem, residual blocks, resamplers, skip fusion.

pub mod attention;
pub mod block;
pub mod resample;
pub mod skip;

use std::cell::RefCell;
use std::rc::Rc;

use crate::dtype::Scalar;
use crate::error::Result;
use crate::init::Initializer;
use crate::ops::{self, BatchNorm2dParams, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use attention::AttentionCore;
pub use block::{GlobalLocalBlock, LocalBlock, Stem};
pub use resample::{Head, Resample};
pub use skip::SkipFusion;

/// Ordered view of a module tree: trainable tensors plus the running-stat
/// buffers that ride along in checkpoints.
#[derive(Default)]
pub struct ParamSet<T: Scalar> {
    pub params: Vec<(String, Tensor<T>)>,
    pub buffers: Vec<(String, Rc<RefCell<Vec<T>>>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.params.push((name.into(), t.clone()));
    }

    pub fn buffer(&mut self, name: impl Into<String>, b: &Rc<RefCell<Vec<T>>>) {
        self.buffers.push((name.into(), Rc::clone(b)));
    }

    pub fn total_param_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Convolution weights with optional bias and fixed geometry.
pub struct ConvParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl<T: Scalar> ConvParams<T> {
    pub fn dense(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        ConvParams {
            w: init.kaiming_conv(&[cout, cin, k, k]),
            b: bias.then(|| init.zeros(&[cout])),
            stride,
            pad,
            depthwise: false,
        }
    }

    pub fn depthwise(init: &mut Initializer, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvParams {
            w: init.kaiming_conv(&[c, 1, k, k]),
            b: None,
            stride,
            pad,
            depthwise: true,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.depthwise {
            ops::depthwise_conv2d(tape, x, &self.w, self.b.as_ref(), self.stride, self.pad)
        } else {
            ops::conv2d(tape, x, &self.w, self.b.as_ref(), self.stride, self.pad)
        }
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        set.param(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            set.param(format!("{prefix}.b"), b);
        }
    }
}

/// conv → batch norm, with an optional GELU on top.
pub struct ConvNorm<T: Scalar> {
    pub conv: ConvParams<T>,
    pub norm: BatchNorm2dParams<T>,
}

impl<T: Scalar> ConvNorm<T> {
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(tape, x)?;
        ops::batchnorm2d(tape, &y, &self.norm, mode)
    }

    pub fn forward_act(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(ops::gelu(tape, &self.forward(tape, x, mode)?))
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        self.conv.collect(&format!("{prefix}.conv"), set);
        collect_bn(&format!("{prefix}.norm"), &self.norm, set);
    }
}

pub fn collect_bn<T: Scalar>(prefix: &str, bn: &BatchNorm2dParams<T>, set: &mut ParamSet<T>) {
    set.param(format!("{prefix}.gamma"), &bn.gamma);
    set.param(format!("{prefix}.beta"), &bn.beta);
    set.buffer(format!("{prefix}.running_mean"), &bn.running_mean);
    set.buffer(format!("{prefix}.running_var"), &bn.running_var);
}

/// Layer-scale vectors start near zero so fresh residual branches are
/// near-identity.
pub const LAYER_SCALE_INIT: f64 = 1e-5;
