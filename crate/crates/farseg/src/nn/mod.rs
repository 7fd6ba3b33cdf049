//! The minimal neural-network substrate behind the segmentation model: NCHW
//! tensors on `ndarray`, GEMM-backed convolutions, batch norm, resampling,
//! and momentum SGD, each with a hand-written backward pass.
//!
//! Every kernel is deterministic: reductions run in a fixed order, so two
//! runs with the same seed produce bit-identical results on one machine.

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod param;
pub mod resize;
pub mod scalar;
pub mod sgd;

pub use conv::Conv2d;
pub use init::{mix_seed, InitRng};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use param::{
    count_trainable_elements, count_trainable_tensors, param_names, zero_grads, Param, ParamKind,
    ParamSet,
};
pub use scalar::{Dtype, Scalar};
pub use sgd::SgdMomentum;

use ndarray::Array4;

/// Convolution + batch norm + ReLU, the building block used by the backbone
/// stages, the projection heads, and the decoder's channel transforms.
/// The convolution carries no bias; batch norm's shift makes it redundant.
#[derive(Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct ConvBnReluCache<T> {
    pub bn: BnCache<T>,
    /// Post-activation output; doubles as the ReLU mask in backward, so the
    /// caller consumes it by reference rather than by value.
    pub y: Array4<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut InitRng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(c_in, c_out, kernel, stride, padding, false, init),
            bn: BatchNorm2d::new(c_out),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> ConvBnReluCache<T> {
        let z = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward_train(&z);
        ops::relu_inplace(&mut y);
        ConvBnReluCache { bn, y }
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let z = self.conv.forward(x);
        let mut y = self.bn.forward_eval(&z);
        ops::relu_inplace(&mut y);
        y
    }

    pub fn backward(
        &mut self,
        x: &Array4<T>,
        cache: &ConvBnReluCache<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let d_bn = ops::relu_backward(&cache.y, dy);
        let d_conv = self.bn.backward(&cache.bn, &d_bn);
        self.conv.backward(x, &d_conv, need_dx)
    }
}

impl<T: Scalar> ParamSet<T> for ConvBnRelu<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&param::join_path(prefix, "conv"), f);
        self.bn.visit_params(&param::join_path(prefix, "bn"), f);
    }
}
