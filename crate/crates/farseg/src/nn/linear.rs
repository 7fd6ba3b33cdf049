//! Fully-connected layer on `[batch, features]` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

use super::init::{zeros, InitRng};
use super::param::{join_path, Param, ParamSet};
use super::scalar::Scalar;

#[derive(Debug)]
pub struct Linear<T> {
    /// Shape `[out, in]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, init: &mut InitRng) -> Self {
        Linear {
            weight: Param::trainable(init.he_normal(&[out_features, in_features], in_features)),
            bias: Param::trainable(zeros(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let (b, fin) = x.dim();
        assert_eq!(fin, self.in_features(), "linear input features");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = Array2::zeros((b, self.out_features()));
        general_mat_mul(T::one(), x, &w.t(), T::zero(), &mut y);
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        y += &bias;
        y
    }

    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut wg);
        }
        {
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &dy.sum_axis(ndarray::Axis(0));
        }
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(T::one(), dy, &w, T::zero(), &mut dx);
        dx
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        f(&join_path(prefix, "bias"), &mut self.bias);
    }
}
