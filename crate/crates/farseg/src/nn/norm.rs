//! Batch normalization over the (N, H, W) axes of NCHW tensors.

use ndarray::{Array1, Array4, Axis};

use super::init::{ones, zeros};
use super::param::{join_path, Param, ParamSet};
use super::scalar::Scalar;

#[derive(Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: T,
    pub momentum: T,
}

/// Values the backward pass needs from the forward pass.
pub struct BnCache<T> {
    pub x_hat: Array4<T>,
    pub inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::trainable(ones(&[channels])),
            beta: Param::trainable(zeros(&[channels])),
            running_mean: Param::buffer(zeros(&[channels])),
            running_var: Param::buffer(ones(&[channels])),
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward: normalizes by batch statistics and folds them
    /// into the running estimates (biased variance for normalization,
    /// unbiased for the running update).
    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let n = T::from_usize(b * h * w);

        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();

        let mut y = Array4::zeros((b, c, h, w));
        let mut x_hat = Array4::zeros((b, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let mut sum = T::zero();
            let mut sum_sq = T::zero();
            for &v in xc.iter() {
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(T::zero());
            let istd = T::one() / (var + self.eps).sqrt();
            inv_std[ci] = istd;

            let g = gamma[ci];
            let bta = beta[ci];
            let mut yc = y.index_axis_mut(Axis(1), ci);
            let mut hc = x_hat.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut yc)
                .and(&mut hc)
                .and(&xc)
                .for_each(|yv, hv, &xv| {
                    let xh = (xv - mean) * istd;
                    *hv = xh;
                    *yv = g * xh + bta;
                });

            let count = b * h * w;
            let unbiased = if count > 1 {
                var * T::from_usize(count) / T::from_usize(count - 1)
            } else {
                var
            };
            let m = self.momentum;
            let rm = &mut self.running_mean.value[[ci]];
            *rm = (T::one() - m) * *rm + m * mean;
            let rv = &mut self.running_var.value[[ci]];
            *rv = (T::one() - m) * *rv + m * unbiased;
        }
        (y, BnCache { x_hat, inv_std })
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let mut y = x.clone();
        for ci in 0..c {
            let mean = self.running_mean.value[[ci]];
            let istd = T::one() / (self.running_var.value[[ci]] + self.eps).sqrt();
            let g = self.gamma.value[[ci]];
            let bta = self.beta.value[[ci]];
            let scale = g * istd;
            let shift = bta - mean * scale;
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let n = T::from_usize(b * h * w);
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let hc = cache.x_hat.index_axis(Axis(1), ci);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            ndarray::Zip::from(&dyc).and(&hc).for_each(|&d, &xh| {
                s1 += d;
                s2 += d * xh;
            });
            self.beta.grad[[ci]] += s1;
            self.gamma.grad[[ci]] += s2;

            let g = self.gamma.value[[ci]];
            let istd = cache.inv_std[ci];
            let k = g * istd;
            let m1 = s1 / n;
            let m2 = s2 / n;
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&hc)
                .for_each(|dxv, &d, &xh| {
                    *dxv = k * (d - m1 - xh * m2);
                });
        }
        dx
    }
}

impl<T: Scalar> ParamSet<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_path(prefix, "gamma"), &mut self.gamma);
        f(&join_path(prefix, "beta"), &mut self.beta);
        f(&join_path(prefix, "running_mean"), &mut self.running_mean);
        f(&join_path(prefix, "running_var"), &mut self.running_var);
    }
}
