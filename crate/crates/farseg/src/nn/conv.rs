//! 2-D convolution as im2col + GEMM, with a hand-written backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};

use super::init::{zeros, InitRng};
use super::param::{join_path, Param, ParamSet};
use super::scalar::Scalar;

#[derive(Debug)]
pub struct Conv2d<T> {
    /// Shape `[c_out, c_in, k, k]`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut InitRng,
    ) -> Self {
        let weight = Param::trainable(init.he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel));
        let bias = bias.then(|| Param::trainable(zeros(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (b, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "conv input channels");
        let (c_out, k) = (self.c_out(), self.kernel());
        let (oh, ow) = self.out_hw(h, w);
        let ckk = c_in * k * k;

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, ckk))
            .expect("conv weight is contiguous");

        let mut y = Array4::zeros((b, c_out, oh, ow));
        let mut col = Array2::zeros((ckk, oh * ow));
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut yb = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap();
            if self.is_pointwise() {
                let xb2 = xb.into_shape_with_order((c_in, h * w)).unwrap();
                general_mat_mul(T::one(), &w2, &xb2, T::zero(), &mut yb);
            } else {
                im2col(
                    xb.as_slice().expect("input is standard layout"),
                    c_in,
                    h,
                    w,
                    k,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                    col.as_slice_mut().unwrap(),
                );
                general_mat_mul(T::one(), &w2, &col, T::zero(), &mut yb);
            }
        }
        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for bi in 0..b {
                for c in 0..c_out {
                    let mut plane = y.slice_mut(ndarray::s![bi, c, .., ..]);
                    plane += bv[c];
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient
    /// unless `need_dx` is false (stem layers never propagate into pixels).
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (b, c_in, h, w) = x.dim();
        let (c_out, k) = (self.c_out(), self.kernel());
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.dim(), (b, c_out, oh, ow), "conv dy shape");
        let ckk = c_in * k * k;

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, ckk))
            .unwrap();
        let mut dw2 = Array2::<T>::zeros((c_out, ckk));
        let mut db = Array1::<T>::zeros(c_out);
        let mut dx = need_dx.then(|| Array4::<T>::zeros((b, c_in, h, w)));

        let mut col = Array2::zeros((ckk, oh * ow));
        let mut dcol = Array2::zeros((ckk, oh * ow));
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let dyb = dy
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap();
            if self.is_pointwise() {
                let xb2 = xb.into_shape_with_order((c_in, h * w)).unwrap();
                general_mat_mul(T::one(), &dyb, &xb2.t(), T::one(), &mut dw2);
                if let Some(dx) = dx.as_mut() {
                    let mut dxb = dx
                        .index_axis_mut(Axis(0), bi)
                        .into_shape_with_order((c_in, h * w))
                        .unwrap();
                    general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dxb);
                }
            } else {
                im2col(
                    xb.as_slice().unwrap(),
                    c_in,
                    h,
                    w,
                    k,
                    self.stride,
                    self.padding,
                    oh,
                    ow,
                    col.as_slice_mut().unwrap(),
                );
                general_mat_mul(T::one(), &dyb, &col.t(), T::one(), &mut dw2);
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dcol);
                    col2im_add(
                        dcol.as_slice().unwrap(),
                        c_in,
                        h,
                        w,
                        k,
                        self.stride,
                        self.padding,
                        oh,
                        ow,
                        dx.index_axis_mut(Axis(0), bi).as_slice_mut().unwrap(),
                    );
                }
            }
            for c in 0..c_out {
                db[c] += dyb.row(c).sum();
            }
        }

        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c_out, ckk))
                .unwrap();
            wg += &dw2;
        }
        if let Some(bias) = &mut self.bias {
            let mut bg = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &db;
        }
        dx
    }
}

impl<T: Scalar> ParamSet<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_path(prefix, "weight"), &mut self.weight);
        if let Some(bias) = self.bias.as_mut() {
            f(&join_path(prefix, "bias"), bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayD};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    /// Direct sliding-window convolution, the independent reference for the
    /// im2col/GEMM path.
    fn conv_naive(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (b, c_in, h, w) = x.dim();
        let (c_out, k, s, p) = (conv.c_out(), conv.kernel(), conv.stride, conv.padding);
        let (oh, ow) = conv.out_hw(h, w);
        let mut y = Array4::zeros((b, c_out, oh, ow));
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bp| bp.value[[co]]);
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * conv.weight.value[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (3usize, 5usize, 3usize, 1usize, 1usize, true),
            (4, 2, 3, 2, 1, false),
            (2, 3, 1, 1, 0, true),
            (3, 4, 7, 2, 3, false),
        ];
        for (c_in, c_out, k, s, p, bias) in cases {
            let mut init = InitRng::new(5);
            let mut conv = Conv2d::<f64>::new(c_in, c_out, k, s, p, bias, &mut init);
            if let Some(b) = conv.bias.as_mut() {
                b.value = ArrayD::from_shape_simple_fn(
                    ndarray::IxDyn(&[c_out]),
                    || rng.random_range(-0.5..0.5),
                );
            }
            let x = random4(&mut rng, (2, c_in, 9, 11));
            let got = conv.forward(&x);
            let want = conv_naive(&x, &conv);
            let diff = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "k={k} s={s} p={p}: max diff {diff}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::nn::gradcheck::{max_rel_error, numeric_grad};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3usize, 1usize, 1usize), (1, 1, 0), (3, 2, 1)] {
            let mut init = InitRng::new(9);
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, true, &mut init);
            let x = random4(&mut rng, (2, 2, 5, 6));
            let (oh, ow) = conv.out_hw(5, 6);
            let proj = random4(&mut rng, (2, 3, oh, ow));

            let loss = |conv: &Conv2d<f64>, x: &Array4<f64>| (&conv.forward(x) * &proj).sum();

            zero_all(&mut conv);
            let dx = conv.backward(&x, &proj, true).unwrap();

            // input gradient
            let num_dx = numeric_grad(&x.clone().into_dyn(), 1e-5, |xd| {
                let x4 = xd.clone().into_dimensionality().unwrap();
                loss(&conv, &x4)
            });
            let err = max_rel_error(&dx.into_dyn(), &num_dx, 1e-8);
            assert!(err < 1e-6, "dx err {err} (k={k} s={s} p={p})");

            // weight gradient
            let w0 = conv.weight.value.clone();
            let num_dw = numeric_grad(&w0, 1e-5, |wd| {
                conv.weight.value = wd.clone();
                let l = loss(&conv, &x);
                l
            });
            conv.weight.value = w0;
            let err = max_rel_error(&conv.weight.grad, &num_dw, 1e-8);
            assert!(err < 1e-6, "dw err {err} (k={k} s={s} p={p})");

            // bias gradient
            let b0 = conv.bias.as_ref().unwrap().value.clone();
            let num_db = numeric_grad(&b0, 1e-5, |bd| {
                conv.bias.as_mut().unwrap().value = bd.clone();
                loss(&conv, &x)
            });
            conv.bias.as_mut().unwrap().value = b0;
            let err = max_rel_error(&conv.bias.as_ref().unwrap().grad, &num_db, 1e-8);
            assert!(err < 1e-6, "db err {err} (k={k} s={s} p={p})");
        }
    }

    fn zero_all(conv: &mut Conv2d<f64>) {
        conv.visit_params("", &mut |_, p| p.zero_grad());
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    xs: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let zero = T::zero();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let rbase = row * oh * ow;
                for oy in 0..oh {
                    let obase = rbase + oy * ow;
                    let iy = (oy * stride + ky).wrapping_sub(padding);
                    if iy >= h {
                        col[obase..obase + ow].fill(zero);
                        continue;
                    }
                    let xbase = (c * h + iy) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx).wrapping_sub(padding);
                        col[obase + ox] = if ix < w { xs[xbase + ix] } else { zero };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dcol: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let rbase = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky).wrapping_sub(padding);
                    if iy >= h {
                        continue;
                    }
                    let obase = rbase + oy * ow;
                    let xbase = (c * h + iy) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx).wrapping_sub(padding);
                        if ix < w {
                            dx[xbase + ix] += dcol[obase + ox];
                        }
                    }
                }
            }
        }
    }
}
