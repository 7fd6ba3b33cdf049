//! Elementwise activations and max pooling.

use ndarray::{Array4, Zip};

use super::scalar::Scalar;

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Masks the upstream gradient by the post-activation output: positions where
/// the output is zero were clamped (or exactly zero, where the subgradient 0
/// is as good as any).
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn sigmoid<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| T::one() / (T::one() + (-v).exp()))
}

/// d/dx sigmoid in terms of the output: y (1 - y).
pub fn sigmoid_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * yv * (T::one() - yv);
    });
    dx
}

/// 3x3 stride-2 max pooling with padding 1 (the classic ResNet stem pool).
/// Returns the pooled map and the flat argmax index per output cell for the
/// backward scatter.
pub fn max_pool_3x3_s2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Array4<u32>) {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut y = Array4::zeros((b, c, oh, ow));
    let mut arg = Array4::<u32>::zeros((b, c, oh, ow));
    let xs = x.as_slice().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for ky in 0..3usize {
                        let iy = (oy * 2 + ky).wrapping_sub(1);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * 2 + kx).wrapping_sub(1);
                            if ix >= w {
                                continue;
                            }
                            let v = xs[base + iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    arg[[bi, ci, oy, ox]] = best_idx;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_3x3_s2_backward<T: Scalar>(
    arg: &Array4<u32>,
    dy: &Array4<T>,
    in_hw: (usize, usize),
) -> Array4<T> {
    let (b, c, oh, ow) = dy.dim();
    let (h, w) = in_hw;
    let mut dx = Array4::zeros((b, c, h, w));
    {
        let dxs = dx.as_slice_mut().unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = arg[[bi, ci, oy, ox]] as usize;
                        dxs[base + idx] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
    }
    dx
}
