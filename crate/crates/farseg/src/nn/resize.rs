//! Spatial resampling: nearest-neighbor doubling and bilinear resizing.
//!
//! Bilinear interpolation uses the half-pixel (non-corner-aligned) coordinate
//! convention everywhere: `src = (dst + 0.5) * in/out - 0.5`, clamped to the
//! valid range. One convention throughout keeps results bit-reproducible
//! across the decoder, the final upsampling stage, and heatmap export.

use ndarray::Array4;

use super::scalar::Scalar;

pub fn upsample_nearest_x2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * 4 * h * w;
        for iy in 0..h {
            let row = &xs[ibase + iy * w..ibase + (iy + 1) * w];
            for dy in 0..2 {
                let orow = obase + (2 * iy + dy) * 2 * w;
                for (ix, &v) in row.iter().enumerate() {
                    ys[orow + 2 * ix] = v;
                    ys[orow + 2 * ix + 1] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_x2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, oh, ow) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * oh * ow;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = T::zero();
                for sub_y in 0..2 {
                    let orow = obase + (2 * iy + sub_y) * ow + 2 * ix;
                    acc += dys[orow] + dys[orow + 1];
                }
                dxs[ibase + iy * w + ix] += acc;
            }
        }
    }
    dx
}

/// Per-axis interpolation taps: output index -> (lo, hi, weight_hi).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let t = (src - lo as f64).clamp(0.0, 1.0);
            (lo, hi, t)
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ytaps = bilinear_taps(h, out_h);
    let xtaps = bilinear_taps(w, out_w);
    let mut y = Array4::zeros((b, c, out_h, out_w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * out_h * out_w;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            let ty = T::from_f64(ty);
            let row0 = ibase + y0 * w;
            let row1 = ibase + y1 * w;
            let orow = obase + oy * out_w;
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let tx = T::from_f64(tx);
                let top = xs[row0 + x0] + tx * (xs[row0 + x1] - xs[row0 + x0]);
                let bot = xs[row1 + x0] + tx * (xs[row1 + x1] - xs[row1 + x0]);
                ys[orow + ox] = top + ty * (bot - top);
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: scatters each output gradient back onto
/// the four source taps with the same weights.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Array4<T>, in_h: usize, in_w: usize) -> Array4<T> {
    let (b, c, oh, ow) = dy.dim();
    if (in_h, in_w) == (oh, ow) {
        return dy.clone();
    }
    let ytaps = bilinear_taps(in_h, oh);
    let xtaps = bilinear_taps(in_w, ow);
    let mut dx = Array4::zeros((b, c, in_h, in_w));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let obase = bc * oh * ow;
        let ibase = bc * in_h * in_w;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            let ty = T::from_f64(ty);
            let orow = obase + oy * ow;
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let tx = T::from_f64(tx);
                let g = dys[orow + ox];
                let one = T::one();
                dxs[ibase + y0 * in_w + x0] += g * (one - ty) * (one - tx);
                dxs[ibase + y0 * in_w + x1] += g * (one - ty) * tx;
                dxs[ibase + y1 * in_w + x0] += g * ty * (one - tx);
                dxs[ibase + y1 * in_w + x1] += g * ty * tx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nearest_x2_repeats_pixels() {
        let x = array![[[[1.0f32, 2.0], [3.0, 4.0]]]];
        let y = upsample_nearest_x2(&x);
        assert_eq!(
            y,
            array![[[
                [1.0, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
                [3.0, 3.0, 4.0, 4.0],
                [3.0, 3.0, 4.0, 4.0]
            ]]]
        );
    }

    #[test]
    fn bilinear_preserves_constant_fields() {
        let x = Array4::<f64>::from_elem((1, 2, 3, 5), 7.25);
        let y = resize_bilinear(&x, 9, 13);
        for &v in y.iter() {
            assert!((v - 7.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_x2_interpolates_midpoints() {
        // 1-D ramp along x; half-pixel convention puts interior outputs at
        // quarter offsets between samples.
        let x = array![[[[0.0f64, 1.0]]]];
        let y = resize_bilinear(&x, 1, 4);
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (v, e) in y.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }
}
