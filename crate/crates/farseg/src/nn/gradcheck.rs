//! Central finite-difference gradient verification.
//!
//! Every hand-written backward pass in this crate is checked against this
//! module in `f64`, where the truncation error of the central difference
//! (O(h^2)) sits far above the rounding floor.

use ndarray::{ArrayD, IxDyn};

use super::scalar::Scalar;

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_grad<T: Scalar>(
    x: &ArrayD<T>,
    h: f64,
    mut f: impl FnMut(&ArrayD<T>) -> T,
) -> ArrayD<T> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let h_t = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    for idx in indices(x.shape()) {
        let orig = probe[IxDyn(&idx)];
        probe[IxDyn(&idx)] = orig + h_t;
        let fp = f(&probe);
        probe[IxDyn(&idx)] = orig - h_t;
        let fm = f(&probe);
        probe[IxDyn(&idx)] = orig;
        grad[IxDyn(&idx)] = (fp - fm) / two_h;
    }
    grad
}

/// Worst-case relative disagreement `|a - n| / max(floor, |a| + |n|)`.
pub fn max_rel_error<T: Scalar>(analytic: &ArrayD<T>, numeric: &ArrayD<T>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let a = a.to_f64();
        let n = n.to_f64();
        let denom = (a.abs() + n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &dim in shape {
        let mut next = Vec::with_capacity(out.len() * dim);
        for prefix in &out {
            for i in 0..dim {
                let mut idx = prefix.clone();
                idx.push(i);
                next.push(idx);
            }
        }
        out = next;
    }
    out
}
