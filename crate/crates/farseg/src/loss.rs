//! Foreground-aware optimization: per-pixel cross entropy reweighted by
//! normalized focal weights under an annealing schedule.
//!
//! The focal weight `(1 - p)^gamma` concentrates loss mass on hard examples
//! but shrinks the loss sum as the model improves, starving training of
//! gradient. A batch constant `Z = sum(w * l) / sum(l)` rescales the weights
//! so the weighted sum equals the plain cross-entropy sum: the distribution
//! of loss over pixels shifts toward hard (mostly foreground) examples while
//! the total stays put. Because the weights are only trustworthy once the
//! model has learned something, an annealing factor `zeta(t)` blends from
//! plain cross entropy (`zeta = 1`) into the normalized focal weighting
//! (`zeta = 0`) over the first `annealing_step` training steps:
//!
//! ```text
//! weight_i = (1/Z) w_i + zeta(t) * (1 - (1/Z) w_i),    w_i = (1 - p_i)^gamma
//! ```
//!
//! `Z` is treated as a constant in differentiation: it exists to renormalize
//! the loss distribution, and letting gradients flow through it would couple
//! every pixel's gradient to every other's.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Schedules for `zeta(t)`; all decay from 1 at `t = 0` to 0 at
/// `t = annealing_step` and stay clamped at 0 afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annealing {
    /// No annealing: the normalized focal weighting applies from step 0.
    None,
    Linear,
    Poly,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Focusing factor; 0 recovers plain cross entropy.
    pub gamma: f64,
    pub annealing: Annealing,
    pub annealing_step: usize,
    /// Exponent of the poly schedule.
    pub decay_factor: f64,
    /// Rescale focal weights so the loss sum matches plain cross entropy.
    pub normalize: bool,
    /// Label value excluded from the loss and from `Z`.
    pub ignore_label: Option<u8>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            annealing: Annealing::Cosine,
            annealing_step: 10_000,
            decay_factor: 0.9,
            normalize: true,
            ignore_label: Some(255),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focusing factor gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.annealing_step == 0 {
            return Err(Error::Config("annealing_step must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// `zeta(t)`: 1 at `t = 0`, monotone non-increasing, 0 for
/// `t >= annealing_step` (the linear/poly formulas would go negative and
/// cosine would rise again, so `t` is clamped).
pub fn annealing_factor(
    kind: Annealing,
    t: i64,
    annealing_step: usize,
    decay_factor: f64,
) -> Result<f64> {
    if t < 0 {
        return Err(Error::Config(format!("negative training step {t}")));
    }
    let frac = (t as f64 / annealing_step as f64).min(1.0);
    Ok(match kind {
        Annealing::None => 0.0,
        Annealing::Linear => 1.0 - frac,
        Annealing::Poly => (1.0 - frac).powf(decay_factor),
        Annealing::Cosine => 0.5 * (1.0 + (frac * std::f64::consts::PI).cos()),
    })
}

/// Per-pixel cross entropy and true-class probability.
///
/// Ignored pixels carry `l = 0`, `p_true = 1`, which removes them from every
/// downstream sum. Out-of-range labels are a validation error naming the
/// offending pixel.
pub fn per_pixel_ce<T: Scalar>(
    logits: &Array4<T>,
    labels: &Array3<u8>,
    ignore_label: Option<u8>,
) -> Result<(Array3<T>, Array3<T>)> {
    let (b, k, h, w) = logits.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dim(),
            logits.dim()
        )));
    }
    let mut ce = Array3::zeros((b, h, w));
    let mut p_true = Array3::zeros((b, h, w));
    let ls = logits.as_slice().expect("logits are standard layout");
    let plane = h * w;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let label = labels[[bi, y, x]];
                if Some(label) == ignore_label {
                    ce[[bi, y, x]] = T::zero();
                    p_true[[bi, y, x]] = T::one();
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::Data(format!(
                        "label {label} at (image {bi}, y {y}, x {x}) outside 0..{k} and not the ignore label"
                    )));
                }
                let base = bi * k * plane + y * w + x;
                let mut max = T::neg_infinity();
                for ki in 0..k {
                    max = max.max(ls[base + ki * plane]);
                }
                let mut sum = T::zero();
                for ki in 0..k {
                    sum += (ls[base + ki * plane] - max).exp();
                }
                let lse = max + sum.ln();
                let logit_true = ls[base + (label as usize) * plane];
                ce[[bi, y, x]] = lse - logit_true;
                p_true[[bi, y, x]] = (logit_true - lse).exp();
            }
        }
    }
    Ok((ce, p_true))
}

/// Hard-example weight `(1 - p)^gamma`.
pub fn focal_weight<T: Scalar>(p_true: &Array3<T>, gamma: f64) -> Array3<T> {
    let g = T::from_f64(gamma);
    p_true.mapv(|p| (T::one() - p).max(T::zero()).powf(g))
}

/// The normalization constant `Z = sum(w * l) / sum(l)`, computed over the
/// whole batch. Degenerate batches (`sum(l) < 1e-12`, i.e. perfect
/// prediction) fall back to `Z = 1`.
pub fn normalization_constant<T: Scalar>(weights: &Array3<T>, ce: &Array3<T>) -> T {
    let mut weighted = T::zero();
    let mut plain = T::zero();
    for (&w, &l) in weights.iter().zip(ce.iter()) {
        weighted += w * l;
        plain += l;
    }
    if plain < T::from_f64(1e-12) {
        T::one()
    } else {
        weighted / plain
    }
}

/// Everything the training loop logs about one loss evaluation.
pub struct LossBreakdown<T> {
    /// Mean of the weighted per-pixel losses over non-ignored pixels.
    pub total: T,
    /// Weighted loss per pixel (zero at ignored pixels).
    pub per_pixel: Array3<T>,
    /// Unweighted cross entropy per pixel.
    pub ce: Array3<T>,
    /// True-class probability per pixel.
    pub p_true: Array3<T>,
    /// The normalization constant actually applied (1 when `normalize` is
    /// off or the batch is degenerate).
    pub z_value: T,
    /// The annealing factor actually applied.
    pub zeta: f64,
    /// Number of non-ignored pixels.
    pub pixels: usize,
}

fn count_valid(labels: &Array3<u8>, ignore_label: Option<u8>) -> usize {
    match ignore_label {
        Some(ig) => labels.iter().filter(|&&l| l != ig).count(),
        None => labels.len(),
    }
}

/// Foreground-aware loss at training step `t`.
pub fn fa_loss<T: Scalar>(
    logits: &Array4<T>,
    labels: &Array3<u8>,
    cfg: &LossConfig,
    t: usize,
) -> Result<LossBreakdown<T>> {
    let (breakdown, _) = fa_loss_inner(logits, labels, cfg, t, false, None)?;
    Ok(breakdown)
}

/// Foreground-aware loss plus its gradient with respect to the logits
/// (`Z` held constant, mean reduction over non-ignored pixels).
pub fn fa_loss_with_grad<T: Scalar>(
    logits: &Array4<T>,
    labels: &Array3<u8>,
    cfg: &LossConfig,
    t: usize,
) -> Result<(LossBreakdown<T>, Array4<T>)> {
    let (breakdown, grad) = fa_loss_inner(logits, labels, cfg, t, true, None)?;
    Ok((breakdown, grad.expect("gradient requested")))
}

/// [`fa_loss`] with the normalization constant pinned externally. This is the
/// stop-gradient semantics made explicit for finite-difference verification:
/// perturbing the logits must not move `Z`.
pub fn fa_loss_frozen_z<T: Scalar>(
    logits: &Array4<T>,
    labels: &Array3<u8>,
    cfg: &LossConfig,
    t: usize,
    z: T,
) -> Result<LossBreakdown<T>> {
    let (breakdown, _) = fa_loss_inner(logits, labels, cfg, t, false, Some(z))?;
    Ok(breakdown)
}

fn fa_loss_inner<T: Scalar>(
    logits: &Array4<T>,
    labels: &Array3<u8>,
    cfg: &LossConfig,
    t: usize,
    with_grad: bool,
    z_override: Option<T>,
) -> Result<(LossBreakdown<T>, Option<Array4<T>>)> {
    cfg.validate()?;
    let valid = count_valid(labels, cfg.ignore_label);
    if valid == 0 {
        return Err(Error::Data(
            "every pixel in the batch carries the ignore label".into(),
        ));
    }
    let (ce, p_true) = per_pixel_ce(logits, labels, cfg.ignore_label)?;
    let weights = focal_weight(&p_true, cfg.gamma);
    let z = match z_override {
        Some(z) => z,
        None if cfg.normalize => normalization_constant(&weights, &ce),
        None => T::one(),
    };
    let zeta = annealing_factor(cfg.annealing, t as i64, cfg.annealing_step, cfg.decay_factor)?;
    let zeta_t = T::from_f64(zeta);
    let inv_z = T::one() / z;

    let (b, k, h, w) = logits.dim();
    let mut per_pixel = Array3::zeros((b, h, w));
    let mut total = T::zero();
    let n = T::from_usize(valid);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let l = ce[[bi, y, x]];
                let wgt = weights[[bi, y, x]];
                let aw = inv_z * wgt;
                let m = aw + zeta_t * (T::one() - aw);
                let wl = m * l;
                per_pixel[[bi, y, x]] = wl;
                total += wl;
            }
        }
    }
    // Ignored pixels contribute zero above because their ce is zero.
    total /= n;

    let grad = if with_grad {
        let mut grad = Array4::<T>::zeros((b, k, h, w));
        let gamma = T::from_f64(cfg.gamma);
        let one_minus_zeta = T::one() - zeta_t;
        let plane = h * w;
        let ls = logits.as_slice().unwrap();
        let gs = grad.as_slice_mut().unwrap();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let label = labels[[bi, y, x]];
                    if Some(label) == cfg.ignore_label {
                        continue;
                    }
                    let p = p_true[[bi, y, x]];
                    let l = ce[[bi, y, x]];
                    let wgt = weights[[bi, y, x]];
                    let aw = inv_z * wgt;
                    let m = aw + zeta_t * (T::one() - aw);
                    // d(m*l)/dp = m' * l - m / p, with
                    // m' = -(1 - zeta) * gamma * (1 - p)^(gamma - 1) / Z.
                    let q = T::one() - p;
                    let m_prime = if cfg.gamma == 0.0 || q < T::from_f64(1e-12) {
                        T::zero()
                    } else {
                        -one_minus_zeta * inv_z * gamma * q.powf(gamma - T::one())
                    };
                    // dp/dlogit_k = p * (delta_ky - s_k), so the factor
                    // multiplying (s_k - delta_ky) is (m - m' * l * p).
                    let scale = (m - m_prime * l * p) / n;

                    let base = bi * k * plane + y * w + x;
                    // recompute the softmax row from the stored p_true:
                    // s_k = exp(logit_k - lse); lse = logit_true - ln(p).
                    let lse = ls[base + (label as usize) * plane] - p.ln();
                    for ki in 0..k {
                        let s = (ls[base + ki * plane] - lse).exp();
                        let delta = if ki == label as usize { T::one() } else { T::zero() };
                        gs[base + ki * plane] = scale * (s - delta);
                    }
                }
            }
        }
        Some(grad)
    } else {
        None
    };

    Ok((
        LossBreakdown {
            total,
            per_pixel,
            ce,
            p_true,
            z_value: z,
            zeta,
            pixels: valid,
        },
        grad,
    ))
}
