//! SGD with momentum and decoupled-from-nothing classic L2 weight decay,
//! matching the usual framework semantics: `g += wd * w; v = mu * v + g;
//! w -= lr * v`.

use ndarray::ArrayD;

use super::param::{ParamKind, ParamSet};
use super::scalar::Scalar;

pub struct SgdMomentum<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocities: Vec<ArrayD<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocities: Vec::new(),
        }
    }

    /// One update over every trainable parameter, in visit order. Velocity
    /// buffers are allocated on the first call and paired with parameters by
    /// that order thereafter.
    pub fn step(&mut self, params: &mut dyn ParamSet<T>, lr: T) {
        let mu = self.momentum;
        let wd = self.weight_decay;
        let first = self.velocities.is_empty();
        if first {
            params.visit_params("", &mut |_, p| {
                if p.kind == ParamKind::Trainable {
                    self.velocities.push(ArrayD::zeros(p.value.raw_dim()));
                }
            });
        }
        let mut idx = 0usize;
        let velocities = &mut self.velocities;
        params.visit_params("", &mut |name, p| {
            if p.kind != ParamKind::Trainable {
                return;
            }
            let v = &mut velocities[idx];
            assert_eq!(
                v.raw_dim(),
                p.value.raw_dim(),
                "optimizer state desync at {name}"
            );
            ndarray::Zip::from(v.view_mut())
                .and(&p.value)
                .and(&p.grad)
                .for_each(|vv, &w, &g| {
                    *vv = mu * *vv + g + wd * w;
                });
            ndarray::Zip::from(&mut p.value).and(&*v).for_each(|w, &vv| {
                *w -= lr * vv;
            });
            idx += 1;
        });
        assert_eq!(idx, velocities.len(), "optimizer state desync");
    }

    /// Momentum buffers in parameter visit order (trainable only).
    pub fn state(&self) -> &[ArrayD<T>] {
        &self.velocities
    }

    pub fn load_state(&mut self, state: Vec<ArrayD<T>>) {
        self.velocities = state;
    }
}
