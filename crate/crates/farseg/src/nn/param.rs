//! Learnable tensors and parameter traversal.

use ndarray::ArrayD;

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and is updated by the optimizer.
    Trainable,
    /// State carried by a layer (batch-norm running statistics). Saved in
    /// checkpoints, never touched by the optimizer.
    Buffer,
}

/// A named-by-position tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            kind: ParamKind::Trainable,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            kind: ParamKind::Buffer,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Stable-order traversal of a module tree's parameters.
///
/// The visit order defines the pairing between parameters and optimizer
/// state and the layout of checkpoints, so implementations must keep it
/// fixed for a given architecture configuration.
pub trait ParamSet<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn zero_grads<T: Scalar>(set: &mut dyn ParamSet<T>) {
    set.visit_params("", &mut |_, p| p.zero_grad());
}

/// Number of trainable tensors (not elements) in a module tree.
pub fn count_trainable_tensors<T: Scalar>(set: &mut dyn ParamSet<T>) -> usize {
    let mut n = 0;
    set.visit_params("", &mut |_, p| {
        if p.kind == ParamKind::Trainable {
            n += 1;
        }
    });
    n
}

/// Number of trainable scalar elements in a module tree.
pub fn count_trainable_elements<T: Scalar>(set: &mut dyn ParamSet<T>) -> usize {
    let mut n = 0;
    set.visit_params("", &mut |_, p| {
        if p.kind == ParamKind::Trainable {
            n += p.len();
        }
    });
    n
}

/// Dotted parameter paths in visit order, trainable and buffers alike.
pub fn param_names<T: Scalar>(set: &mut dyn ParamSet<T>) -> Vec<String> {
    let mut names = Vec::new();
    set.visit_params("", &mut |name, _| names.push(name.to_owned()));
    names
}

/// Joins a visit prefix with a component name.
pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}
