//! Named trainable parameters and the SGD + momentum optimizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`]; ids are dense and follow creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    velocity: Tensor<S>,
    pub frozen: bool,
}

/// All parameters of a model, keyed by hierarchical dotted names
/// (`backbone.stage1.conv.weight`, `resblock.l2.branch3.deconv.weight`,
/// `head.unified.conv.bias`, ...).
///
/// Creation order is the canonical order: checkpoints, gradient merges,
/// and optimizer steps all walk parameters by ascending id, which keeps
/// every run of the same model bitwise reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate param name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            velocity,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar entries across all parameter tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Set `frozen` on every parameter whose name matches the predicate;
    /// returns how many matched. Frozen parameters are skipped entirely
    /// by [`sgd_step`](Self::sgd_step) (value, velocity, and grad buffers
    /// stay bitwise untouched).
    pub fn freeze_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = S::zero();
            }
        }
    }

    /// Accumulate a gradient map produced by a backward pass. Gradients
    /// add onto whatever is already stored; callers zero explicitly.
    pub fn accumulate(&mut self, grads: &GradMap<S>) -> Result<()> {
        if grads.slots.len() != self.params.len() {
            return Err(Error::contract(format!(
                "gradient map covers {} params, store holds {}",
                grads.slots.len(),
                self.params.len()
            )));
        }
        for (p, slot) in self.params.iter_mut().zip(grads.slots.iter()) {
            if let Some(g) = slot {
                if !g.same_shape(&p.value) {
                    return Err(Error::dim(format!(
                        "gradient shape {:?} does not match param {} {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// One SGD + momentum step over every unfrozen parameter:
    /// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`.
    pub fn sgd_step(&mut self, lr: S, momentum: S, weight_decay: S) {
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            let w = p.value.data_mut();
            let g = p.grad.data();
            let v = p.velocity.data_mut();
            for i in 0..w.len() {
                v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
                w[i] = w[i] - lr * v[i];
            }
        }
    }
}

/// Per-parameter gradients from one backward pass, aligned with a
/// store's ids. Merging maps in a fixed order keeps training
/// deterministic under data-parallel batch execution.
#[derive(Debug, Clone)]
pub struct GradMap<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn empty(n_params: usize) -> Self {
        GradMap {
            slots: vec![None; n_params],
        }
    }

    pub fn add_to_slot(&mut self, id: ParamId, grad: &Tensor<S>) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    /// Merge another map into this one (elementwise add, slot by slot).
    pub fn merge(&mut self, other: &GradMap<S>) {
        debug_assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(other.slots.iter()) {
            if let Some(g) = src {
                match dst {
                    Some(t) => t.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }
}
