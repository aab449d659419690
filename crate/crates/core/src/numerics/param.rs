use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable parameter slot.
///
/// Cloning a [`Param`] keeps its id, so a cloned model is a snapshot of the
/// same slots rather than a new set of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Models expose their parameters in a fixed declaration order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flat copy of every parameter value in declaration order.
    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }
}

/// Gradients keyed by parameter id, as returned by the tape's backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub(crate) params: HashMap<ParamId, Tensor>,
    pub(crate) leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite) && self.leaves.values().all(Tensor::all_finite)
    }

    /// Flat gradient for `model` in declaration order; unused slots are zero.
    pub fn flat_for<M: Parameterized + ?Sized>(&self, model: &M) -> Vec<f64> {
        let mut out = Vec::new();
        for p in model.params() {
            match self.params.get(&p.id()) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }
}
