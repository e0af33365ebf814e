//! Named-tensor access for checkpoints, the optimizer and momentum updates.

use crate::real::Real;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use std::collections::HashMap;

/// A module whose tensors can be enumerated by stable names.
///
/// The visitation order is fixed by construction and identical between
/// `visit` and `visit_mut`. Running statistics of normalization layers are
/// visited with `trainable = false`; they are checkpointed and blended by the
/// momentum update but never receive gradients.
pub trait ParamModule<R: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool));
}

/// Gradients accumulated by tensor name, in first-touch order.
#[derive(Debug, Clone)]
pub struct GradStore<R: Real> {
    entries: Vec<(String, ArrayD<R>)>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for GradStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> GradStore<R> {
    pub fn new() -> Self {
        GradStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Add a gradient contribution, summing with any existing entry.
    pub fn accumulate(&mut self, name: &str, grad: ArrayD<R>) {
        match self.index.get(name) {
            Some(&i) => {
                let existing = &mut self.entries[i].1;
                debug_assert_eq!(existing.shape(), grad.shape(), "gradient shape for {name}");
                *existing += &grad;
            }
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), grad));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<R>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<R>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    /// Scale every gradient, e.g. for batch averaging.
    pub fn scale(&mut self, factor: R) {
        for (_, g) in &mut self.entries {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Merge another store into this one.
    pub fn merge(&mut self, other: GradStore<R>) {
        for (name, grad) in other.entries {
            self.accumulate(&name, grad);
        }
    }
}

/// Collect `(name, shape, trainable)` for every tensor of a module.
pub fn tensor_catalog<R: Real>(module: &dyn ParamModule<R>) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, view, trainable| {
        out.push((name.to_string(), view.shape().to_vec(), trainable));
    });
    out
}
