//! Fixed-capacity FIFO memory bank of key embeddings.

use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2};
use std::collections::VecDeque;

/// Oldest-first queue of unit-norm embeddings serving as negatives.
#[derive(Debug, Clone)]
pub struct MemoryBank<R: Real> {
    capacity: usize,
    dim: usize,
    queue: VecDeque<Array1<R>>,
    total_enqueued: usize,
}

impl<R: Real> MemoryBank<R> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        MemoryBank {
            capacity,
            dim,
            queue: VecDeque::with_capacity(capacity),
            total_enqueued: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() == self.capacity
    }

    pub fn total_enqueued(&self) -> usize {
        self.total_enqueued
    }

    /// Push one embedding, evicting the oldest when full.
    pub fn enqueue(&mut self, z: Array1<R>) {
        debug_assert_eq!(z.len(), self.dim);
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(z);
        self.total_enqueued += 1;
    }

    /// Push each row of a batch in order.
    pub fn enqueue_batch(&mut self, z: &Array2<R>) {
        for row in z.rows() {
            self.enqueue(row.to_owned());
        }
    }

    /// Stored embeddings as a (len, dim) matrix, oldest first.
    pub fn as_matrix(&self) -> Result<Array2<R>> {
        if self.queue.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut out = Array2::<R>::zeros((self.queue.len(), self.dim));
        for (i, row) in self.queue.iter().enumerate() {
            out.row_mut(i).assign(row);
        }
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array1<R>> {
        self.queue.iter()
    }
}
