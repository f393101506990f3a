use crate::error::{dim_err, param_err, Result};
use crate::tensor::{l2_normalize, Tensor};

/// Production queue size used with full-scale training.
pub const PRODUCTION_QUEUE_CAPACITY: usize = 65_536;
/// Default queue size for desk-scale runs.
pub const DESK_QUEUE_CAPACITY: usize = 512;

/// Fixed-capacity FIFO ring of unit-norm feature vectors.
///
/// Single writer; readers see a consistent snapshot through `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    slots: Vec<Vec<f64>>,
    /// Next slot to overwrite once the ring is full.
    cursor: usize,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return param_err(format!("queue capacity {capacity} and dim {dim} must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            slots: Vec::with_capacity(capacity.min(4096)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// L2-normalize `feature` and enqueue it, evicting the oldest entry when full.
    pub fn push(&mut self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return dim_err(format!(
                "queue holds {}-dim features, got {}",
                self.dim,
                feature.len()
            ));
        }
        let unit = l2_normalize(feature)?;
        if self.slots.len() < self.capacity {
            self.slots.push(unit);
        } else {
            self.slots[self.cursor] = unit;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Enqueue every row of an `N × d` tensor in order.
    pub fn push_rows(&mut self, features: &Tensor) -> Result<()> {
        for row in features.rows() {
            self.push(row)?;
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let split = if self.slots.len() < self.capacity { 0 } else { self.cursor };
        self.slots[split..]
            .iter()
            .chain(&self.slots[..split])
            .map(Vec::as_slice)
    }
}
