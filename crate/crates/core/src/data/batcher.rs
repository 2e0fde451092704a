use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Sample indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub epoch: usize,
    /// Position of this batch within its epoch.
    pub position: usize,
    pub indices: Vec<usize>,
    /// True for the final batch of an epoch.
    pub last_in_epoch: bool,
}

/// Endless stream of shuffled mini-batches. Each epoch is a fresh seeded
/// permutation; the final partial batch is kept.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    position: usize,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let mut b = Batcher {
            len,
            batch_size,
            rng: rng::seeded(seed),
            order: (0..len).collect(),
            cursor: 0,
            epoch: 0,
            position: 0,
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }
}

impl Iterator for Batcher {
    type Item = BatchIndices;

    fn next(&mut self) -> Option<BatchIndices> {
        let end = (self.cursor + self.batch_size).min(self.len);
        let indices = self.order[self.cursor..end].to_vec();
        let last_in_epoch = end == self.len;
        let item = BatchIndices {
            epoch: self.epoch,
            position: self.position,
            indices,
            last_in_epoch,
        };
        if last_in_epoch {
            self.epoch += 1;
            self.position = 0;
            self.cursor = 0;
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
        } else {
            self.cursor = end;
            self.position += 1;
        }
        Some(item)
    }
}
