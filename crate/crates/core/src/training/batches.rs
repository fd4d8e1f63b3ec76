//! Seeded batch index streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless sampler over `0..n` that reshuffles after every full pass.
#[derive(Clone, Debug)]
pub struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclingSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::data("cannot sample batches from an empty pool"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng })
    }

    pub fn pool_size(&self) -> usize {
        self.order.len()
    }

    pub fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One optimizer step's worth of instance indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Paired labeled/unlabeled batches. An epoch is one pass over the
/// unlabeled pool; the labeled pool cycles underneath it.
#[derive(Clone, Debug)]
pub struct DualBatchStream {
    labeled: CyclingSampler,
    unlabeled: CyclingSampler,
    batch_size: usize,
}

fn check_batch(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    Ok(())
}

/// Steps in one pass over `n` instances.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

pub fn dual_batch_stream(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    seed: u64,
) -> Result<DualBatchStream> {
    check_batch(batch_size)?;
    Ok(DualBatchStream {
        labeled: CyclingSampler::new(n_labeled, seed ^ 0x5EED_0001)?,
        unlabeled: CyclingSampler::new(n_unlabeled, seed ^ 0x5EED_0002)?,
        batch_size,
    })
}

impl DualBatchStream {
    pub fn next_batch(&mut self) -> DualBatch {
        DualBatch {
            labeled: self.labeled.take(self.batch_size),
            unlabeled: self.unlabeled.take(self.batch_size),
        }
    }

    pub fn epoch(&mut self) -> Vec<DualBatch> {
        let steps = steps_per_epoch(self.unlabeled.pool_size(), self.batch_size);
        (0..steps).map(|_| self.next_batch()).collect()
    }
}

/// Batches over a single pool; an epoch is one pass over it.
#[derive(Clone, Debug)]
pub struct SingleBatchStream {
    sampler: CyclingSampler,
    batch_size: usize,
}

pub fn single_batch_stream(n: usize, batch_size: usize, seed: u64) -> Result<SingleBatchStream> {
    check_batch(batch_size)?;
    Ok(SingleBatchStream {
        sampler: CyclingSampler::new(n, seed ^ 0x5EED_0003)?,
        batch_size,
    })
}

impl SingleBatchStream {
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let steps = steps_per_epoch(self.sampler.pool_size(), self.batch_size);
        (0..steps).map(|_| self.sampler.take(self.batch_size)).collect()
    }
}
