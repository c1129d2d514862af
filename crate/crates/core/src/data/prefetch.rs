//! Batch sampling and an ordered multi-worker prefetch queue.
//!
//! Every batch is a pure function of `(seed, iteration)`, so the sequence
//! consumed by training does not depend on how many workers produce it.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{sample_patch, AugmentSpec};
use super::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub iteration: u64,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub pairs: Arc<Vec<ImagePair>>,
    pub spec: AugmentSpec,
    pub batch_size: usize,
}

impl BatchSampler {
    pub fn new(pairs: Arc<Vec<ImagePair>>, spec: AugmentSpec, batch_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no pairs to sample from".into()));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        spec.validate()?;
        Ok(BatchSampler {
            pairs,
            spec,
            batch_size,
        })
    }

    pub fn sample(&self, iteration: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(iteration);
        let s = self.spec.crop_size;
        let shape = Shape::new(self.batch_size, 3, s, s);
        let mut input = Vec::with_capacity(shape.numel());
        let mut target = Vec::with_capacity(shape.numel());
        let mut ids = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let pair = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let (a, b) = sample_patch(pair, &self.spec, &mut rng)?;
            input.extend_from_slice(a.to_tensor().data());
            target.extend_from_slice(b.to_tensor().data());
            ids.push(pair.id.clone());
        }
        Ok(Batch {
            iteration,
            input: Tensor::from_vec(shape, input)?,
            target: Tensor::from_vec(shape, target)?,
            ids,
        })
    }
}

/// Produces batches for iterations `start..end` in order. Worker `k` handles
/// iterations `start + k, start + k + workers, ...` and the consumer reads the
/// queues round-robin. With zero workers batches are sampled inline.
pub struct Prefetcher {
    sampler: BatchSampler,
    start: u64,
    next: u64,
    end: u64,
    queues: Vec<Receiver<Result<Batch>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(sampler: BatchSampler, start: u64, end: u64, workers: usize, depth: usize) -> Self {
        let mut queues = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for k in 0..workers as u64 {
            let (tx, rx) = sync_channel(depth.max(1));
            let sampler = sampler.clone();
            let step = workers as u64;
            handles.push(std::thread::spawn(move || {
                let mut it = start + k;
                while it < end {
                    if tx.send(sampler.sample(it)).is_err() {
                        return;
                    }
                    it += step;
                }
            }));
            queues.push(rx);
        }
        Prefetcher {
            sampler,
            start,
            next: start,
            end,
            queues,
            handles,
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        if self.next >= self.end {
            return None;
        }
        let it = self.next;
        self.next += 1;
        if self.queues.is_empty() {
            return Some(self.sampler.sample(it));
        }
        let k = ((it - self.start) % self.queues.len() as u64) as usize;
        Some(
            self.queues[k]
                .recv()
                .unwrap_or_else(|_| Err(Error::contract("prefetch worker stopped unexpectedly"))),
        )
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.queues.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
