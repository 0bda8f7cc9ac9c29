//! Explicit, seedable random streams.
//!
//! Every consumer of randomness receives an [`Rng`] handle; there is no
//! global generator. Independent purposes (weight init, mask init,
//! shuffling, mask sampling) use separate streams derived from one seed so
//! that turning one consumer off does not shift the draws of another.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named stream identifiers used by the trainer and generators.
pub mod streams {
    pub const NET_INIT: u64 = 1;
    pub const MASK_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MASK_SAMPLE: u64 = 4;
    pub const DATA: u64 = 5;
    pub const SPLIT: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream for `purpose`, deterministic in `(seed, purpose)`.
    pub fn stream(seed: u64, purpose: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(purpose);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            // still advance so the stream position does not depend on std
            let _ = self.uniform();
            return mean;
        }
        Normal::new(mean, std)
            .expect("std is finite and positive")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Writes one Bernoulli draw per probability into `out`.
    pub fn bernoulli_into(&mut self, probs: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(probs) {
            *o = if self.uniform() < p { 1.0 } else { 0.0 };
        }
    }
}

/// I.i.d. Bernoulli draws, one per entry of `probs`.
pub fn bernoulli_draw(rng: &mut Rng, probs: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = probs
        .data()
        .iter()
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::Probability {
            op: "bernoulli_draw",
            value: bad,
        });
    }
    let mut out = Tensor::zeros(probs.shape());
    rng.bernoulli_into(probs.data(), out.data_mut());
    Ok(out)
}
