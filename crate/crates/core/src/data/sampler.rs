//! Minibatch stream that alternates between supervised and weak corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Supervised,
    Weak,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Supervised => "sup",
            Source::Weak => "weak",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Source,
    pub indices: Vec<usize>,
}

/// Uniform sampling without replacement within epochs.
#[derive(Clone, Debug)]
struct EpochOrder {
    order: Vec<usize>,
    pos: usize,
}

impl EpochOrder {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Each batch comes entirely from the supervised corpus with probability
/// `ratio`, otherwise from the weak corpus.
#[derive(Clone, Debug)]
pub struct MixingSampler {
    ratio: f64,
    batch_size: usize,
    rng: ChaCha8Rng,
    sup: EpochOrder,
    weak: EpochOrder,
}

impl MixingSampler {
    pub fn new(
        sup_len: usize,
        weak_len: usize,
        ratio: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "mixing ratio {ratio} outside [0, 1]"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if ratio > 0.0 && sup_len == 0 {
            return Err(Error::Empty("supervised corpus"));
        }
        if ratio < 1.0 && weak_len == 0 {
            return Err(Error::Empty("weak corpus"));
        }
        Ok(Self {
            ratio,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sup: EpochOrder::new(sup_len),
            weak: EpochOrder::new(weak_len),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let u: f64 = self.rng.random();
        let source = if u < self.ratio {
            Source::Supervised
        } else {
            Source::Weak
        };
        let indices = match source {
            Source::Supervised => self.sup.take(self.batch_size, &mut self.rng),
            Source::Weak => self.weak.take(self.batch_size, &mut self.rng),
        };
        Batch { source, indices }
    }
}

impl Iterator for MixingSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_ratios() {
        let s = MixingSampler::new(5, 7, 0.0, 2, 1).unwrap();
        assert!(s.take(200).all(|b| b.source == Source::Weak));
        let s = MixingSampler::new(5, 7, 1.0, 2, 1).unwrap();
        assert!(s.take(200).all(|b| b.source == Source::Supervised));
        assert!(MixingSampler::new(0, 7, 0.3, 2, 1).is_err());
        assert!(MixingSampler::new(5, 0, 0.3, 2, 1).is_err());
        assert!(MixingSampler::new(0, 7, 0.0, 2, 1).is_ok());
        assert!(MixingSampler::new(5, 7, 1.5, 2, 1).is_err());
    }

    #[test]
    fn epochs_cover_every_item_once() {
        let mut s = MixingSampler::new(6, 1, 1.0, 3, 9).unwrap();
        let mut seen: Vec<usize> = s.next_batch().indices;
        seen.extend(s.next_batch().indices);
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}
