//! Epoch batching over the balanced labeled set and a reshuffling
//! round-robin over the unlabeled pool.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::labels::oversample;

pub fn steps_per_epoch(items: usize, batch: usize) -> usize {
    items.div_ceil(batch)
}

/// Oversamples item indices by class, shuffles, and cuts into batches; the
/// last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(classes: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..classes.len()).collect();
    let (mut order, _) = oversample(&idx, |&i| classes[i], rng);
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Cycles through a permutation of `0..n`, drawing a fresh permutation each
/// time it is exhausted.
#[derive(Clone, Debug)]
pub struct RoundRobin {
    order: Vec<usize>,
    pos: usize,
    wraps: usize,
}

impl RoundRobin {
    pub fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        assert!(n > 0, "round robin over an empty pool");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0, wraps: 0 }
    }

    pub fn next_index<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.wraps += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn take<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.next_index(rng)).collect()
    }

    /// Completed passes over the pool.
    pub fn wraps(&self) -> usize {
        self.wraps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn balanced_128_items_give_two_steps() {
        let classes: Vec<usize> = (0..128).map(|i| i % 4).collect();
        assert_eq!(steps_per_epoch(128, 64), 2);
        let b = epoch_batches(&classes, 64, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 64));
    }

    #[test]
    fn round_robin_never_repeats_within_a_wrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rr = RoundRobin::new(100, &mut rng);
        let drawn: Vec<usize> = (0..5).flat_map(|_| rr.take(64, &mut rng)).collect();
        assert_eq!(rr.wraps(), 3);
        for pass in drawn.chunks(100) {
            let set: HashSet<_> = pass.iter().collect();
            assert_eq!(set.len(), pass.len());
        }
        assert_ne!(&drawn[..100], &drawn[100..200]);
    }
}
