use rand::seq::SliceRandom;

use crate::seed::rng_for;

/// Endless shuffled pass over `0..len`: each cycle is an independent seeded
/// permutation, so the batch for any step is a pure function of
/// `(seed, step)` and resuming needs no iterator state.
#[derive(Clone, Debug)]
pub struct DomainCycler {
    len: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl DomainCycler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { len, seed, cached: None }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn permutation(&mut self, cycle: u64) -> &[usize] {
        if self.cached.as_ref().map(|(c, _)| *c) != Some(cycle) {
            let mut p: Vec<usize> = (0..self.len).collect();
            p.shuffle(&mut rng_for(self.seed, &[cycle]));
            self.cached = Some((cycle, p));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// Item at absolute position `pos` of the endless sequence.
    pub fn at(&mut self, pos: u64) -> usize {
        let n = self.len as u64;
        let (cycle, offset) = (pos / n, (pos % n) as usize);
        self.permutation(cycle)[offset]
    }

    /// Indices for batch number `step` of size `batch`.
    pub fn batch(&mut self, step: u64, batch: usize) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let start = step * batch as u64;
        (start..start + batch as u64).map(|p| self.at(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_cycle_is_a_permutation() {
        let mut c = DomainCycler::new(7, 3);
        for cycle in 0..4u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| c.at(cycle * 7 + i)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batches_are_stateless() {
        let mut a = DomainCycler::new(10, 1);
        let seq: Vec<Vec<usize>> = (0..8).map(|s| a.batch(s, 3)).collect();
        let mut b = DomainCycler::new(10, 1);
        assert_eq!(b.batch(5, 3), seq[5]);
        assert_eq!(b.batch(2, 3), seq[2]);
        assert_ne!(DomainCycler::new(10, 2).batch(0, 10), seq.concat()[..10].to_vec());
    }
}
