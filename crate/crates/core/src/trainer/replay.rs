use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seed::derive_seed;
use crate::tasks::Example;

/// A stored example and the stream position (0-based) of its task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEntry {
    pub example: Example,
    pub source: usize,
}

/// Samples kept from finished tasks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
}

/// `ceil(frac · n)`, treating products within 1e-9 of an integer as that
/// integer so `0.07 · 100` stays 7.
pub fn replay_quota(n: usize, frac: f64) -> usize {
    let x = frac * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

fn sample_without_replacement(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, k).into_vec()
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn count_from(&self, source: usize) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }

    /// Stores `ceil(frac·|data|)` examples of task `source`, drawn without
    /// replacement. Sources must arrive in increasing order.
    pub fn admit(&mut self, data: &[Example], source: usize, frac: f64, seed: u64) {
        debug_assert!(self.entries.iter().all(|e| e.source < source));
        let k = replay_quota(data.len(), frac);
        for i in sample_without_replacement(data.len(), k, derive_seed(seed, 41, source as u64)) {
            self.entries.push(ReplayEntry { example: data[i].clone(), source });
        }
    }
}

/// `ceil(frac·|buffer|)` entries drawn without replacement.
pub fn build_replay_batch(buffer: &ReplayBuffer, frac: f64, seed: u64) -> Vec<ReplayEntry> {
    let k = replay_quota(buffer.len(), frac.clamp(0.0, 1.0));
    sample_without_replacement(buffer.len(), k, derive_seed(seed, 43, 0))
        .into_iter()
        .map(|i| buffer.entries[i].clone())
        .collect()
}
