use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic source of sub-seeds.
///
/// Every stochastic operation takes an explicit seed; a stream hands them
/// out in a fixed order so that a run is fully determined by its root seed.
#[derive(Clone, Debug)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// An independent child stream.
    pub fn split(&mut self) -> SeedStream {
        SeedStream::new(self.next_seed())
    }

    /// A generator seeded from the next sub-seed.
    pub fn rng(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.next_seed())
    }
}
