//! Seed hierarchy: every component derives its generator from the global
//! seed and a stable name, so components are reproducible in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a, used only to derive child seeds from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, name: &str) -> SeedTree {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(name.as_bytes());
        SeedTree::new(fnv1a(&bytes))
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.child(name).seed)
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_are_stable_and_distinct() {
        let root = SeedTree::new(7);
        assert_eq!(root.child("lm"), SeedTree::new(7).child("lm"));
        assert_ne!(root.child("lm"), root.child("vision"));
        assert_ne!(root.child("lm"), SeedTree::new(8).child("lm"));
    }
}
