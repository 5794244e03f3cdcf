//! Counter-style seeding: every independent unit of randomness (a block of
//! draws, a moment-table entry, a retry) gets its own ChaCha stream derived
//! from `(seed, stream id)`, so results never depend on evaluation order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DRAW_BLOCK: usize = 1024;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for a named stage, e.g. `derive_seed(master, 3)`.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    // Offset keeps derived seeds away from the block streams used for draws.
    stream_rng(master, label.wrapping_add(1 << 48)).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |stream| {
            let mut r = stream_rng(7, stream);
            (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>()
        };
        let (a, b, c) = (draw(1), draw(1), draw(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
    }
}
