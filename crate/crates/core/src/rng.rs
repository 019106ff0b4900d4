//! Seeded generator streams.
//!
//! Every parallel unit of work (a training example, a generated sample) owns
//! its own ChaCha stream derived from `(seed, stream)`, so results do not
//! depend on the worker count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type BfRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> BfRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> BfRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for item `index` of work unit `unit` (e.g. training step, example).
pub fn stream_id(unit: u64, index: u64) -> u64 {
    unit.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index
}

/// Size of the rayon pool, capped by `BF_THREADS` when set.
pub fn configure_threads() {
    if let Some(n) = std::env::var("BF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // A global pool can only be installed once per process; later calls are no-ops.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
