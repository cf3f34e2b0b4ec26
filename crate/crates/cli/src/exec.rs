//! Thread pool setup and the parallel chain executor.

use anyhow::Result;
use rayon::prelude::*;
use villani_core::sde::{ChainExecutor, ChainRun};

/// Runs `f` on a pool of `threads` workers (0 = one per core).
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    Ok(pool.install(f))
}

/// Chains in parallel; results come back in chain order, so averaging is
/// independent of the thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonExecutor;

impl ChainExecutor for RayonExecutor {
    fn run_chains(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> villani_core::Result<ChainRun> + Sync),
    ) -> Vec<villani_core::Result<ChainRun>> {
        (0..n).into_par_iter().map(job).collect()
    }
}

/// Derives an independent seed for a named purpose (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
