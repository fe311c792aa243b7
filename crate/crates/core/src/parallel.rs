use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RvaeError};

pub const THREADS_ENV: &str = "RVAE_THREADS";

/// Independent generator for work item `stream` under `master`; the same
/// pair always yields the same sequence regardless of scheduling.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Caps the global worker pool at `RVAE_THREADS` when set. Returns the
/// number of workers in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| RvaeError::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
        if n == 0 {
            return Err(RvaeError::Config(format!("{THREADS_ENV} must be at least 1")));
        }
        // a pool built earlier in this process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
