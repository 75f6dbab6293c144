//! Deterministic per-path random streams.
//!
//! Every path draws from its own ChaCha8 stream keyed by the master seed and a
//! 64-bit stream id, so a path's samples never depend on how the ensemble is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-id offsets that keep independent ensembles of one experiment apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// Ensemble the backward solver is fitted on.
    Training,
    /// Fresh ensemble used for out-of-sample cost evaluation.
    Evaluation,
    /// Plain simulation and Monte-Carlo checks.
    Simulation,
}

impl StreamRole {
    fn offset(self) -> u64 {
        match self {
            StreamRole::Simulation => 0,
            StreamRole::Training => 1 << 40,
            StreamRole::Evaluation => 2 << 40,
        }
    }
}

pub fn path_stream(seed: u64, role: StreamRole, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.offset().wrapping_add(path));
    rng
}
