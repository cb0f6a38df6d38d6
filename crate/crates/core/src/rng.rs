//! Deterministic random streams keyed by string labels.
//!
//! Dataset-level operations derive one independent stream per work item
//! (e.g. per instance and attack copy) so results do not depend on the
//! order items are processed in.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a ChaCha8 stream from a base seed and a list of key parts.
///
/// The same `(seed, parts)` always yields the same stream, on every
/// platform and release.
pub fn stream(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        // length-prefix each part so ("ab","c") != ("a","bc")
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
