//! Deterministic seed derivation.
//!
//! Every random decision in a run (init, shuffling, dropout masks, data
//! sampling) draws from a seed derived functionally from the run seed and
//! a tag path, never from a shared sequential stream. Two code paths that
//! derive the same tags get the same stream regardless of what else ran
//! in between — which is what makes joint and self training comparable
//! draw-for-draw.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tag path into a base seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ 0xD6E8_FEB8_6659_FD93);
    for &t in tags {
        acc = splitmix64(acc ^ t);
    }
    acc
}
