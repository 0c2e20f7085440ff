//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded through
//! [`derive`]. A top-level seed plus a textual stage tag and an index fully
//! determine the sub-stream, so reruns are bit-identical and independent
//! stages (spec generation, simulation, minibatch sampling, gate noise)
//! never share a stream.
//!
//! Stage tags used by this crate:
//!
//! | tag                  | owner                                     |
//! |----------------------|-------------------------------------------|
//! | `"init"`             | model weight initialization               |
//! | `"gumbel"`           | gate uniforms in the training loop        |
//! | `"minibatch"`        | minibatch index sampling                  |
//! | `"eval"`             | gate draws for Monte-Carlo prediction     |
//! | `"<exp>/spec"`       | benchmark model generation per replication|
//! | `"<exp>/train"`      | training data per replication             |
//! | `"<exp>/test"`       | held-out test data per replication        |
//! | `"<exp>/fit"`        | estimator fitting per replication         |

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; a cheap, well-mixed 64-bit permutation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from `(base, tag, index)`.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(base ^ 0x6a09_e667_f3bc_c908);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// A ChaCha8 stream for the given `(base, tag, index)` triple.
pub fn rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}
