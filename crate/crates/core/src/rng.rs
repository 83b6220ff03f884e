//! Seeded random streams.
//!
//! Every random decision in a run draws from a xoshiro256** generator whose
//! seed is derived from the master seed and a tuple of stream keys through
//! the splitmix64 finalizer. Streams are therefore addressable: the generator
//! for "topology update of head 2, layer 4, at step 300" can be recreated from
//! scratch, which is what makes checkpoint resume bit-exact without storing
//! generator states.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

pub type StreamRng = Xoshiro256StarStar;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    WeightInit = 1,
    MaskInit = 2,
    Topology = 3,
    Shuffle = 4,
    Split = 5,
    Generate = 6,
}

/// Master seed plus a stream id. One per (component, layer) for masks and
/// weights; distinct pairs always map to distinct stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSeed {
    pub seed: u64,
    pub stream: u64,
}

impl MaskSeed {
    pub fn new(seed: u64, component: u64, layer: u64) -> Self {
        Self {
            seed,
            stream: (component << 32) | (layer & 0xffff_ffff),
        }
    }

    pub fn rng(&self, purpose: Purpose) -> StreamRng {
        stream(self.seed, &[purpose as u64, self.stream])
    }
}

/// splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of the stream named by `keys` under `master`.
pub fn stream_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(master: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(master, keys))
}
