//! Named random streams derived from one root seed, so each consumer
//! (parameter init, Gumbel noise, batch shuffling, synthesis) is
//! reproducible independently of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const PARAM_INIT: &str = "param-init";
pub const GUMBEL: &str = "gumbel";
pub const DATA_SHUFFLE: &str = "data-shuffle";
pub const SYNTH: &str = "synth";

// FNV-1a; stable across platforms and releases, unlike std's hasher.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(root_seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(root_seed ^ fnv1a(name))
}
