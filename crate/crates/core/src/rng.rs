//! Seed derivation. Every random stream in a run is derived from the master
//! seed plus a fixed list of stream tags, so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, kept distinct so streams never alias.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const ORDERING: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GROW: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const EXEMPLAR: u64 = 6;
    pub const FINETUNE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(master), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(master: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}
