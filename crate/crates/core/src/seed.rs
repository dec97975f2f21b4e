//! Purpose-split random streams.
//!
//! Every consumer of randomness (partitioning, client sampling, minibatch
//! order, calibration batches, adapter init) derives its own ChaCha stream
//! from the run seed, so changing one consumer never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    ClientSampling = 3,
    Training = 4,
    Calibration = 5,
    AdapterInit = 6,
    Svd = 7,
    Backbone = 8,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(base: u64, purpose: Purpose, ids: &[u64]) -> u64 {
    let mut h = splitmix(base ^ splitmix(purpose as u64));
    for &id in ids {
        h = splitmix(h ^ id.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    h
}

pub fn stream(base: u64, purpose: Purpose, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, purpose, ids))
}
