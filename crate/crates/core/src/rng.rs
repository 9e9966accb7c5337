use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream keyed by `seed` and a path of indices, e.g.
/// `(seed, [step, example])`. Lets parallel workers draw without sharing a
/// generator while staying reproducible.
pub fn derive(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

/// The seed [`derive`] would use, for recording alongside results.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}
