use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of indices,
/// e.g. `(seed, subset, retrain)`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// `ceil(fraction * n)`, ignoring floating-point residue so that e.g.
/// `(n - 1) / n` of `n` is `n - 1`.
pub fn ceil_fraction(fraction: f64, n: f64) -> f64 {
    let x = fraction * n;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// CRC-32 of `bytes` as `crc32:xxxxxxxx`.
pub fn crc_digest(bytes: &[u8]) -> String {
    format!("crc32:{:08x}", crc32fast::hash(bytes))
}

/// Digest of a file that ends in its own CRC-32 trailer. Hashing the whole
/// file would give the same value for every file, so the trailer is left out.
pub fn framed_digest(bytes: &[u8]) -> String {
    crc_digest(&bytes[..bytes.len().saturating_sub(4)])
}

/// `m` distinct indices drawn uniformly from `0..n`, sorted ascending.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, m.min(n)).into_vec();
    picked.sort_unstable();
    picked
}
