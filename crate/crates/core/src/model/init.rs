use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// FNV-1a, used to derive a per-parameter stream from the model seed.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Domain prefixes are stripped so mirrored groups draw identical values.
fn init_key(name: &str) -> &str {
    name.strip_prefix("d1.")
        .or_else(|| name.strip_prefix("d2."))
        .unwrap_or(name)
}

pub(crate) fn uniform(seed: u64, name: &str, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(init_key(name)));
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}
