//! Shared input builders for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random SSD inputs (C, Bbar, a_hat, X) as flat buffers.
pub struct SsdInputs {
    pub c: Vec<f32>,
    pub bbar: Vec<f32>,
    pub a: Vec<f32>,
    pub x: Vec<f32>,
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

pub fn ssd_inputs(l: usize, d: usize, n: usize, seed: u64) -> SsdInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SsdInputs {
        c: (0..l * d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        bbar: (0..l * d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        a: (0..l).map(|_| rng.gen_range(0.05..1.0)).collect(),
        x: (0..l * n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        l,
        d,
        n,
    }
}

pub fn random_signal(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
