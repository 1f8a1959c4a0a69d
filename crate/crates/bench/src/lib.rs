//! Seeded fixtures shared by the benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccpl_core::Tensor;

/// Uniform `[0, 1)` tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

/// `m` unit-norm rows of width `d`.
pub fn unit_rows(m: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut t = random_tensor(&[m, d], seed).map(|v| v - 0.5);
    for row in t.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}
