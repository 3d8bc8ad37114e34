//! Seeded inputs shared by the criterion benches.

use bitbudget::bitgemm::BitMatrix;
use bitbudget::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `bits`-bit codes, packed row-major.
pub fn random_bits(rows: usize, cols: usize, bits: u32, seed: u64) -> BitMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ints: Vec<u32> = (0..rows * cols).map(|_| rng.gen_range(0..1u32 << bits)).collect();
    BitMatrix::pack(&ints, rows, cols, bits).expect("codes fit their width")
}

pub fn random_f32(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_f32(n, seed)).expect("positive shape")
}
