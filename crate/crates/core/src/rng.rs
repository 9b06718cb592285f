//! Seed hierarchy and noise tensors.
//!
//! Every random draw in the lab comes from a ChaCha stream whose seed is
//! derived from a parent seed and a label: global seed -> per-run seed ->
//! per-trajectory seed. Candle's own RNG is never used.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub type LabRng = ChaCha8Rng;

/// Derives a child seed from `parent` and a textual label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn rng_from(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, label: &str) -> LabRng {
    rng_from(derive_seed(parent, label))
}

pub fn normal_vec(rng: &mut LabRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Standard normal tensor of the given shape.
pub fn randn(rng: &mut LabRng, dims: &[usize]) -> Result<Tensor> {
    let n = dims.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n), dims, &Device::Cpu)?)
}

/// Uniform integer in `[lo, hi]` (inclusive).
pub fn uniform_step(rng: &mut LabRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
