//! Seeded initialisation.
//!
//! All randomness goes through [`SeededRng`], a ChaCha8 stream cipher
//! generator (counter-based, portable, specified independently of this
//! crate). Sub-streams are derived with [`derive_seed`]: the first eight
//! bytes (little-endian) of `SHA-256(seed_le || label)`.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Result, Tensor, TensorError};

pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent seed for the stream named `label`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Square 2-D identity.
    Identity,
    Normal { std: f32 },
    /// He-normal with `fan_in = shape[0]` (weights are stored `[in, out]`).
    Kaiming,
}

pub fn seeded_init(shape: &[usize], scheme: Init, seed: u64) -> Result<Tensor> {
    init_with_rng(shape, scheme, &mut seeded_rng(seed))
}

pub(crate) fn init_with_rng(shape: &[usize], scheme: Init, rng: &mut SeededRng) -> Result<Tensor> {
    match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => {
            if shape.len() != 2 || shape[0] != shape[1] {
                return Err(TensorError::Contract(format!(
                    "identity init needs a square 2-D shape, got {shape:?}"
                )));
            }
            let n = shape[0];
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                data[i * n + i] = 1.0;
            }
            Tensor::new(shape, data)
        }
        Init::Normal { std } => normal(shape, std, rng),
        Init::Kaiming => {
            let fan_in = shape.first().copied().unwrap_or(1).max(1);
            normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
        }
    }
}

fn normal(shape: &[usize], std: f32, rng: &mut SeededRng) -> Result<Tensor> {
    let dist = Normal::new(0.0f32, std)
        .map_err(|e| TensorError::Contract(format!("bad normal std {std}: {e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}
