//! Bits <-> gap-truncated Gaussian latents.
//!
//! Each bit becomes one latent coordinate: a standard normal draw, rejected
//! until it lands below `-alpha` (bit 0) or above `alpha` (bit 1). Revealing
//! reads the sign back. Coordinates are ordered channel-major, then row-major
//! over the `(2, H, W)` chrominance shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Default half-width of the excluded interval around zero.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Latent coordinates per pixel (one per chrominance channel).
pub const CHANNELS: usize = 2;

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("{got} bits do not match latent dimensionality {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("alpha must lie in [0, 1), got {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    height: usize,
    width: usize,
    alpha: f64,
    values: Vec<f64>,
}

impl LatentCode {
    pub fn from_values(height: usize, width: usize, alpha: f64, values: Vec<f64>) -> Result<Self, MappingError> {
        let expected = capacity_bits(height, width);
        if values.len() != expected {
            return Err(MappingError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            height,
            width,
            alpha,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One bit per latent coordinate, two coordinates per pixel.
pub fn capacity_bits(height: usize, width: usize) -> usize {
    CHANNELS * height * width
}

/// Draws the latent value for coordinate `index` carrying `bit`.
///
/// Every coordinate owns its own ChaCha stream, so the value depends only on
/// `(seed, index, bit, alpha)`.
pub fn sample_coordinate(bit: bool, alpha: f64, seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut last = 0.0;
    for _ in 0..MAX_DRAWS {
        let z: f64 = StandardNormal.sample(&mut rng);
        if (bit && z > alpha) || (!bit && z < -alpha) {
            return z;
        }
        last = z;
    }
    // Unreachable in practice for alpha < 1 (acceptance rate above 15%).
    let magnitude = alpha + last.abs().max(f64::EPSILON);
    if bit {
        magnitude
    } else {
        -magnitude
    }
}

pub fn encode_bits(bits: &[bool], height: usize, width: usize, alpha: f64, seed: u64) -> Result<LatentCode, MappingError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(MappingError::InvalidAlpha(alpha));
    }
    let expected = capacity_bits(height, width);
    if bits.len() != expected {
        return Err(MappingError::ShapeMismatch {
            expected,
            got: bits.len(),
        });
    }
    let values = bits
        .iter()
        .enumerate()
        .map(|(i, &b)| sample_coordinate(b, alpha, seed, i as u64))
        .collect();
    Ok(LatentCode {
        height,
        width,
        alpha,
        values,
    })
}

/// Sign rule: negative values are 0, everything else (including 0.0) is 1.
pub fn decode_latent(values: &[f64]) -> Vec<bool> {
    values.iter().map(|&v| v >= 0.0 || v.is_nan()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capacity_arithmetic() {
        assert_eq!(capacity_bits(128, 128), 32768);
        assert_eq!(capacity_bits(1, 1), 2);
        assert_eq!(capacity_bits(64, 128), 16384);
    }

    #[test]
    fn sign_rule() {
        assert_eq!(decode_latent(&[-0.53, 0.88, -0.02]), vec![false, true, false]);
        assert_eq!(decode_latent(&[0.0, -0.0]), vec![true, true]);
    }

    #[test]
    fn bits_respect_the_gap() {
        let bits: Vec<bool> = (0..2 * 32 * 32).map(|i| i % 3 == 0).collect();
        let z = encode_bits(&bits, 32, 32, 0.1, 9).unwrap();
        for (&b, &v) in bits.iter().zip(z.values()) {
            if b {
                assert!(v > 0.1);
            } else {
                assert!(v < -0.1);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let bits = vec![true, false, true, true, false, false, true, false];
        let a = encode_bits(&bits, 2, 2, 0.1, 42).unwrap();
        let b = encode_bits(&bits, 2, 2, 0.1, 42).unwrap();
        let c = encode_bits(&bits, 2, 2, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn half_normal_mean_at_zero_gap() {
        let n = 100_000;
        let bits: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let z = encode_bits(&bits, 1, n / 2, 0.0, 1).unwrap();
        let mean = z.values().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let target = (2.0 / std::f64::consts::PI).sqrt();
        let sigma = ((1.0 - 2.0 / std::f64::consts::PI) / n as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * sigma, "mean {mean} vs {target}");
    }

    #[test]
    fn shape_and_alpha_are_validated() {
        assert_eq!(
            encode_bits(&[true; 7], 2, 2, 0.1, 0),
            Err(MappingError::ShapeMismatch { expected: 8, got: 7 })
        );
        assert_eq!(encode_bits(&[true; 8], 2, 2, 1.0, 0), Err(MappingError::InvalidAlpha(1.0)));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_under_small_noise(
            bits in proptest::collection::vec(any::<bool>(), 32),
            noise in proptest::collection::vec(-0.0999f64..0.0999, 32),
            seed in any::<u64>(),
        ) {
            let z = encode_bits(&bits, 4, 4, 0.1, seed).unwrap();
            prop_assert_eq!(decode_latent(z.values()), bits.clone());
            let noisy: Vec<f64> = z.values().iter().zip(&noise).map(|(v, e)| v + e).collect();
            prop_assert_eq!(decode_latent(&noisy), bits);
        }
    }
}
