//! Synthetic image datasets for hermetic experiments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn check(h: usize, w: usize, n_bits: u32) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Validation("image extents must be positive".into()));
    }
    if !(1..=8).contains(&n_bits) {
        return Err(Error::Validation(format!(
            "n_bits must be in 1..=8, got {n_bits}"
        )));
    }
    Ok(())
}

/// Stores an `n_bits` level in the top bits of a byte.
fn to_byte(level: f64, n_bits: u32) -> u8 {
    let top = ((1u32 << n_bits) - 1) as f64;
    (level.round().clamp(0.0, top) as u8) << (8 - n_bits)
}

/// Two-component Gaussian mixture over single-channel images: each image is
/// one of two intensity ramps (left-to-right or top-to-bottom) plus i.i.d.
/// Gaussian noise of `noise_std` levels, rounded and clipped to `n_bits`.
/// Returned as 8-bit pixels (levels shifted into the high bits).
pub fn gaussian_mixture<R: Rng + ?Sized>(
    n: usize,
    h: usize,
    w: usize,
    n_bits: u32,
    noise_std: f64,
    rng: &mut R,
) -> Result<Tensor<u8>> {
    check(h, w, n_bits)?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Validation(e.to_string()))?;
    let top = ((1u32 << n_bits) - 1) as f64;
    let lo = 0.2 * top;
    let hi = 0.8 * top;
    let mut data = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let horizontal = rng.gen_bool(0.5);
        for i in 0..h {
            for j in 0..w {
                let t = if horizontal {
                    j as f64 / (w.max(2) - 1) as f64
                } else {
                    i as f64 / (h.max(2) - 1) as f64
                };
                data.push(to_byte(lo + (hi - lo) * t + noise.sample(rng), n_bits));
            }
        }
    }
    Tensor::from_vec(Shape::new(n, h, w, 1), data)
}

/// Single-channel checkerboards with random cell size (1, 2 or 4 pixels),
/// random phase and two random intensities.
pub fn checkerboards<R: Rng + ?Sized>(
    n: usize,
    h: usize,
    w: usize,
    n_bits: u32,
    rng: &mut R,
) -> Result<Tensor<u8>> {
    check(h, w, n_bits)?;
    let top = ((1u32 << n_bits) - 1) as f64;
    let mut data = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let cell = [1usize, 2, 4][rng.gen_range(0..3)];
        let phase = rng.gen_range(0..2);
        let a = rng.gen_range(0.0..=top);
        let b = rng.gen_range(0.0..=top);
        for i in 0..h {
            for j in 0..w {
                let v = if (i / cell + j / cell + phase) % 2 == 0 {
                    a
                } else {
                    b
                };
                data.push(to_byte(v, n_bits));
            }
        }
    }
    Tensor::from_vec(Shape::new(n, h, w, 1), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixture_is_deterministic_and_in_range() {
        let a = gaussian_mixture(16, 8, 8, 5, 1.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gaussian_mixture(16, 8, 8, 5, 1.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), Shape::new(16, 8, 8, 1));
        // only the top five bits are used
        assert!(a.data().iter().all(|v| v & 0b111 == 0));
    }

    #[test]
    fn checkerboard_alternates() {
        let t = checkerboards(4, 8, 8, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for b in 0..4 {
            let distinct: std::collections::BTreeSet<u8> =
                (0..64).map(|k| t.at(b, k / 8, k % 8, 0)).collect();
            assert!(distinct.len() <= 2);
        }
    }

    #[test]
    fn invalid_bits_rejected() {
        assert!(gaussian_mixture(1, 2, 2, 0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
