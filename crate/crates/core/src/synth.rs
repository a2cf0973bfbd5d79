//! Seeded synthetic images for calibration and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// Sum of random oriented sinusoids plus a gradient, rescaled into [0, 1].
/// `detail` in [0, 1] blends in higher frequencies and pixel noise, so a
/// corpus of mixed `detail` values spans a range of patch entropies.
pub fn textured_image<T: Scalar>(seed: u64, channels: usize, h: usize, w: usize, detail: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|i| {
            let freq = if i < 3 { 0.02 + 0.05 * rng.random::<f64>() } else { 0.2 + 0.6 * rng.random::<f64>() * detail };
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let amp = if i < 3 { 1.0 } else { detail };
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let tint: Vec<f64> = (0..channels).map(|_| 0.8 + 0.4 * rng.random::<f64>()).collect();
    let mut raw = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.3 * (x as f64 / w.max(1) as f64 + y as f64 / h.max(1) as f64);
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            v += detail * 0.5 * (rng.random::<f64>() - 0.5);
            raw[y * w + x] = v;
        }
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Tensor::zeros(Dims::new(1, channels, h, w));
    for (c, &t) in tint.iter().enumerate() {
        for (dst, &v) in out.plane_mut(0, c).iter_mut().zip(&raw) {
            // quantize to 8-bit levels like a decoded image
            let u = (((v - lo) / span) * t).clamp(0.0, 1.0);
            *dst = T::of((u * 255.0).round() / 255.0);
        }
    }
    out
}

/// Uniform noise in [0, 1].
pub fn noise_image<T: Scalar>(seed: u64, channels: usize, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(1, channels, h, w);
    Tensor::from_vec(dims, (0..dims.len()).map(|_| T::of(rng.random::<f64>())).collect())
        .expect("length matches dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textured_is_seeded_and_in_range() {
        let a = textured_image::<f32>(3, 3, 20, 24, 0.5);
        assert_eq!(a, textured_image::<f32>(3, 3, 20, 24, 0.5));
        assert_ne!(a, textured_image::<f32>(4, 3, 20, 24, 0.5));
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }
}
