//! Seeded random inputs shared by unit and integration tests.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[0, 1)` tensor of shape `(1, 3, h, w)` in f64.
pub fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
    rand_tensor(&[1, 3, h, w], 0.0, 1.0, seed)
}

/// A reference image and an independent distorted image, both `(1, 3, h, w)` f64.
pub fn rand_pair(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    (rand_image(h, w, seed), rand_image(h, w, seed ^ 0x9e37_79b9_7f4a_7c15))
}

/// Reference plus a bounded perturbation of it, clipped to `[0, 1]`.
pub fn rand_perturbed(h: usize, w: usize, amplitude: f64, seed: u64) -> (Tensor, Tensor) {
    let r = rand_tensor(&[1, 3, h, w], 0.15, 0.85, seed);
    let n = rand_tensor(&[1, 3, h, w], -amplitude, amplitude, seed.wrapping_add(1));
    let d = (&r + n).unwrap().clamp(0.0, 1.0).unwrap();
    (r, d)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Smooth random image (sum of a few low-frequency sinusoids) in `[0.1, 0.9]`.
pub fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        let terms: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.2),
                    rng.random_range(0.02..0.2),
                    rng.random_range(0.0..6.28),
                    rng.random_range(0.05..0.13),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = terms
                    .iter()
                    .map(|(fy, fx, p, a)| a * (fy * y as f64 + fx * x as f64 + p).sin())
                    .sum();
                v[(c * h + y) * w + x] = (0.5 + s).clamp(0.1, 0.9);
            }
        }
    }
    Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap()
}

pub fn to_f32(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F32).unwrap()
}
