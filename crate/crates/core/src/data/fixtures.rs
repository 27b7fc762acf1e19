//! Seeded synthetic images: gradients, checkerboards and Gaussian blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub const FIXTURE_COUNT: usize = 32;
pub const FIXTURE_SIZE: usize = 64;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// Image `index` of the family generated from `seed`, as `[1, 3, size, size]`.
pub fn fixture_image<T: Scalar>(index: usize, size: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let s = size as f64;
    match index % 3 {
        0 => {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let u = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
                T::from_f64(a[c] + (b[c] - a[c]) * u)
            })
        }
        1 => {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let cell = rng.gen_range(size / 16..=size / 4).max(1);
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                T::from_f64(if on { a[c] } else { b[c] })
            })
        }
        _ => {
            let bg = color(&mut rng);
            let blobs: Vec<_> = (0..rng.gen_range(3..=5))
                .map(|_| {
                    let center = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                    let sigma = rng.gen_range(0.08..0.25) * s;
                    let col = color(&mut rng);
                    (center, sigma, col)
                })
                .collect();
            Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let mut v = bg[c];
                for &((cx, cy), sigma, col) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let a = (-d2 / (2.0 * sigma * sigma)).exp();
                    v = v * (1.0 - a) + col[c] * a;
                }
                T::from_f64(v)
            })
        }
    }
}
