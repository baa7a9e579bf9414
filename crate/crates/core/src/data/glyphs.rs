//! Procedural stand-in for a small natural-image dataset: anti-aliased
//! colored shapes on smooth backgrounds, one shape per class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CorruptionSpec, Dataset, CHANNELS, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const MAX_CLASSES: usize = 16;
const SUPERSAMPLE: usize = 3;

/// Whether shape-frame point `(u, v)` lies inside glyph `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r < 0.8,
        1 => u.abs().max(v.abs()) < 0.68,
        2 => v < 0.6 && v > -0.8 && u.abs() < (v + 0.8) * 0.55,
        3 => (u.abs() < 0.24 && v.abs() < 0.8) || (v.abs() < 0.24 && u.abs() < 0.8),
        4 => r > 0.45 && r < 0.82,
        5 => {
            let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (a.abs() < 0.22 && b.abs() < 0.85) || (b.abs() < 0.22 && a.abs() < 0.85)
        }
        6 => (((u + 0.55).abs() < 0.2 || (u - 0.55).abs() < 0.2) && v.abs() < 0.8) || (v.abs() < 0.18 && u.abs() < 0.6),
        7 => u.abs() + v.abs() < 0.85,
        8 => {
            let phi = v.atan2(u);
            r < 0.5 + 0.32 * (5.0 * phi).cos()
        }
        9 => v.abs() < 0.25 && u.abs() < 0.85,
        10 => u.abs() < 0.25 && v.abs() < 0.85,
        11 => ((u + 0.5).abs() < 0.2 && v.abs() < 0.8) || ((v - 0.6).abs() < 0.2 && u.abs() < 0.7),
        12 => ((v + 0.6).abs() < 0.2 && u.abs() < 0.8) || (u.abs() < 0.2 && v.abs() < 0.8),
        13 => r < 0.8 && v > -0.1,
        14 => {
            let m = u.abs().max(v.abs());
            m > 0.45 && m < 0.75
        }
        _ => ((u + 0.45).powi(2) + v * v).sqrt() < 0.32 || ((u - 0.45).powi(2) + v * v).sqrt() < 0.32,
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn draw(class: usize, rng: &mut impl Rng, out: &mut [f64]) {
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        if (luminance(c) - luminance(bg)).abs() > 0.25 {
            break c;
        }
    };
    // Background varies linearly across the image.
    let tilt = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let scale = rng.random_range(0.55..0.85);
    let (cx, cy) = (rng.random_range(-0.18..0.18), rng.random_range(-0.18..0.18));
    let theta: f64 = rng.random_range(-0.26..0.26);
    let (s, c) = theta.sin_cos();
    let n = SIDE * SIDE;
    for py in 0..SIDE {
        for px in 0..SIDE {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / SIDE as f64) * 2.0 - 1.0;
                    let y = ((py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / SIDE as f64) * 2.0 - 1.0;
                    let (dx, dy) = ((x - cx) / scale, (y - cy) / scale);
                    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                    if inside(class, u, v) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let (x, y) = (px as f64 / SIDE as f64 - 0.5, py as f64 / SIDE as f64 - 0.5);
            let shade = tilt[0] * x + tilt[1] * y;
            for ch in 0..CHANNELS {
                let b = (bg[ch] + shade).clamp(0.0, 1.0);
                out[ch * n + py * SIDE + px] = b + cover * (fg[ch] - b);
            }
        }
    }
}

/// Balanced, deterministic glyph dataset; sample `i` has class `i % n_classes`.
pub fn generate_glyphs<T: Scalar>(seed: u64, n_per_class: usize, n_classes: usize) -> Result<Dataset<T>> {
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::config(format!("n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let total = n_per_class * n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0.0f64; total * PIXELS];
    let mut labels = Vec::with_capacity(total);
    for (i, img) in pixels.chunks_mut(PIXELS).enumerate() {
        let class = i % n_classes;
        draw(class, &mut rng, img);
        labels.push(class);
    }
    Dataset::new(Tensor::from_f64([total, CHANNELS, SIDE, SIDE], &pixels)?, labels, n_classes, CorruptionSpec::clean())
}
