//! Corruption synthesis. Severity tables are fixed repo constants indexed by
//! `severity - 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainId, CHANNELS, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const GAUSSIAN_NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Photon count per unit intensity (lower is noisier).
pub const SHOT_NOISE_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
/// Fraction of values replaced by salt or pepper.
pub const IMPULSE_NOISE_AMOUNT: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
/// Separable box radius; the outermost tap gets the fractional weight.
pub const BOX_BLUR_RADIUS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];
/// Taps along a random direction.
pub const MOTION_BLUR_LENGTH: [usize; 5] = [3, 5, 7, 9, 11];
/// Added to the HSV value channel.
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Multiplies deviations from the image mean.
pub const CONTRAST_FACTOR: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];
/// Side of the coarse grid the image is averaged onto.
pub const PIXELATE_SIDE: [usize; 5] = [24, 19, 16, 12, 10];
/// Multiplicative Gaussian noise scale.
pub const SPECKLE_NOISE_SCALE: [f64; 5] = [0.15, 0.2, 0.35, 0.45, 0.6];
/// HSV saturation `s·a + b`.
pub const SATURATE: [(f64, f64); 5] = [(0.3, 0.0), (0.1, 0.0), (2.0, 0.0), (5.0, 0.1), (20.0, 0.2)];
pub const GAUSSIAN_BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Clean,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
    SpeckleNoise,
    Saturate,
    GaussianBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 12] = [
        CorruptionKind::Clean,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::Saturate,
        CorruptionKind::GaussianBlur,
    ];
    pub const SEEN: usize = 9;

    pub fn seen() -> &'static [CorruptionKind] {
        &Self::ALL[..Self::SEEN]
    }

    pub fn unseen() -> &'static [CorruptionKind] {
        &Self::ALL[Self::SEEN..]
    }

    pub fn domain(self) -> DomainId {
        DomainId(self as usize)
    }

    /// Seen kinds may be used for training; unseen kinds only for evaluation.
    pub fn is_seen(self) -> bool {
        (self as usize) < Self::SEEN
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Clean => "clean",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::GaussianBlur => "gaussian_blur",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = CorruptionSpec { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn clean() -> Self {
        CorruptionSpec { kind: CorruptionKind::Clean, severity: MAX_SEVERITY }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SEVERITY).contains(&self.severity) {
            return Err(Error::config(format!("severity {} of {} outside 1..=5", self.severity, self.kind.name())));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

const N: usize = SIDE * SIDE;

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn map_hsv(img: &mut [f64], f: impl Fn([f64; 3]) -> [f64; 3]) {
    for p in 0..N {
        let hsv = rgb_to_hsv([img[p], img[N + p], img[2 * N + p]]);
        let [r, g, b] = hsv_to_rgb(f(hsv));
        img[p] = r;
        img[N + p] = g;
        img[2 * N + p] = b;
    }
}

fn at(plane: &[f64], y: isize, x: isize) -> f64 {
    let y = y.clamp(0, SIDE as isize - 1) as usize;
    let x = x.clamp(0, SIDE as isize - 1) as usize;
    plane[y * SIDE + x]
}

/// Separable symmetric filter with replicated borders.
fn separable(img: &mut [f64], taps: &[f64]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; N];
    for plane in img.chunks_mut(N) {
        for y in 0..SIDE as isize {
            for x in 0..SIDE as isize {
                tmp[y as usize * SIDE + x as usize] =
                    taps.iter().enumerate().map(|(i, w)| w * at(plane, y, x + i as isize - r)).sum();
            }
        }
        for y in 0..SIDE as isize {
            for x in 0..SIDE as isize {
                plane[y as usize * SIDE + x as usize] =
                    taps.iter().enumerate().map(|(i, w)| w * at(&tmp, y + i as isize - r, x)).sum();
            }
        }
    }
}

fn box_taps(radius: f64) -> Vec<f64> {
    let full = radius.floor() as usize;
    let frac = radius - full as f64;
    let half = if frac > 0.0 { full + 1 } else { full };
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| if (i as isize - half as isize).unsigned_abs() <= full { 1.0 } else { frac })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn bilinear(plane: &[f64], y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    (1.0 - fy) * ((1.0 - fx) * at(plane, y0, x0) + fx * at(plane, y0, x0 + 1))
        + fy * ((1.0 - fx) * at(plane, y0 + 1, x0) + fx * at(plane, y0 + 1, x0 + 1))
}

fn motion_blur(img: &mut [f64], length: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let half = (length as f64 - 1.0) / 2.0;
    for plane in img.chunks_mut(N) {
        let src = plane.to_vec();
        for y in 0..SIDE {
            for x in 0..SIDE {
                let mut acc = 0.0;
                for t in 0..length {
                    let d = t as f64 - half;
                    acc += bilinear(&src, y as f64 + d * s, x as f64 + d * c);
                }
                plane[y * SIDE + x] = acc / length as f64;
            }
        }
    }
}

fn pixelate(img: &mut [f64], side: usize) {
    let cell = |p: usize| p * side / SIDE;
    for plane in img.chunks_mut(N) {
        let mut sum = vec![0.0; side * side];
        let mut count = vec![0usize; side * side];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let k = cell(y) * side + cell(x);
                sum[k] += plane[y * SIDE + x];
                count[k] += 1;
            }
        }
        for y in 0..SIDE {
            for x in 0..SIDE {
                let k = cell(y) * side + cell(x);
                plane[y * SIDE + x] = sum[k] / count[k] as f64;
            }
        }
    }
}

fn corrupt_one(img: &mut [f64], spec: CorruptionSpec, rng: &mut impl Rng) {
    let l = spec.level();
    match spec.kind {
        CorruptionKind::Clean => {}
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_NOISE_SIGMA[l];
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        CorruptionKind::ShotNoise => {
            let photons = SHOT_NOISE_PHOTONS[l];
            for v in img.iter_mut() {
                let lambda = *v * photons;
                *v = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(rng) / photons
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            let amount = IMPULSE_NOISE_AMOUNT[l];
            for v in img.iter_mut() {
                if rng.random::<f64>() < amount {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::BoxBlur => separable(img, &box_taps(BOX_BLUR_RADIUS[l])),
        CorruptionKind::MotionBlur => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            motion_blur(img, MOTION_BLUR_LENGTH[l], angle);
        }
        CorruptionKind::Brightness => {
            let b = BRIGHTNESS_SHIFT[l];
            map_hsv(img, |[h, s, v]| [h, s, (v + b).clamp(0.0, 1.0)]);
        }
        CorruptionKind::Contrast => {
            let c = CONTRAST_FACTOR[l];
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            img.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
        }
        CorruptionKind::Pixelate => pixelate(img, PIXELATE_SIDE[l]),
        CorruptionKind::SpeckleNoise => {
            let c = SPECKLE_NOISE_SCALE[l];
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += *v * z * c;
            }
        }
        CorruptionKind::Saturate => {
            let (a, b) = SATURATE[l];
            map_hsv(img, |[h, s, v]| [h, (s * a + b).clamp(0.0, 1.0), v]);
        }
        CorruptionKind::GaussianBlur => separable(img, &gaussian_taps(GAUSSIAN_BLUR_SIGMA[l])),
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Corrupts every image of a `[B, 3, 32, 32]` batch; deterministic in `seed`.
pub fn apply_corruption<T: Scalar>(images: &Tensor<T>, spec: CorruptionSpec, seed: u64) -> Result<Tensor<T>> {
    spec.validate()?;
    if images.rank() != 4 || images.shape()[1..] != [CHANNELS, SIDE, SIDE] {
        return Err(Error::shape(format!("corruption expects [B, 3, 32, 32], got {:?}", images.shape())));
    }
    if spec.kind == CorruptionKind::Clean {
        return Ok(images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.numel());
    let mut buf = vec![0.0f64; PIXELS];
    for img in images.data().chunks(PIXELS) {
        buf.iter_mut().zip(img).for_each(|(b, v)| *b = v.f64());
        corrupt_one(&mut buf, spec, &mut rng);
        out.extend(buf.iter().map(|&v| T::c(v)));
    }
    Tensor::new(images.shape().to_vec(), out)
}
