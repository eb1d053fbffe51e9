//! RandAugment-style strong augmentation on `[C, H, W]` images in `[0, 1]`.
//!
//! Each call picks `num_ops` operations uniformly (with replacement) and applies
//! them at a shared magnitude on the usual 0..=30 scale. Signed geometric and
//! enhancement operations flip direction at random.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_MAGNITUDE: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 14] = [
        Self::Identity,
        Self::AutoContrast,
        Self::Equalize,
        Self::Rotate,
        Self::Solarize,
        Self::Color,
        Self::Posterize,
        Self::Contrast,
        Self::Brightness,
        Self::Sharpness,
        Self::ShearX,
        Self::ShearY,
        Self::TranslateX,
        Self::TranslateY,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandAugment {
    pub num_ops: usize,
    pub magnitude: f64,
}

impl Default for RandAugment {
    fn default() -> Self {
        Self { num_ops: 2, magnitude: 9.0 }
    }
}

impl RandAugment {
    pub fn new(num_ops: usize, magnitude: f64) -> Self {
        Self { num_ops, magnitude: magnitude.clamp(0.0, MAX_MAGNITUDE) }
    }

    /// Strong view of `image`; same shape, values clamped to `[0, 1]`.
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, image: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        let mut img: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
        let shape = image.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        for _ in 0..self.num_ops {
            let op = AugmentOp::ALL[rng.random_range(0..AugmentOp::ALL.len())];
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            img = apply_op(op, &img, c, h, w, self.magnitude / MAX_MAGNITUDE, sign);
        }
        let data = img.into_iter().map(|v| T::from_f64_lossy(v.clamp(0.0, 1.0))).collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}

/// Applies one operation at relative strength `level` in `[0, 1]`.
pub fn apply_op(op: AugmentOp, img: &[f64], c: usize, h: usize, w: usize, level: f64, sign: f64) -> Vec<f64> {
    match op {
        AugmentOp::Identity => img.to_vec(),
        AugmentOp::AutoContrast => per_channel(img, c, |ch| {
            let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                ch.to_vec()
            } else {
                ch.iter().map(|v| (v - lo) / (hi - lo)).collect()
            }
        }),
        AugmentOp::Equalize => per_channel(img, c, equalize),
        AugmentOp::Rotate => {
            let a = sign * level * 30f64.to_radians();
            let (s, co) = a.sin_cos();
            warp(img, c, h, w, |x, y| (co * x + s * y, -s * x + co * y))
        }
        AugmentOp::Solarize => {
            let threshold = 1.0 - level;
            img.iter().map(|v| if *v >= threshold { 1.0 - v } else { *v }).collect()
        }
        AugmentOp::Color => {
            let gray = grayscale(img, c, h, w);
            let f = 1.0 + sign * 0.9 * level;
            let hw = h * w;
            img.iter().enumerate().map(|(i, v)| blend(gray[i % hw], *v, f)).collect()
        }
        AugmentOp::Posterize => {
            let bits = 8 - (4.0 * level).round() as u32;
            let levels = (1u32 << bits) as f64;
            img.iter()
                .map(|v| {
                    let q = ((v.clamp(0.0, 1.0) * 255.0).round() as u32) >> (8 - bits);
                    q as f64 * (256.0 / levels) / 255.0
                })
                .collect()
        }
        AugmentOp::Contrast => {
            let gray = grayscale(img, c, h, w);
            let mean = gray.iter().sum::<f64>() / gray.len() as f64;
            let f = 1.0 + sign * 0.9 * level;
            img.iter().map(|v| blend(mean, *v, f)).collect()
        }
        AugmentOp::Brightness => {
            let f = 1.0 + sign * 0.9 * level;
            img.iter().map(|v| blend(0.0, *v, f)).collect()
        }
        AugmentOp::Sharpness => {
            let f = 1.0 + sign * 0.9 * level;
            let smooth = smooth(img, c, h, w);
            img.iter().zip(&smooth).map(|(v, s)| blend(*s, *v, f)).collect()
        }
        AugmentOp::ShearX => {
            let k = sign * 0.3 * level;
            warp(img, c, h, w, |x, y| (x + k * y, y))
        }
        AugmentOp::ShearY => {
            let k = sign * 0.3 * level;
            warp(img, c, h, w, |x, y| (x, y + k * x))
        }
        AugmentOp::TranslateX => {
            let t = sign * 0.45 * level * w as f64;
            warp(img, c, h, w, |x, y| (x - t, y))
        }
        AugmentOp::TranslateY => {
            let t = sign * 0.45 * level * h as f64;
            warp(img, c, h, w, |x, y| (x, y - t))
        }
    }
}

fn blend(base: f64, v: f64, factor: f64) -> f64 {
    (base + factor * (v - base)).clamp(0.0, 1.0)
}

fn per_channel(img: &[f64], c: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let n = img.len() / c;
    img.chunks(n).take(c).flat_map(f).collect()
}

fn grayscale(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    if c < 3 {
        return img[..hw].to_vec();
    }
    (0..hw).map(|i| 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i]).collect()
}

fn equalize(ch: &[f64]) -> Vec<f64> {
    let q: Vec<usize> = ch.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as usize).collect();
    let mut hist = [0usize; 256];
    for &v in &q {
        hist[v] += 1;
    }
    let total = q.len();
    let last_nonzero = hist.iter().rposition(|&n| n > 0).unwrap_or(0);
    let step = (total - hist[last_nonzero]) / 255;
    if step == 0 {
        return ch.to_vec();
    }
    let mut lut = [0f64; 256];
    let mut acc = step / 2;
    for (i, n) in hist.iter().enumerate() {
        lut[i] = ((acc / step).min(255)) as f64 / 255.0;
        acc += n;
    }
    q.iter().map(|&v| lut[v]).collect()
}

fn smooth(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += wgt * img[base + (y + dy - 1) * w + x + dx - 1];
                    }
                }
                out[base + y * w + x] = acc / 13.0;
            }
        }
    }
    out
}

/// Inverse-maps every output pixel through `map` (centred pixel coordinates)
/// and samples bilinearly, filling with black outside the image.
fn warp(img: &[f64], c: usize, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64 - cx, y as f64 - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..c {
                let base = ch * h * w;
                let at = |xx: f64, yy: f64| {
                    if xx < 0.0 || yy < 0.0 || xx > (w - 1) as f64 || yy > (h - 1) as f64 {
                        0.0
                    } else {
                        img[base + yy as usize * w + xx as usize]
                    }
                };
                let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1.0, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1.0) * (1.0 - fx) * fy
                    + at(x0 + 1.0, y0 + 1.0) * fx * fy;
                out[base + y * w + x] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_synthetic_shift, ShiftConfig};

    fn gradient_image() -> Tensor<f64> {
        let data = (0..3 * 16 * 16).map(|i| ((i % 16) as f64 / 15.0 + (i / 256) as f64 * 0.1).min(1.0)).collect();
        Tensor::from_vec(&[3, 16, 16], data).unwrap()
    }

    #[test]
    fn zero_ops_is_identity() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(RandAugment::new(0, 9.0).apply(&img, &mut rng), img);
    }

    #[test]
    fn same_rng_same_output() {
        let img = gradient_image();
        let aug = RandAugment::default();
        let a = aug.apply(&img, &mut ChaCha8Rng::seed_from_u64(11));
        let b = aug.apply(&img, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn every_op_preserves_shape_and_range() {
        let img = gradient_image();
        for op in AugmentOp::ALL {
            for sign in [-1.0, 1.0] {
                let out = apply_op(op, img.data(), 3, 16, 16, 0.3, sign);
                assert_eq!(out.len(), img.len());
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
            }
        }
        let id = apply_op(AugmentOp::Identity, img.data(), 3, 16, 16, 1.0, 1.0);
        assert_eq!(id, img.data());
    }

    #[test]
    fn default_policy_changes_generated_samples() {
        let split = generate_synthetic_shift::<f32>(&ShiftConfig { n_source: 16, n_unlabeled: 40, ..Default::default() }).unwrap();
        let aug = RandAugment::new(2, 9.0);
        for (i, s) in split.source.iter().enumerate() {
            let out = aug.apply(&s.image, &mut ChaCha8Rng::seed_from_u64(i as u64));
            let changed = out.data().iter().zip(s.image.data()).filter(|(a, b)| (**a - **b).abs() > 1e-6).count();
            let frac = changed as f64 / out.len() as f64;
            assert!(frac >= 0.01, "sample {i}: only {frac:.4} of pixels changed");
        }
    }

    proptest! {
        #[test]
        fn output_stays_in_unit_range(seed in any::<u64>(), pixels in prop::collection::vec(0.0f64..=1.0, 3 * 8 * 8), m in 0.0f64..30.0, k in 0usize..4) {
            let img = Tensor::from_vec(&[3, 8, 8], pixels).unwrap();
            let out = RandAugment::new(k, m).apply(&img, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
