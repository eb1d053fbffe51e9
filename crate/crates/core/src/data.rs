//! Synthetic domain-shift datasets.
//!
//! Every class is a shape family drawn with random placement, scale, colours
//! and pixel noise. Source and target share the class templates; the target
//! domain additionally goes through the configured shift. Each sample is
//! rendered from its own generator keyed by `(seed, id)`, so a split is a pure
//! function of its configuration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Rotation,
    ColorInvert,
    HueShift,
    NoiseTexture,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(Self::Rotation),
            "color-invert" => Ok(Self::ColorInvert),
            "hue-shift" => Ok(Self::HueShift),
            "noise-texture" => Ok(Self::NoiseTexture),
            other => Err(Error::Config(format!(
                "unknown shift_kind `{other}` (expected rotation, color-invert, hue-shift or noise-texture)"
            ))),
        }
    }
}

impl ShiftKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rotation => "rotation",
            Self::ColorInvert => "color-invert",
            Self::HueShift => "hue-shift",
            Self::NoiseTexture => "noise-texture",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub shots: usize,
    pub n_source: usize,
    pub n_unlabeled: usize,
    /// Extra labelled target samples kept out of adaptation, for held-out evaluation.
    pub n_holdout: usize,
    pub shift_kind: ShiftKind,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 32,
            patch_size: 4,
            channels: 3,
            shots: 1,
            n_source: 400,
            n_unlabeled: 400,
            n_holdout: 0,
            shift_kind: ShiftKind::ColorInvert,
            seed: 7,
        }
    }
}

impl ShiftConfig {
    pub fn n_target_labeled(&self) -> usize {
        self.shots * self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.shots < 1 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config("the generator renders RGB images (channels = 3)".into()));
        }
        if self.n_unlabeled < 10 * self.n_target_labeled() {
            return Err(Error::Config(format!(
                "n_unlabeled {} must be at least 10x the {} labelled target samples",
                self.n_unlabeled,
                self.n_target_labeled()
            )));
        }
        if self.n_source < self.num_classes {
            return Err(Error::Config("n_source must cover every class".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: u64,
    /// `[channels, H, W]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub label: Option<usize>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub source: Vec<Sample<T>>,
    pub target_labeled: Vec<Sample<T>>,
    pub target_unlabeled: Vec<Sample<T>>,
    /// Ground truth of `target_unlabeled`, index-aligned; evaluation only.
    pub unlabeled_truth: Vec<usize>,
    /// Labelled target samples never used for adaptation.
    pub target_holdout: Vec<Sample<T>>,
    pub num_classes: usize,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn shots_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.target_labeled {
            if let Some(l) = s.label {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Weak (original) and strong views of one unlabelled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair<T> {
    pub id: u64,
    pub weak: Tensor<T>,
    pub strong: Tensor<T>,
}

/// Stacks `[C, H, W]` images into a `[B, C, H, W]` batch.
pub fn stack_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s != img.shape() => {
                return Err(Error::Shape(format!("cannot stack {:?} with {s:?}", img.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.unwrap_or_default());
    Tensor::from_vec(&full, data)
}

/// Independent generator stream for `(seed, stream, index)`.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [stream, index] {
        s = splitmix(s ^ v.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    }
    ChaCha8Rng::seed_from_u64(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const RENDER_STREAM: u64 = 1;

/// Share of samples in every domain rendered with inverted polarity, so that a
/// colour-inverted target still overlaps the source support.
const MINORITY_POLARITY: f64 = 0.2;

/// Generates source, labelled target, unlabelled target and holdout samples.
pub fn generate_synthetic_shift<T: Scalar>(config: &ShiftConfig) -> Result<DatasetSplit<T>> {
    config.validate()?;
    let c = config.num_classes;
    let mut next_id = 0u64;
    let mut make = |count: usize, domain: Domain, labelled: bool| {
        let mut out = Vec::with_capacity(count);
        let mut truth = Vec::with_capacity(count);
        for i in 0..count {
            let id = next_id;
            next_id += 1;
            let class = i % c;
            let mut rng = derive_rng(config.seed, RENDER_STREAM, id);
            let img = render(config, class, domain, &mut rng);
            out.push(Sample {
                id,
                image: img.map(T::from_f64_lossy),
                label: labelled.then_some(class),
                domain,
            });
            truth.push(class);
        }
        (out, truth)
    };
    let (source, _) = make(config.n_source, Domain::Source, true);
    let (target_labeled, _) = make(config.n_target_labeled(), Domain::Target, true);
    let (target_unlabeled, unlabeled_truth) = make(config.n_unlabeled, Domain::Target, false);
    let (target_holdout, _) = make(config.n_holdout, Domain::Target, true);
    Ok(DatasetSplit { source, target_labeled, target_unlabeled, unlabeled_truth, target_holdout, num_classes: c })
}

struct Jitter {
    dx: f64,
    dy: f64,
    scale: f64,
    angle: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn box_sdf(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    (x.abs() - hx).max(y.abs() - hy)
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

/// Signed distance (negative inside) of the class shape at normalised `(x, y)`.
fn class_sdf(class: usize, x: f64, y: f64, blobs: &[(f64, f64)]) -> f64 {
    let r = (x * x + y * y).sqrt();
    match class {
        0 => r - 0.5,
        1 => (r - 0.48).abs() - 0.12,
        2 => box_sdf(x, y, 0.14, 0.62).min(box_sdf(x, y, 0.62, 0.14)),
        3 => {
            let (u, v) = rotate(x, y, PI / 4.0);
            box_sdf(u, v, 0.13, 0.66).min(box_sdf(u, v, 0.66, 0.13))
        }
        4 => {
            // upward triangle as the intersection of three half planes
            let n = [(0.0, -1.0), (0.866, 0.5), (-0.866, 0.5)];
            n.iter().map(|(a, b)| a * x + b * y - 0.3).fold(f64::NEG_INFINITY, f64::max)
        }
        5 => box_sdf(x, y - 0.3, 0.6, 0.12).min(box_sdf(x, y + 0.3, 0.6, 0.12)),
        6 => box_sdf(x - 0.3, y, 0.12, 0.6).min(box_sdf(x + 0.3, y, 0.12, 0.6)),
        7 => box_sdf(x, y, 0.55, 0.55).max(-box_sdf(x, y, 0.35, 0.35)),
        _ => blobs.iter().map(|(bx, by)| ((x - bx).powi(2) + (y - by).powi(2)).sqrt() - 0.22).fold(f64::INFINITY, f64::min),
    }
}

fn class_blobs(class: usize) -> Vec<(f64, f64)> {
    if class < 8 {
        return Vec::new();
    }
    let mut rng = derive_rng(class as u64, 0xB10B, 0);
    (0..3).map(|_| (rng.random_range(-0.55..0.55), rng.random_range(-0.55..0.55))).collect()
}

/// Renders one `[3, S, S]` sample in `f64`.
fn render(config: &ShiftConfig, class: usize, domain: Domain, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = config.image_size;
    let jitter = Jitter {
        dx: rng.random_range(-0.18..0.18),
        dy: rng.random_range(-0.18..0.18),
        scale: rng.random_range(0.8..1.15),
        angle: rng.random_range(-0.2..0.2),
    };
    // warm foreground hues on dark backgrounds in the source domain
    let fg_h = rng.random_range(0.0..0.3);
    let fg = hsv_to_rgb(fg_h, rng.random_range(0.5..1.0), rng.random_range(0.7..1.0));
    let bg = hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.0..0.6), rng.random_range(0.0..0.3));
    let noise = Normal::new(0.0, 0.04).unwrap();
    let shifted = domain == Domain::Target;
    let (fg, bg) = if shifted && config.shift_kind == ShiftKind::HueShift {
        (hsv_shift(fg, 0.5), hsv_shift(bg, 0.5))
    } else {
        (fg, bg)
    };
    let extra_angle = if shifted && config.shift_kind == ShiftKind::Rotation { PI / 4.0 } else { 0.0 };
    let texture = if shifted && config.shift_kind == ShiftKind::NoiseTexture {
        Some((rng.random_range(0.0..PI), rng.random_range(2.0..5.0), rng.random_range(0.0..2.0 * PI)))
    } else {
        None
    };
    let blobs = class_blobs(class);
    let pixel = 2.0 / s as f64;
    let mut out = vec![0.0; 3 * s * s];
    for py in 0..s {
        for px in 0..s {
            let x = (px as f64 + 0.5) * pixel - 1.0;
            let y = (py as f64 + 0.5) * pixel - 1.0;
            let (u, v) = rotate(x - jitter.dx, y - jitter.dy, jitter.angle + extra_angle);
            let d = class_sdf(class, u / jitter.scale, v / jitter.scale, &blobs) * jitter.scale;
            let mask = (0.5 - d / pixel).clamp(0.0, 1.0);
            let tex = texture.map_or(0.0, |(theta, freq, phase)| {
                let (ts, tc) = f64::sin_cos(theta);
                0.25 * (freq * PI * (tc * x + ts * y) + phase).sin()
            });
            for ch in 0..3 {
                let mut val = fg[ch] * mask + (bg[ch] + tex) * (1.0 - mask) + noise.sample(rng);
                if texture.is_some() {
                    val += noise.sample(rng) * 1.5;
                }
                out[(ch * s + py) * s + px] = val.clamp(0.0, 1.0);
            }
        }
    }
    let invert = rng.random_bool(MINORITY_POLARITY) ^ (shifted && config.shift_kind == ShiftKind::ColorInvert);
    if invert {
        out.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    Tensor::from_vec(&[3, s, s], out).unwrap()
}

fn hsv_shift(rgb: [f64; 3], dh: f64) -> [f64; 3] {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == rgb[0] {
        ((rgb[1] - rgb[2]) / delta).rem_euclid(6.0) / 6.0
    } else if max == rgb[1] {
        ((rgb[2] - rgb[0]) / delta + 2.0) / 6.0
    } else {
        ((rgb[0] - rgb[1]) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    hsv_to_rgb(h + dh, s, max)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    split: String,
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    samples: BTreeMap<u64, ManifestEntry>,
}

fn write_png<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize].as_f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes `{split}/{class}/{id}.png` plus `manifest.json` under `dir`.
///
/// Unlabelled samples go to `target_unlabeled/unlabeled/` and keep a null label
/// in the manifest.
pub fn export_split<T: Scalar>(split: &DatasetSplit<T>, dir: &Path) -> Result<()> {
    let mut manifest = Manifest { num_classes: split.num_classes, samples: BTreeMap::new() };
    let groups: [(&str, &[Sample<T>]); 4] = [
        ("source", &split.source),
        ("target_labeled", &split.target_labeled),
        ("target_unlabeled", &split.target_unlabeled),
        ("target_holdout", &split.target_holdout),
    ];
    for (name, samples) in groups {
        for s in samples {
            let class_dir = s.label.map_or_else(|| "unlabeled".to_string(), |l| l.to_string());
            let sub = dir.join(name).join(class_dir);
            fs::create_dir_all(&sub)?;
            write_png(&s.image, &sub.join(format!("{}.png", s.id)))?;
            manifest.samples.insert(s.id, ManifestEntry { split: name.to_string(), label: s.label });
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
