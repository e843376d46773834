//! Image I/O, paired datasets, synthetic noise, crops, and augmentations.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Aligned noisy/clean images, both [1,3,H,W] in [0,1].
#[derive(Clone)]
pub struct ImagePair {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    PoissonGaussian,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub poisson_scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Gaussian, sigma, poisson_scale: 0.0, seed }
    }
}

/// Strict 8-bit RGB PNG → [1,3,H,W] tensor with v/255 mapping.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: expected 8-bit RGB, got {other:?} pixels",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![0f32; shape.numel()];
    for (j, i, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[shape.idx(0, c, i as usize, j as usize)] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(shape, data))
}

/// Clamp to [0,1], quantize round-half-up to 8 bits, write PNG.
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::InvalidInput(format!("save_image wants [1,3,H,W], got {s}")));
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(s.w as u32, s.h as u32);
    for (j, i, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.data()[s.idx(0, c, i as usize, j as usize)].clamp(0.0, 1.0);
            // f32::round is half-away-from-zero, i.e. half-up for v ≥ 0
            px.0[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Standard normal from a counter-based generator keyed by
/// (seed, image id, element index): order-independent, deterministic.
fn counter_gauss(seed: u64, id_hash: u64, idx: u64) -> f64 {
    let key = splitmix64(seed ^ splitmix64(id_hash ^ splitmix64(idx)));
    let a = splitmix64(key);
    let b = splitmix64(a);
    // map to (0,1]; u1 must avoid 0 for the log
    let u1 = (a >> 11) as f64 / (1u64 << 53) as f64 + f64::MIN_POSITIVE;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Additive noise; unclamped (clamping happens only at save).
pub fn add_noise(clean: &Tensor<f32>, spec: &NoiseSpec, image_id: &str) -> Tensor<f32> {
    let id_hash = hash_str(image_id);
    let data: Vec<f32> = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let z = counter_gauss(spec.seed, id_hash, i as u64);
            let std = match spec.kind {
                NoiseKind::Gaussian => spec.sigma,
                NoiseKind::PoissonGaussian => {
                    (spec.sigma * spec.sigma + spec.poisson_scale * v.max(0.0) as f64).sqrt()
                }
            };
            v + (std * z) as f32
        })
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let s = t.shape();
    let out = Shape::new(s.n, s.c, size, size);
    let mut data = vec![0f32; out.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..size {
                for j in 0..size {
                    data[out.idx(n, c, i, j)] = t.data()[s.idx(n, c, top + i, left + j)];
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Same random window cut from both images.
pub fn random_crop_pair<R: Rng>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    let s = pair.clean.shape();
    if s.h < size || s.w < size {
        return Err(Error::InvalidInput(format!("image {s} smaller than crop {size}")));
    }
    let top = rng.gen_range(0..=s.h - size);
    let left = rng.gen_range(0..=s.w - size);
    Ok(ImagePair {
        noisy: crop(&pair.noisy, top, left, size),
        clean: crop(&pair.clean, top, left, size),
        id: pair.id.clone(),
    })
}

fn permute(t: &Tensor<f32>, hflip: bool, vflip: bool, k: u8) -> Tensor<f32> {
    let s = t.shape();
    let (oh, ow) = if k % 2 == 1 { (s.w, s.h) } else { (s.h, s.w) };
    let out = Shape::new(s.n, s.c, oh, ow);
    let mut data = vec![0f32; out.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    let (fi, fj) = (
                        if vflip { s.h - 1 - i } else { i },
                        if hflip { s.w - 1 - j } else { j },
                    );
                    // counter-clockwise quarter turns of the flipped image
                    let (oi, oj) = match k % 4 {
                        0 => (fi, fj),
                        1 => (s.w - 1 - fj, fi),
                        2 => (s.h - 1 - fi, s.w - 1 - fj),
                        _ => (fj, s.h - 1 - fi),
                    };
                    data[out.idx(n, c, oi, oj)] = t.data()[s.idx(n, c, i, j)];
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Identical flips/rotation applied to both images.
pub fn augment_with(pair: &ImagePair, hflip: bool, vflip: bool, k: u8) -> ImagePair {
    ImagePair {
        noisy: permute(&pair.noisy, hflip, vflip, k),
        clean: permute(&pair.clean, hflip, vflip, k),
        id: pair.id.clone(),
    }
}

/// Coin-flip hflip/vflip plus uniform k·90° rotation.
pub fn augment_pair<R: Rng>(pair: &ImagePair, rng: &mut R) -> ImagePair {
    let hflip: bool = rng.gen();
    let vflip: bool = rng.gen();
    let k: u8 = rng.gen_range(0..4);
    augment_with(pair, hflip, vflip, k)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub id: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Match root/noisy/NAME.png with root/clean/NAME.png; orphans are
/// reported on stderr and skipped, an empty result is an error.
pub fn scan_pair_dir(root: &Path) -> Result<Vec<PairPaths>> {
    let (noisy_dir, clean_dir) = (root.join("noisy"), root.join("clean"));
    let noisy = png_names(&noisy_dir)?;
    let clean = png_names(&clean_dir)?;
    let clean_set: std::collections::BTreeSet<&String> = clean.iter().collect();
    let noisy_set: std::collections::BTreeSet<&String> = noisy.iter().collect();
    for orphan in noisy.iter().filter(|n| !clean_set.contains(n)) {
        eprintln!("warning: {orphan}.png has no clean counterpart, skipping");
    }
    for orphan in clean.iter().filter(|n| !noisy_set.contains(n)) {
        eprintln!("warning: {orphan}.png has no noisy counterpart, skipping");
    }
    let pairs: Vec<PairPaths> = noisy
        .iter()
        .filter(|n| clean_set.contains(n))
        .map(|n| PairPaths {
            id: n.clone(),
            noisy: noisy_dir.join(format!("{n}.png")),
            clean: clean_dir.join(format!("{n}.png")),
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    Ok(pairs)
}

pub fn load_pair(paths: &PairPaths) -> Result<ImagePair> {
    let noisy = load_image(&paths.noisy)?;
    let clean = load_image(&paths.clean)?;
    if noisy.shape() != clean.shape() {
        return Err(Error::ShapeMismatch {
            ctx: "noisy vs clean pair",
            left: noisy.shape(),
            right: clean.shape(),
        });
    }
    Ok(ImagePair { noisy, clean, id: paths.id.clone() })
}

/// Procedural clean patches: smooth ramps, soft disks, and hard-edged
/// rectangles — enough gradient structure for the denoiser to learn from.
pub fn synthetic_clean(index: u64, seed: u64, hw: usize) -> Tensor<f32> {
    let shape = Shape::new(1, 3, hw, hw);
    let mut data = vec![0f32; shape.numel()];
    let base = splitmix64(seed.wrapping_mul(0x9e37).wrapping_add(index));
    let unit = |x: u64| (x >> 11) as f64 / (1u64 << 53) as f64;
    let r = |salt: u64| unit(splitmix64(base ^ salt));
    for c in 0..3 {
        let cs = c as u64;
        // oriented ramp background
        let (gx, gy) = (r(cs * 7 + 1) - 0.5, r(cs * 7 + 2) - 0.5);
        let off = 0.25 + 0.5 * r(cs * 7 + 3);
        for i in 0..hw {
            for j in 0..hw {
                let v = off
                    + gx * (j as f64 / hw as f64 - 0.5)
                    + gy * (i as f64 / hw as f64 - 0.5);
                data[shape.idx(0, c, i, j)] = v as f32;
            }
        }
    }
    // shared shapes across channels with per-channel tint
    for s_idx in 0..4u64 {
        let cx = r(100 + s_idx * 9) * hw as f64;
        let cy = r(101 + s_idx * 9) * hw as f64;
        let half = (0.08 + 0.17 * r(102 + s_idx * 9)) * hw as f64;
        let circle = r(103 + s_idx * 9) < 0.5;
        for c in 0..3 {
            let tint = (0.15 + 0.7 * r(104 + s_idx * 9 + c as u64)) as f32;
            for i in 0..hw {
                for j in 0..hw {
                    let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                    let inside = if circle {
                        dx * dx + dy * dy <= half * half
                    } else {
                        dx.abs() <= half && dy.abs() <= half
                    };
                    if inside {
                        data[shape.idx(0, c, i, j)] = tint;
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(shape, data)
}

/// Noisy/clean pairs from the procedural generator.
pub fn synthetic_dataset(n: usize, hw: usize, spec: &NoiseSpec, seed: u64) -> Vec<ImagePair> {
    (0..n)
        .map(|i| {
            let id = format!("synthetic_{i:04}");
            let clean = synthetic_clean(i as u64, seed, hw);
            let noisy = add_noise(&clean, spec, &id);
            ImagePair { noisy, clean, id }
        })
        .collect()
}
