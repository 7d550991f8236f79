//! Image/mask I/O, dataset splits, preprocessing and a synthetic lesion
//! generator.
//!
//! Layout: `root/images/<id>.png` (RGB), `root/masks/<id>.png` (grayscale),
//! and `train.txt` / `val.txt` / `test.txt` with one id per line.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, resize_nearest};
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, in `[0, 1]` before preprocessing.
    pub image: Tensor<f32>,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

impl DatasetSplit {
    /// Reads the split files under `root`; without any split file every
    /// image id becomes a training id.
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::NotFound(root.to_path_buf()));
        }
        let mut split = DatasetSplit {
            root: root.to_path_buf(),
            train: read_ids(&root.join("train.txt"))?,
            val: read_ids(&root.join("val.txt"))?,
            test: read_ids(&root.join("test.txt"))?,
        };
        if split.train.is_empty() && split.val.is_empty() && split.test.is_empty() {
            split.train = list_ids(&root.join("images"))?;
        }
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidDataset(format!("id {id} appears in more than one split")));
            }
            let img = image_path(&self.root, id);
            if !img.exists() {
                return Err(Error::NotFound(img));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        write_ids(&self.root.join("train.txt"), &self.train)?;
        write_ids(&self.root.join("val.txt"), &self.val)?;
        write_ids(&self.root.join("test.txt"), &self.test)
    }
}

/// Sorted ids of the PNG files in a directory.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let corrupt = |reason: String| Error::CorruptImage {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| corrupt(e.to_string()))
}

/// RGB image scaled to `[0, 1]`, shaped `[3, H, W]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Grayscale mask binarized at 128, shaped `[1, H, W]`.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Loads `images/<id>.png` and, when present, `masks/<id>.png`.
pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let image = load_image(&image_path(root, id))?;
    let mp = mask_path(root, id);
    let mask = if mp.exists() { Some(load_mask(&mp)?) } else { None };
    if let Some(m) = &mask {
        if m.shape()[1..] != image.shape()[1..] {
            return Err(Error::InvalidSample(format!(
                "{id}: image {:?} vs mask {:?}",
                &image.shape()[1..],
                &m.shape()[1..]
            )));
        }
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}

/// Per-channel zero mean and unit variance (variance floored at 1e-6).
pub fn standardize(image: &Tensor<f32>) -> Tensor<f32> {
    let c = image.shape()[0];
    let plane = image.numel() / c;
    let mut out = image.clone();
    for ch in out.data_mut().chunks_mut(plane) {
        let n = plane as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.max(1e-6).sqrt();
        for v in ch.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
    out
}

/// Resizes (bilinear image, nearest mask) and standardizes the image.
pub fn preprocess(sample: &Sample, size: usize) -> Result<Sample> {
    let resize = |t: &Tensor<f32>, bilinear: bool| -> Result<Tensor<f32>> {
        if t.shape()[1] == size && t.shape()[2] == size {
            Ok(t.clone())
        } else if bilinear {
            resize_bilinear(t, size, size)
        } else {
            resize_nearest(t, size, size)
        }
    };
    Ok(Sample {
        id: sample.id.clone(),
        image: standardize(&resize(&sample.image, true)?),
        mask: sample.mask.as_ref().map(|m| resize(m, false)).transpose()?,
    })
}

/// Loads and preprocesses a list of ids.
pub fn load_set(root: &Path, ids: &[String], size: usize) -> Result<Vec<Sample>> {
    ids.iter().map(|id| preprocess(&load_sample(root, id)?, size)).collect()
}

/// Writes `mask_probs` (`[1, H, W]`) as 0/255 where `p >= threshold`.
pub fn save_mask(mask_probs: &Tensor<f32>, path: &Path, threshold: f64) -> Result<()> {
    let [_, h, w]: [usize; 3] = mask_probs
        .shape()
        .try_into()
        .map_err(|_| Error::InvalidShape(format!("mask must be [1,H,W], got {:?}", mask_probs.shape())))?;
    let thr = threshold as f32;
    let buf = mask_probs
        .data()
        .iter()
        .map(|&p| if p >= thr { 255u8 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches extents");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    })
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    })
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut StreamRng, size: f64, scale: f64) -> Self {
        let a = size * scale * rng.random_range(0.8..1.25);
        let b = a * rng.random_range(0.6..1.0);
        let margin = a.max(b) * 0.6;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius: < 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Approximate signed distance to the boundary in pixels, positive inside.
    fn inset(&self, x: f64, y: f64) -> f64 {
        (1.0 - self.radius(x, y)) * (self.a * self.b).sqrt()
    }
}

fn synth_one(rng: &mut StreamRng, size: usize) -> (RgbImage, GrayImage) {
    let s = size as f64;
    loop {
        let count = if rng.random_bool(0.3) { 2 } else { 1 };
        let scale = if count == 1 {
            rng.random_range(0.14..0.3)
        } else {
            rng.random_range(0.1..0.2)
        };
        let lesions: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(rng, s, scale)).collect();
        let mut mask = GrayImage::new(size as u32, size as u32);
        let mut inside = 0usize;
        for (x, y, p) in mask.enumerate_pixels_mut() {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if lesions.iter().any(|e| e.radius(fx, fy) <= 1.0) {
                p[0] = 255;
                inside += 1;
            }
        }
        let frac = inside as f64 / (s * s);
        if !(0.02..=0.4).contains(&frac) {
            continue;
        }

        let skin: [f64; 3] = [
            rng.random_range(0.75..0.92),
            rng.random_range(0.55..0.72),
            rng.random_range(0.45..0.62),
        ];
        let contrast = rng.random_range(0.45..0.75);
        let lesion = [
            skin[0] * (1.0 - contrast),
            skin[1] * (1.0 - contrast * 1.1).max(0.05),
            skin[2] * (1.0 - contrast * 1.05).max(0.05),
        ];
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.01..0.04),
                )
            })
            .collect();
        // edge blur width in pixels, scaled with the image
        let edge = rng.random_range(0.75..2.0) * s / 64.0;
        let mut img = RgbImage::new(size as u32, size as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin())
                .sum();
            let noise = rng.random_range(-0.03..0.03);
            let inset = lesions
                .iter()
                .map(|e| e.inset(fx, fy))
                .fold(f64::NEG_INFINITY, f64::max);
            let alpha = 1.0 / (1.0 + (-inset / edge).exp());
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = skin[c] * (1.0 - alpha) + lesion[c] * alpha + texture + noise;
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            *p = Rgb(px);
        }

        // hair-like quadratic curves drawn over the image only
        let hairs = rng.random_range(0..3usize);
        for _ in 0..hairs {
            let pts: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s)))
                .collect();
            let shade = rng.random_range(0.05..0.25);
            let steps = 4 * size;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let u = 1.0 - t;
                let x = u * u * pts[0].0 + 2.0 * u * t * pts[1].0 + t * t * pts[2].0;
                let y = u * u * pts[0].1 + 2.0 * u * t * pts[1].1 + t * t * pts[2].1;
                let (xi, yi) = (x as u32, y as u32);
                if xi < size as u32 && yi < size as u32 {
                    let v = (shade * 255.0) as u8;
                    img.put_pixel(xi, yi, Rgb([v, v, v]));
                }
            }
        }
        return (img, mask);
    }
}

/// Writes `n` synthetic image/mask pairs under `out_root` and a split with
/// every id in `train.txt`.
pub fn synth_generate(n: usize, size: usize, seed: u64, out_root: &Path) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::InvalidConfig("synthetic dataset needs n >= 1".into()));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!(
            "synthetic image size must be >= 8, got {size}"
        )));
    }
    fs::create_dir_all(out_root.join("images"))?;
    fs::create_dir_all(out_root.join("masks"))?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:04}");
        let mut rng = rng::substream(seed, Purpose::Data, i as u64);
        let (img, mask) = synth_one(&mut rng, size);
        save_rgb(&img, &image_path(out_root, &id))?;
        mask.save(mask_path(out_root, &id))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        ids.push(id);
    }
    let split = DatasetSplit {
        root: out_root.to_path_buf(),
        train: ids,
        val: Vec::new(),
        test: Vec::new(),
    };
    split.save()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_moments_and_idempotence() {
        let img = Tensor::<f32>::make(&[3, 16, 16], crate::tensor::Init::Gaussian(3))
            .unwrap()
            .map(|v| 0.3 * v + 0.5);
        let s = standardize(&img);
        for ch in s.data().chunks(256) {
            let m: f64 = ch.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            assert!(m.abs() < 1e-5);
        }
        let twice = standardize(&s);
        assert!(twice.max_abs_diff(&s) < 1e-6);
    }

    #[test]
    fn nearest_keeps_binarity() {
        let mask = Tensor::<f32>::from_vec(&[1, 4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        let sample = Sample {
            id: "x".into(),
            image: Tensor::full(&[3, 4, 4], 0.5),
            mask: Some(mask),
        };
        let p = preprocess(&sample, 2).unwrap();
        assert!(p.mask.unwrap().data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(p.image.data().iter().all(|&v| v == 0.0));
    }
}
