//! Image folders to fixed-size Lab samples, plus a synthetic toy set.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::colorspace::{rgb_to_lab, ColorError, LabImage, RgbImage, StorageImage};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("no readable images in {0}")]
    Empty(PathBuf),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub lab: LabImage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_images(&self) -> Vec<LabImage> {
        self.train.iter().map(|s| s.lab.clone()).collect()
    }

    pub fn val_images(&self) -> Vec<LabImage> {
        self.val.iter().map(|s| s.lab.clone()).collect()
    }
}

/// True when `name` belongs to the validation split.
///
/// The first eight bytes of SHA-256(name) are read as a fraction of 2^64.
pub fn is_validation(name: &str, val_fraction: f64) -> bool {
    let digest = Sha256::digest(name.as_bytes());
    let head = u64::from_be_bytes(digest[..8].try_into().unwrap());
    (head as f64 / 2f64.powi(64)) < val_fraction
}

/// Center-crops to a square and resizes bilinearly to `size x size`.
pub fn prepare_image(img: &image::RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let crop = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = image::imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
    let data = resized.into_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    RgbImage::new(size, size, data).expect("resize output has the requested size")
}

/// Loads every decodable image in `dir` (sorted by file name).
///
/// Unreadable files are skipped with a warning; an empty result is an error.
pub fn ingest_dataset(dir: impl AsRef<Path>, size: usize, val_fraction: f64) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(DatasetError::MissingDir(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Dataset::default();
    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if img.width() == 0 || img.height() == 0 {
            log::warn!("skipping {}: empty image", path.display());
            continue;
        }
        let lab = rgb_to_lab(&prepare_image(&img, size))?;
        let sample = Sample { name: name.clone(), lab };
        if is_validation(&name, val_fraction) {
            out.val.push(sample);
        } else {
            out.train.push(sample);
        }
    }
    if out.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()));
    }
    Ok(out)
}

/// Smooth random color fields with mild pixel noise, kept well inside the
/// RGB cube.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    (0..count)
        .map(|_| {
            let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
            let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]);
            let blob = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let blob_color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
            let radius = rng.gen_range(0.15..0.4);
            let mut pixels = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 + 0.5) / size as f64;
                    let v = (y as f64 + 0.5) / size as f64;
                    let d2 = (u - blob[0]).powi(2) + (v - blob[1]).powi(2);
                    let bump = (-d2 / (2.0 * radius * radius)).exp();
                    for ch in 0..3 {
                        let value = base[ch]
                            + grad[ch][0] * (u - 0.5)
                            + grad[ch][1] * (v - 0.5)
                            + blob_color[ch] * bump
                            + noise.sample(&mut rng);
                        pixels.push(value.clamp(0.1, 0.9));
                    }
                }
            }
            RgbImage::new(size, size, pixels).unwrap()
        })
        .collect()
}

/// The synthetic set in Lab form.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<LabImage> {
    synthetic_images(count, size, seed)
        .iter()
        .map(|img| rgb_to_lab(img).expect("synthetic images are finite"))
        .collect()
}

/// Writes the synthetic set as numbered PNGs (after 8-bit quantization).
pub fn write_synthetic_pngs(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    synthetic_images(count, size, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("img_{i:04}.png"));
            crate::colorspace::quantize_to_storage(img).write_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Reads a host PNG and keeps only its luminance plane.
pub fn read_host(path: impl AsRef<Path>) -> Result<LabImage, ColorError> {
    let storage = StorageImage::read_png(path)?;
    rgb_to_lab(&storage.to_working())
}
