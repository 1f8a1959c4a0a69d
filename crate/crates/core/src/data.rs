//! Training images: resize shorter side, random crop, batch.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image_io::{list_images, load_rgb, rgb_to_tensor};
use crate::tensor::{Float, Tensor};

/// Images with more pixels than this many in total are not cached.
const CACHE_PIXEL_BUDGET: usize = 1 << 28;

/// Scales so the shorter side equals `target`, rounding the longer side.
/// 640x480 with target 512 gives 683x512.
pub fn resize_shorter(img: &RgbImage, target: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let short = w.min(h);
    if short == target {
        return img.clone();
    }
    let scale = target as f64 / short as f64;
    let (nw, nh) = if w <= h {
        (target, ((h as f64 * scale).round() as u32).max(target))
    } else {
        (((w as f64 * scale).round() as u32).max(target), target)
    };
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Uniform `crop x crop` window.
pub fn random_crop(img: &RgbImage, crop: u32, rng: &mut impl Rng) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if crop > w || crop > h {
        return Err(Error::Dataset(format!("cannot crop {crop}x{crop} from a {w}x{h} image")));
    }
    let x = rng.random_range(0..=w - crop);
    let y = rng.random_range(0..=h - crop);
    Ok(imageops::crop_imm(img, x, y, crop, crop).to_image())
}

/// A directory of training images, decoded lazily and cached after resizing.
pub struct ImageFolder {
    dir: PathBuf,
    paths: Vec<PathBuf>,
    cache: HashMap<usize, RgbImage>,
    cached_pixels: usize,
    bad: HashSet<usize>,
}

impl ImageFolder {
    pub fn open(dir: &Path) -> Result<Self> {
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no PNG/JPEG images in {}", dir.display())));
        }
        Ok(Self { dir: dir.to_path_buf(), paths, cache: HashMap::new(), cached_pixels: 0, bad: HashSet::new() })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn resized(&mut self, idx: usize, target: u32) -> Option<RgbImage> {
        if let Some(img) = self.cache.get(&idx) {
            return Some(img.clone());
        }
        match load_rgb(&self.paths[idx]) {
            Ok(img) => {
                let img = resize_shorter(&img, target);
                let px = (img.width() * img.height()) as usize;
                if self.cached_pixels + px <= CACHE_PIXEL_BUDGET {
                    self.cached_pixels += px;
                    self.cache.insert(idx, img.clone());
                }
                Some(img)
            }
            Err(e) => {
                log::warn!("skipping undecodable image: {e}");
                self.bad.insert(idx);
                None
            }
        }
    }

    /// A random resized-and-cropped sample, skipping undecodable files.
    pub fn sample(&mut self, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<RgbImage> {
        loop {
            if self.bad.len() == self.paths.len() {
                return Err(Error::Dataset(format!("no decodable images in {}", self.dir.display())));
            }
            let idx = rng.random_range(0..self.paths.len());
            if self.bad.contains(&idx) {
                continue;
            }
            if let Some(img) = self.resized(idx, cfg.resize_shorter_to) {
                return random_crop(&img, cfg.crop, rng);
            }
        }
    }
}

/// Content and style folders sampled independently.
pub struct Dataset {
    pub content: ImageFolder,
    pub style: ImageFolder,
}

impl Dataset {
    pub fn open(content_dir: &Path, style_dir: &Path) -> Result<Self> {
        Ok(Self { content: ImageFolder::open(content_dir)?, style: ImageFolder::open(style_dir)? })
    }

    /// `(content, style)`, each `[batch, 3, crop, crop]`.
    pub fn make_batch<T: Float>(&mut self, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut content = Vec::with_capacity(cfg.batch_size);
        let mut style = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            content.push(rgb_to_tensor(&self.content.sample(cfg, rng)?));
            style.push(rgb_to_tensor(&self.style.sample(cfg, rng)?));
        }
        Ok((Tensor::stack(&content)?, Tensor::stack(&style)?))
    }
}

/// One batch straight from two directories.
pub fn make_batch<T: Float>(
    content_dir: &Path,
    style_dir: &Path,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Dataset::open(content_dir, style_dir)?.make_batch(cfg, rng)
}
