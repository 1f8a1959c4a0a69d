//! Image files <-> `[1, 3, H, W]` tensors with values in [0, 1].

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// PNG/JPEG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn rgb_to_tensor<T: Float>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let scale = 1.0 / 255.0;
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_f64_lossy(raw[p * 3 + c] as f64 * scale)
    })
}

/// Item `item` of an `[N, 3, H, W]` tensor, clamped to [0, 1] and rounded.
pub fn tensor_to_rgb<T: Float>(t: &Tensor<T>, item: usize) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4();
    if c != 3 || item >= n {
        return Err(Error::Shape(format!("cannot export item {item} of {:?} as RGB", t.shape())));
    }
    let plane = h * w;
    let base = item * 3 * plane;
    let data = t.data();
    let mut raw = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            let v = data[base + ch * plane + p].to_f64_lossy();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            raw.push((v * 255.0).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims"))
}

pub fn load_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    Ok(rgb_to_tensor(&load_rgb(path)?))
}

pub fn save_png<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_rgb(t, 0)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        let path = dir.path().join("x.png");
        save_png(&t, &path).unwrap();
        let back: Tensor<f32> = load_tensor(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(list_images(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn export_clamps() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 1], vec![-0.5, 2.0, f32::NAN]).unwrap();
        assert_eq!(tensor_to_rgb(&t, 0).unwrap().as_raw(), &vec![0, 255, 0]);
    }
}
