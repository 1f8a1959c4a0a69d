//! Seeded synthetic images and clips for tests, demos and desk-scale runs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{flow_file_name, FlowField};
use crate::image_io::rgb_to_tensor;
use crate::tensor::{Float, Tensor};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn random_colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A "photo": smooth background gradient with a handful of flat shapes.
pub fn content_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (random_colour(&mut rng), random_colour(&mut rng));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        let t = 0.5 + 0.5 * ((x as f64 / width as f64 - 0.5) * ca + (y as f64 / height as f64 - 0.5) * sa);
        Rgb(std::array::from_fn(|c| to_u8(c0[c] * (1.0 - t) + c1[c] * t)))
    });
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = random_colour(&mut rng).map(to_u8);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(0.08..0.3) * width.min(height) as f64;
        let circle = rng.random_bool(0.5);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = if circle { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= 0.6 * r };
            if inside {
                *p = Rgb(col);
            }
        }
    }
    img
}

/// A "painting": one of several procedural textures with a random palette.
pub fn style_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57_1e);
    let palette = [random_colour(&mut rng), random_colour(&mut rng), random_colour(&mut rng)];
    let kind = seed % 4;
    let freq = rng.random_range(0.08..0.35);
    let angle = rng.random_range(0.0..PI);
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    RgbImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let t = match kind {
            0 => 0.5 + 0.5 * (freq * (xf * angle.cos() + yf * angle.sin())).sin(),
            1 => (((xf * freq / 2.0).floor() + (yf * freq / 2.0).floor()) as i64).rem_euclid(2) as f64,
            2 => {
                let s = (freq * xf + phases[0]).sin() + (freq * 1.3 * yf + phases[1]).sin()
                    + (freq * 0.7 * (xf + yf) + phases[2]).sin();
                (s / 6.0 + 0.5).clamp(0.0, 1.0)
            }
            _ => {
                let period = (4.0 / freq).max(3.0);
                let (u, v) = (xf % period - period / 2.0, yf % period - period / 2.0);
                ((u * u + v * v).sqrt() < period / 3.0) as u8 as f64
            }
        };
        let mix = |a: [f64; 3], b: [f64; 3], t: f64| -> [f64; 3] { std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t) };
        let base = mix(palette[0], palette[1], t);
        let grain = 0.5 + 0.5 * ((xf * 0.9 + phases[0]).sin() * (yf * 1.1 + phases[1]).cos());
        let col = mix(base, palette[2], 0.25 * grain);
        Rgb(col.map(to_u8))
    })
}

/// Writes `n_content` content and `n_style` style PNGs under `root` and
/// returns `(content_dir, style_dir)`.
pub fn write_dataset(
    root: &Path,
    n_content: usize,
    n_style: usize,
    size: (u32, u32),
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    let (cdir, sdir) = (root.join("content"), root.join("style"));
    for d in [&cdir, &sdir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let save = |img: RgbImage, path: PathBuf| img.save(&path).map_err(|source| Error::Image { path, source });
    for i in 0..n_content {
        save(content_image(seed * 1000 + i as u64, size.0, size.1), cdir.join(format!("content_{i:03}.png")))?;
    }
    for i in 0..n_style {
        save(style_image(seed * 1000 + i as u64, size.0, size.1), sdir.join(format!("style_{i:03}.png")))?;
    }
    Ok((cdir, sdir))
}

/// Smooth multi-scale texture used as the scene of a synthetic clip.
fn scene(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, usize)> = (0..9)
        .map(|i| {
            let a = rng.random_range(0.0..2.0 * PI);
            let f = rng.random_range(0.05..0.4);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..2.0 * PI), i % 3)
        })
        .collect();
    let base = content_image(seed.wrapping_add(17), width, height);
    RgbImage::from_fn(width, height, |x, y| {
        let mut v = [0.0; 3];
        for &(fx, fy, ph, c) in &waves {
            v[c] += (fx * x as f64 + fy * y as f64 + ph).sin() / 3.0;
        }
        let b = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| to_u8(0.6 * b[c] as f64 / 255.0 + 0.2 + 0.2 * v[c])))
    })
}

/// A clip of a texture translating by a whole number of pixels per frame,
/// with exact flows.
pub struct TranslatingClip {
    pub frames: Vec<RgbImage>,
    /// Scene motion per frame; the camera window moves by this each frame.
    pub velocity: (i32, i32),
}

impl TranslatingClip {
    pub fn new(seed: u64, frames: usize, width: u32, height: u32, velocity: (i32, i32)) -> Self {
        let (vx, vy) = velocity;
        let span = |v: i32| (v.unsigned_abs() as usize * frames.saturating_sub(1)) as u32;
        let canvas = scene(seed, width + span(vx), height + span(vy));
        let origin = |v: i32, t: usize, span: u32| -> u32 {
            if v >= 0 {
                (v as usize * t) as u32
            } else {
                span - (v.unsigned_abs() as usize * t) as u32
            }
        };
        let frames = (0..frames)
            .map(|t| {
                let (ox, oy) = (origin(vx, t, span(vx)), origin(vy, t, span(vy)));
                image::imageops::crop_imm(&canvas, ox, oy, width, height).to_image()
            })
            .collect();
        Self { frames, velocity }
    }

    pub fn tensors<T: Float>(&self) -> Vec<Tensor<T>> {
        self.frames.iter().map(rgb_to_tensor).collect()
    }

    /// Ground-truth flow for `t -> t + interval`: frame `t + interval` at
    /// `(y, x)` shows what frame `t` shows at `(y + i*vy, x + i*vx)`.
    pub fn flow(&self, interval: usize) -> FlowField {
        let (w, h) = self.frames[0].dimensions();
        let i = interval as f32;
        FlowField::constant(w as usize, h as usize, i * self.velocity.0 as f32, i * self.velocity.1 as f32)
    }

    /// Writes frames as `frame_0000.png`, ... and flows for each interval.
    pub fn write(&self, frame_dir: &Path, flow_dir: &Path, intervals: &[usize]) -> Result<()> {
        for d in [frame_dir, flow_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (t, f) in self.frames.iter().enumerate() {
            let path = frame_dir.join(format!("frame_{t:04}.png"));
            f.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        for &i in intervals {
            let flow = self.flow(i);
            for t in 0..self.frames.len().saturating_sub(i) {
                flow.write_flo(&flow_dir.join(flow_file_name(t, t + i)))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{temporal_loss, TEMPORAL_SCALE};

    #[test]
    fn generators_are_seeded() {
        assert_eq!(content_image(3, 20, 10), content_image(3, 20, 10));
        assert_ne!(content_image(3, 20, 10), content_image(4, 20, 10));
        assert_eq!(style_image(1, 16, 16), style_image(1, 16, 16));
    }

    #[test]
    fn clip_flows_are_exact() {
        for velocity in [(1, 0), (-2, 1)] {
            let clip = TranslatingClip::new(9, 12, 24, 16, velocity);
            let frames: Vec<Tensor<f64>> = clip.tensors();
            for interval in [1, 10] {
                for t in 0..frames.len() - interval {
                    let l = temporal_loss(&frames[t], &frames[t + interval], &clip.flow(interval)).unwrap().unwrap();
                    assert!(l * TEMPORAL_SCALE < 1e-12, "{velocity:?} {interval} {t}: {l}");
                }
            }
            assert!(temporal_loss(&frames[0], &frames[1], &FlowField::zeros(24, 16)).unwrap().unwrap() > 0.0);
        }
    }
}
