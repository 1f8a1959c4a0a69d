//! Image and frame-by-frame video stylization.

use std::path::{Path, PathBuf};

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::image_io::{list_images, load_tensor, save_png};
use crate::kernels::reflect_index;
use crate::model::SctNet;
use crate::tensor::{Float, Tensor};

/// Smallest side the encoder accepts.
pub const MIN_SIDE: usize = 16;

/// Target size for an `h x w` input: at least [`MIN_SIDE`] and a multiple of
/// `factor`.
pub fn padded_size(h: usize, w: usize, factor: usize) -> (usize, usize) {
    let up = |v: usize| v.max(MIN_SIDE).div_ceil(factor) * factor;
    (up(h), up(w))
}

/// Reflect-pads `[N, C, H, W]` on the bottom and right to `(h2, w2)`.
pub fn reflect_pad_to<T: Float>(t: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4();
    if h2 < h || w2 < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} down to {h2}x{w2}")));
    }
    if (h2, w2) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[n, c, h2, w2], |i| {
        let (plane, p) = (i / (h2 * w2), i % (h2 * w2));
        let (y, x) = (reflect_index((p / w2) as isize, h), reflect_index((p % w2) as isize, w));
        src[plane * h * w + y * w + x]
    }))
}

/// Top-left `h x w` window of `[N, C, H, W]`.
pub fn crop_to<T: Float>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, h0, w0) = t.dims4();
    let src = t.data();
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (plane, p) = (i / (h * w), i % (h * w));
        src[plane * h0 * w0 + (p / w) * w0 + p % w]
    })
}

fn check_mode<T: Float>(model: &SctNet<T>, mode: Mode) -> Result<()> {
    if model.mode() != mode {
        return Err(Error::Config(format!(
            "the checkpoint was trained for {} mode but {mode} mode was requested",
            model.mode()
        )));
    }
    Ok(())
}

/// Stylizes one `[1, 3, H, W]` content image. Both inputs are
/// reflection-padded to sizes the encoder accepts; the output is cropped
/// back to `H x W`. Values are not clamped.
pub fn stylize_image<T: Float>(model: &SctNet<T>, content: &Tensor<T>, style: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    check_mode(model, mode)?;
    for (what, t) in [("content", content), ("style", style)] {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::Shape(format!("{what} image must be [1, 3, H, W], got {s:?}")));
        }
    }
    let f = mode.downsample_factor();
    let (_, _, h, w) = content.dims4();
    let (ph, pw) = padded_size(h, w, f);
    let (_, _, sh, sw) = style.dims4();
    let (psh, psw) = padded_size(sh, sw, f);
    let out = model.generate(&reflect_pad_to(content, ph, pw)?, &reflect_pad_to(style, psh, psw)?)?;
    Ok(crop_to(&out, h, w))
}

/// Stylizes frames independently with a shared style image.
pub fn stylize_frames<T: Float>(
    model: &SctNet<T>,
    frames: &[Tensor<T>],
    style: &Tensor<T>,
    mode: Mode,
) -> Result<Vec<Tensor<T>>> {
    check_frame_sizes(frames.iter().enumerate().map(|(i, f)| (format!("frame {i}"), f.shape()[2], f.shape()[3])))?;
    frames.iter().map(|f| stylize_image(model, f, style, mode)).collect()
}

fn check_frame_sizes(sizes: impl Iterator<Item = (String, usize, usize)>) -> Result<()> {
    let sizes: Vec<_> = sizes.collect();
    let Some((_, h0, w0)) = sizes.first().cloned() else {
        return Ok(());
    };
    let offenders: Vec<String> = sizes
        .iter()
        .filter(|(_, h, w)| (*h, *w) != (h0, w0))
        .map(|(name, h, w)| format!("{name} ({w}x{h})"))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::FrameSizes(format!(
            "frames must share the first frame's size {w0}x{h0}; offending: {}",
            offenders.join(", ")
        )));
    }
    Ok(())
}

/// Stylizes every PNG/JPEG in `frame_dir` (sorted by name) and writes
/// `<stem>.png` files into `out_dir`. Returns the written paths in order.
pub fn stylize_video<T: Float>(
    model: &SctNet<T>,
    frame_dir: &Path,
    style: &Tensor<T>,
    mode: Mode,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_mode(model, mode)?;
    let paths = list_images(frame_dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", frame_dir.display())));
    }
    let mut sizes = Vec::with_capacity(paths.len());
    for p in &paths {
        let (w, h) = image::image_dimensions(p).map_err(|source| Error::Image { path: p.clone(), source })?;
        sizes.push((p.display().to_string(), h as usize, w as usize));
    }
    check_frame_sizes(sizes.into_iter())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(paths.len());
    for p in &paths {
        let frame: Tensor<T> = load_tensor(p)?;
        let out = stylize_image(model, &frame, style, mode)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dest = out_dir.join(format!("{stem}.png"));
        save_png(&out, &dest)?;
        written.push(dest);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StyleTransferConfig;
    use crate::encoder::Encoder;
    use std::sync::Arc;

    #[test]
    fn padded_sizes() {
        assert_eq!(padded_size(333, 500, 8), (336, 504));
        assert_eq!(padded_size(5, 40, 4), (16, 40));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::<f32>::from_fn(&[1, 3, 5, 7], |i| i as f32);
        let p = reflect_pad_to(&t, 16, 16).unwrap();
        assert_eq!(p.shape(), &[1, 3, 16, 16]);
        assert_eq!(crop_to(&p, 5, 7), t);
        // reflection without repeating the edge
        assert_eq!(p.data()[5], t.data()[5]);
        assert_eq!(p.data()[7], t.data()[5]);
    }

    fn model(mode: Mode) -> SctNet<f32> {
        let cfg = StyleTransferConfig::for_mode(mode);
        SctNet::new(&cfg, Arc::new(Encoder::random(mode, 0))).unwrap()
    }

    #[test]
    fn output_matches_input_size_and_mode_is_checked() {
        let m = model(Mode::Photorealistic);
        let c = Tensor::from_fn(&[1, 3, 21, 30], |i| (i % 11) as f32 / 11.0);
        let s = Tensor::from_fn(&[1, 3, 13, 9], |i| (i % 5) as f32 / 5.0);
        let out = stylize_image(&m, &c, &s, Mode::Photorealistic).unwrap();
        assert_eq!(out.shape(), &[1, 3, 21, 30]);
        assert!(out.all_finite());
        assert!(stylize_image(&m, &c, &s, Mode::Artistic).is_err());
    }

    #[test]
    fn inconsistent_frames_are_listed() {
        let m = model(Mode::Photorealistic);
        let a = Tensor::zeros(&[1, 3, 16, 16]);
        let b = Tensor::zeros(&[1, 3, 16, 20]);
        let err = stylize_frames(&m, &[a.clone(), b, a.clone()], &a, Mode::Photorealistic).unwrap_err();
        assert!(err.to_string().contains("frame 1 (20x16)"), "{err}");
    }
}
