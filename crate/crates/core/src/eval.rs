//! Evaluation: flow warping, temporal loss, feature-space perceptual
//! distance, SIFID, and clip-level reports.
//!
//! Flow convention: the flow for the pair `(t, u)` lives on frame `u`'s grid
//! and points to where each pixel came from in frame `t`, so
//! `warp(frame_t, flow)[y, x] = frame_t[y + dy, x + dx]` should match
//! `frame_u[y, x]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::encoder::{Encoder, Tap};
use crate::error::{Error, Result};
use crate::image_io::{list_images, load_rgb, load_tensor};
use crate::tensor::{Float, Tensor};

/// Temporal losses are reported multiplied by this.
pub const TEMPORAL_SCALE: f64 = 100.0;

const FLO_MAGIC: f32 = 202021.25;
const FEATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::Shape(format!("flow {width}x{height} needs {n} values per component")));
        }
        if let Some(i) = dx.iter().chain(&dy).position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("flow value {} is not finite", i % n)));
        }
        Ok(Self { width, height, dx, dy, valid: vec![true; n] })
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let n = width * height;
        Self { width, height, dx: vec![dx; n], dy: vec![dy; n], valid: vec![true; n] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(dx, dy)` at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    /// Marks additional pixels invalid (e.g. an external occlusion mask).
    pub fn with_mask(mut self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.valid.len() {
            return Err(Error::Shape(format!("mask has {} entries, flow has {}", mask.len(), self.valid.len())));
        }
        for (v, &m) in self.valid.iter_mut().zip(mask) {
            *v &= m;
        }
        Ok(self)
    }

    /// Middlebury `.flo`: "PIEH", width, height, then interleaved (dx, dy)
    /// float32, all little-endian.
    pub fn read_flo(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Flow { path: path.to_path_buf(), reason };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 {
            return Err(bad("file shorter than the header".into()));
        }
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[i * 4..i * 4 + 4]).expect("4 bytes");
        if f32::from_le_bytes(word(0)) != FLO_MAGIC {
            return Err(bad("missing PIEH magic".into()));
        }
        let w = i32::from_le_bytes(word(1));
        let h = i32::from_le_bytes(word(2));
        if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
            return Err(bad(format!("implausible size {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        if bytes.len() != 12 + w * h * 8 {
            return Err(bad(format!("expected {} bytes for {w}x{h}, found {}", 12 + w * h * 8, bytes.len())));
        }
        let mut dx = Vec::with_capacity(w * h);
        let mut dy = Vec::with_capacity(w * h);
        for p in 0..w * h {
            dx.push(f32::from_le_bytes(word(3 + 2 * p)));
            dy.push(f32::from_le_bytes(word(4 + 2 * p)));
        }
        Self::new(w, h, dx, dy).map_err(|e| bad(e.to_string()))
    }

    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(12 + self.dx.len() * 8);
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (x, y) in self.dx.iter().zip(&self.dy) {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(|e| Error::io(path, e))
    }
}

/// A warped image and the pixels that may be compared.
#[derive(Clone)]
pub struct Warped<T> {
    pub image: Tensor<T>,
    pub mask: Vec<bool>,
}

fn single_image_dims<T: Float>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("expected one [1, C, H, W] image, got {s:?}")));
    }
    Ok((s[1], s[2], s[3]))
}

/// Bilinear backward warp. Samples outside `[0, W-1] x [0, H-1]` and pixels
/// already invalid in the flow are masked out (and set to zero).
pub fn warp<T: Float>(image: &Tensor<T>, flow: &FlowField) -> Result<Warped<T>> {
    let (c, h, w) = single_image_dims(image)?;
    if (flow.width, flow.height) != (w, h) {
        return Err(Error::Shape(format!("flow is {}x{}, image is {w}x{h}", flow.width, flow.height)));
    }
    let src = image.data();
    let mut out = vec![T::zero(); c * h * w];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !flow.valid[i] {
                continue;
            }
            let sx = x as f64 + flow.dx[i] as f64;
            let sy = y as f64 + flow.dy[i] as f64;
            if !(0.0..=(w - 1) as f64).contains(&sx) || !(0.0..=(h - 1) as f64).contains(&sy) {
                continue;
            }
            mask[i] = true;
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            let taps = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut v = 0.0;
                for (&wt, &p) in weights.iter().zip(&taps) {
                    if wt != 0.0 {
                        v += wt * plane[p].to_f64_lossy();
                    }
                }
                out[ch * h * w + i] = T::from_f64_lossy(v);
            }
        }
    }
    Ok(Warped { image: Tensor::new(image.shape(), out)?, mask })
}

/// Squared difference between `warp(frame_t, flow)` and `frame_u`, summed
/// over channels and valid pixels and divided by the valid-pixel count.
/// Unscaled; multiply by [`TEMPORAL_SCALE`] for reporting. `None` when no
/// pixel is valid.
pub fn temporal_loss<T: Float>(frame_t: &Tensor<T>, frame_u: &Tensor<T>, flow: &FlowField) -> Result<Option<f64>> {
    if frame_t.shape() != frame_u.shape() {
        return Err(Error::Shape(format!("frames {:?} vs {:?}", frame_t.shape(), frame_u.shape())));
    }
    let warped = warp(frame_t, flow)?;
    let (c, h, w) = single_image_dims(frame_u)?;
    let valid = warped.mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Ok(None);
    }
    let (a, b) = (warped.image.data(), frame_u.data());
    let mut sum = 0.0;
    for ch in 0..c {
        for (p, _) in warped.mask.iter().enumerate().filter(|(_, &m)| m) {
            let d = a[ch * h * w + p].to_f64_lossy() - b[ch * h * w + p].to_f64_lossy();
            sum += d * d;
        }
    }
    Ok(Some(sum / valid as f64))
}

fn unit_channel_vectors<T: Float>(f: &Tensor<T>) -> Vec<f64> {
    let (_, c, h, w) = f.dims4();
    let plane = h * w;
    let d = f.data();
    let mut out = vec![0.0; c * plane];
    for p in 0..plane {
        let norm = (0..c).map(|ch| d[ch * plane + p].to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            out[ch * plane + p] = d[ch * plane + p].to_f64_lossy() / (norm + FEATURE_EPS);
        }
    }
    out
}

/// LPIPS-style distance with this encoder's taps and unit weights: at each
/// layer, channel vectors are unit-normalised per pixel, squared differences
/// are summed over channels and averaged over space; layers are averaged.
pub fn perceptual_distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>, encoder: &Encoder<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", a.shape(), b.shape())));
    }
    let taps = encoder.taps();
    let fa = encoder.features(a, taps)?;
    let fb = encoder.features(b, taps)?;
    let mut total = 0.0;
    for &tap in taps {
        let (x, y) = (fa.get(tap)?.value(), fb.get(tap)?.value());
        let (_, _, h, w) = x.dims4();
        let (ux, uy) = (unit_channel_vectors(x), unit_channel_vectors(y));
        let sq: f64 = ux.iter().zip(&uy).map(|(p, q)| (p - q) * (p - q)).sum();
        total += sq / (h * w) as f64;
    }
    Ok(total / taps.len() as f64)
}

/// Anything that can turn an image into spatial activations, `C x n`
/// (one column per position).
pub trait Backbone<T> {
    fn activations(&self, image: &Tensor<T>) -> Result<DMatrix<f64>>;
}

/// The default SIFID backbone: this encoder's deepest tap.
impl<T: Float> Backbone<T> for Encoder<T> {
    fn activations(&self, image: &Tensor<T>) -> Result<DMatrix<f64>> {
        let tap: Tap = self.mode().deepest_tap();
        let pyr = self.features(image, &[tap])?;
        let f = pyr.get(tap)?.value();
        let (n, c, h, w) = f.dims4();
        if n != 1 {
            return Err(Error::Shape(format!("SIFID takes single images, got a batch of {n}")));
        }
        Ok(DMatrix::from_row_slice(c, h * w, &f.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
    }
}

/// Mean vector and unbiased covariance of the columns of `feats`.
pub fn gaussian_stats(feats: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.ncols();
    if n < 2 {
        return Err(Error::Numerical(format!("need at least 2 positions for a covariance, got {n}")));
    }
    let mu = feats.column_mean();
    let mut centred = feats.clone();
    for mut col in centred.column_iter_mut() {
        col -= &mu;
    }
    let cov = (&centred * centred.transpose()) / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-6 * scale {
        return Err(Error::Numerical(format!("{what} is not positive semi-definite (eigenvalue {min:e})")));
    }
    Ok(eig)
}

/// Square roots of eigenvalues, with everything below the numerical-rank
/// cutoff `dim * eps * max` treated as zero. Without the cutoff, rank-deficient
/// covariances (fewer positions than channels) contribute `sqrt(rounding noise)`
/// per null direction.
fn sqrt_eigenvalues(values: &DVector<f64>) -> DVector<f64> {
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cutoff = values.len() as f64 * f64::EPSILON * max;
    values.map(|v| if v > cutoff { v.sqrt() } else { 0.0 })
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, "covariance")?;
    let d = DMatrix::from_diagonal(&sqrt_eigenvalues(&eig.eigenvalues));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, with eigenvalues
/// below the numerical-rank cutoff treated as zero inside the square roots.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape("Gaussian dimensions disagree".into()));
    }
    let r1 = psd_sqrt(s1)?;
    let inner = &r1 * s2 * &r1;
    let eig = psd_eigen(&inner, "covariance product")?;
    let tr_covmean: f64 = sqrt_eigenvalues(&eig.eigenvalues).sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_covmean)
}

/// Single-image Fréchet distance between the activation statistics of two
/// images under `backbone`.
pub fn sifid<T: Float>(generated: &Tensor<T>, style: &Tensor<T>, backbone: &dyn Backbone<T>) -> Result<f64> {
    sifid_from_features(&backbone.activations(generated)?, &backbone.activations(style)?)
}

pub fn sifid_from_features(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (mu1, s1) = gaussian_stats(a)?;
    let (mu2, s2) = gaussian_stats(b)?;
    frechet_distance(&mu1, &s1, &mu2, &s2)
}

/// Externally computed perceptual scores, one `frame_a frame_b score` line
/// per pair (file names, whitespace separated; `#` starts a comment).
pub fn read_external_scores(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [a, b, s] => s.parse::<f64>().ok().map(|s| ((a.to_string(), b.to_string()), s)),
            _ => None,
        };
        let (k, v) = parsed.ok_or_else(|| {
            Error::Config(format!("{}:{}: expected `frame_a frame_b score`", path.display(), lineno + 1))
        })?;
        out.insert(k, v);
    }
    Ok(out)
}

/// Name of the flow file for frames `t -> u` (0-based positions in the
/// sorted frame list); an optional validity mask sits next to it as
/// `<same stem>.mask.png` (non-zero = valid).
pub fn flow_file_name(t: usize, u: usize) -> String {
    format!("flow_{t:04}_{u:04}.flo")
}

fn load_flow(dir: &Path, t: usize, u: usize) -> Result<Option<FlowField>> {
    let path = dir.join(flow_file_name(t, u));
    if !path.exists() {
        return Ok(None);
    }
    let flow = FlowField::read_flo(&path)?;
    let mask_path = dir.join(format!("flow_{t:04}_{u:04}.mask.png"));
    if mask_path.exists() {
        let m = load_rgb(&mask_path)?;
        if (m.width() as usize, m.height() as usize) != (flow.width, flow.height) {
            return Err(Error::Flow { path: mask_path, reason: "mask size differs from the flow".into() });
        }
        let mask: Vec<bool> = m.pixels().map(|p| p.0[0] > 0).collect();
        return Ok(Some(flow.with_mask(&mask)?));
    }
    Ok(Some(flow))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub from: String,
    pub to: String,
    pub perceptual: f64,
    /// Already multiplied by [`TEMPORAL_SCALE`]. `None` = missing flow or
    /// empty valid mask.
    pub temporal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub interval: usize,
    pub pairs: Vec<PairScore>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl IntervalReport {
    pub fn mean_perceptual(&self) -> Option<f64> {
        mean(self.pairs.iter().map(|p| p.perceptual))
    }

    pub fn mean_temporal(&self) -> Option<f64> {
        mean(self.pairs.iter().filter_map(|p| p.temporal))
    }

    pub fn missing_temporal(&self) -> usize {
        self.pairs.iter().filter(|p| p.temporal.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// Per stylized frame, SIFID against the style image.
    pub sifid: Vec<(String, f64)>,
    pub intervals: Vec<IntervalReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn mean_sifid(&self) -> Option<f64> {
        mean(self.sifid.iter().map(|(_, v)| *v))
    }

    pub fn interval(&self, i: usize) -> Option<&IntervalReport> {
        self.intervals.iter().find(|r| r.interval == i)
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12} {:>14} {:>14} {:>8}", "interval", "pairs", "perceptual", "temporal x100", "missing");
        for r in &self.intervals {
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>14} {:>14} {:>8}",
                r.interval,
                r.pairs.len(),
                fmt_opt(r.mean_perceptual()),
                fmt_opt(r.mean_temporal()),
                r.missing_temporal()
            );
        }
        let _ = writeln!(s, "SIFID mean over {} frames: {}", self.sifid.len(), fmt_opt(self.mean_sifid()));
        s
    }

    /// `key = value` lines with every per-item value and the aggregates.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sifid.mean = {}", fmt_opt(self.mean_sifid()));
        for (name, v) in &self.sifid {
            let _ = writeln!(s, "sifid.frame.{name} = {v:.6}");
        }
        for r in &self.intervals {
            let i = r.interval;
            let _ = writeln!(s, "interval.{i}.perceptual.mean = {}", fmt_opt(r.mean_perceptual()));
            let _ = writeln!(s, "interval.{i}.temporal_x100.mean = {}", fmt_opt(r.mean_temporal()));
            let _ = writeln!(s, "interval.{i}.temporal.missing = {}", r.missing_temporal());
            for p in &r.pairs {
                let _ = writeln!(s, "interval.{i}.pair.{}.{}.perceptual = {:.6}", p.from, p.to, p.perceptual);
                let _ = writeln!(s, "interval.{i}.pair.{}.{}.temporal_x100 = {}", p.from, p.to, fmt_opt(p.temporal));
            }
        }
        s
    }
}

/// Inputs for [`evaluate_suite`].
pub struct SuiteInputs<'a> {
    pub stylized_dir: &'a Path,
    pub style_image: &'a Path,
    pub flow_dir: Option<&'a Path>,
    pub intervals: &'a [usize],
    /// Replaces the encoder-based perceptual distance when present.
    pub external_perceptual: Option<&'a BTreeMap<(String, String), f64>>,
}

pub const DEFAULT_INTERVALS: [usize; 2] = [1, 10];

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scores a directory of stylized frames (sorted by name).
pub fn evaluate_suite<T: Float>(
    inputs: &SuiteInputs<'_>,
    encoder: &Encoder<T>,
    backbone: &dyn Backbone<T>,
) -> Result<EvalReport> {
    let paths: Vec<PathBuf> = list_images(inputs.stylized_dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", inputs.stylized_dir.display())));
    }
    let frames: Vec<Tensor<T>> = paths.iter().map(|p| load_tensor(p)).collect::<Result<_>>()?;
    let names: Vec<String> = paths.iter().map(|p| file_name(p)).collect();
    let style: Tensor<T> = load_tensor(inputs.style_image)?;
    let style_acts = backbone.activations(&style)?;

    let mut report = EvalReport::default();
    for (name, f) in names.iter().zip(&frames) {
        report.sifid.push((name.clone(), sifid_from_features(&backbone.activations(f)?, &style_acts)?));
    }
    for &interval in inputs.intervals {
        if interval == 0 {
            return Err(Error::Config("frame intervals must be positive".into()));
        }
        let mut pairs = Vec::new();
        for t in 0..frames.len().saturating_sub(interval) {
            let u = t + interval;
            let perceptual = match inputs.external_perceptual {
                Some(scores) => *scores.get(&(names[t].clone(), names[u].clone())).ok_or_else(|| {
                    Error::Config(format!("external scores lack the pair {} {}", names[t], names[u]))
                })?,
                None => perceptual_distance(&frames[t], &frames[u], encoder)?,
            };
            let temporal = match inputs.flow_dir {
                Some(dir) => match load_flow(dir, t, u)? {
                    Some(flow) => temporal_loss(&frames[t], &frames[u], &flow)?.map(|v| v * TEMPORAL_SCALE),
                    None => None,
                },
                None => None,
            };
            pairs.push(PairScore { from: names[t].clone(), to: names[u].clone(), perceptual, temporal });
        }
        report.intervals.push(IntervalReport { interval, pairs });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = image(6, 9, 0);
        let w = warp(&img, &FlowField::zeros(9, 6)).unwrap();
        assert_eq!(w.image, img);
        assert!(w.mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_translation_is_undone() {
        // frame_u[y, x] = frame_t[y, x + 1]
        let t = image(5, 8, 1);
        let u = Tensor::from_fn(&[1, 3, 5, 8], |i| {
            let x = i % 8;
            if x + 1 < 8 {
                t.data()[i + 1]
            } else {
                0.0
            }
        });
        let flow = FlowField::constant(8, 5, 1.0, 0.0);
        let w = warp(&t, &flow).unwrap();
        for i in 0..t.len() {
            let p = i % 40;
            assert_eq!(w.mask[p], p % 8 != 7);
            if w.mask[p] {
                assert!((w.image.data()[i] - u.data()[i]).abs() < 1e-6);
            }
        }
        assert_eq!(temporal_loss(&t, &u, &flow).unwrap(), Some(0.0));
    }

    #[test]
    fn bilinear_midpoint() {
        let t = Tensor::<f64>::from_fn(&[1, 1, 1, 3], |i| i as f64);
        let w = warp(&t, &FlowField::constant(3, 1, 0.5, 0.0)).unwrap();
        assert_eq!(&w.image.data()[..2], &[0.5, 1.5]);
        assert_eq!(w.mask, vec![true, true, false]);
    }

    #[test]
    fn flow_out_of_frame_or_masked_is_invalid() {
        let t = image(4, 4, 2);
        let flow = FlowField::constant(4, 4, -10.0, 0.0);
        assert_eq!(temporal_loss(&t, &t, &flow).unwrap(), None);
        let masked = FlowField::zeros(4, 4).with_mask(&[false; 16]).unwrap();
        assert_eq!(temporal_loss(&t, &t, &masked).unwrap(), None);
    }

    #[test]
    fn flo_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let flow = FlowField::new(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.5], vec![0.0; 6]).unwrap();
        flow.write_flo(&path).unwrap();
        assert_eq!(FlowField::read_flo(&path).unwrap(), flow);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(FlowField::read_flo(&path).is_err());
    }

    #[test]
    fn perceptual_distance_is_a_pseudometric() {
        let enc = Encoder::<f32>::random(Mode::Photorealistic, 0);
        let (a, b) = (image(16, 16, 3), image(16, 16, 4));
        assert_eq!(perceptual_distance(&a, &a, &enc).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b, &enc).unwrap();
        let ba = perceptual_distance(&b, &a, &enc).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-6);
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = DMatrix::from_fn(6, 40, |_, _| rng.random_range(-1.0..1.0));
        assert!(sifid_from_features(&feats, &feats).unwrap().abs() < 1e-9);
        let v = DVector::from_fn(6, |i, _| i as f64 * 0.3 - 0.5);
        let mut shifted = feats.clone();
        for mut col in shifted.column_iter_mut() {
            col += &v;
        }
        let d = sifid_from_features(&feats, &shifted).unwrap();
        assert!((d - v.norm_squared()).abs() < 1e-8);
        let not_psd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let mu = DVector::zeros(2);
        assert!(frechet_distance(&mu, &not_psd, &mu, &not_psd).is_err());
    }
}
