//! Frozen VGG-19 feature encoder with taps at relu1_1 .. relu4_1.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::nn::Conv2d;
use crate::tensor::{Float, Tensor};

/// Task mode; selects encoder depth and the loss-layer sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Artistic,
    Photorealistic,
}

impl Mode {
    pub fn taps(self) -> &'static [Tap] {
        match self {
            Mode::Artistic => &[Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1],
            Mode::Photorealistic => &[Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1],
        }
    }

    pub fn deepest_tap(self) -> Tap {
        *self.taps().last().unwrap()
    }

    pub fn deepest_channels(self) -> usize {
        self.deepest_tap().channels()
    }

    /// Spatial factor between the input image and the deepest tap.
    pub fn downsample_factor(self) -> usize {
        self.deepest_tap().downsample_factor()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Artistic => "artistic",
            Mode::Photorealistic => "photorealistic",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "artistic" => Ok(Mode::Artistic),
            "photorealistic" | "photo-realistic" | "photo" => Ok(Mode::Photorealistic),
            other => Err(Error::Config(format!("unknown mode `{other}` (artistic | photorealistic)"))),
        }
    }
}

/// A named encoder feature tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tap {
    #[serde(rename = "relu1_1")]
    Relu1_1,
    #[serde(rename = "relu2_1")]
    Relu2_1,
    #[serde(rename = "relu3_1")]
    Relu3_1,
    #[serde(rename = "relu4_1")]
    Relu4_1,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Relu1_1 => "relu1_1",
            Tap::Relu2_1 => "relu2_1",
            Tap::Relu3_1 => "relu3_1",
            Tap::Relu4_1 => "relu4_1",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Tap::Relu1_1 => 64,
            Tap::Relu2_1 => 128,
            Tap::Relu3_1 => 256,
            Tap::Relu4_1 => 512,
        }
    }

    pub fn downsample_factor(self) -> usize {
        match self {
            Tap::Relu1_1 => 1,
            Tap::Relu2_1 => 2,
            Tap::Relu3_1 => 4,
            Tap::Relu4_1 => 8,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder layer `{s}`")))
    }
}

/// One convolution of the VGG-19 trunk: name, input and output channels, the
/// tap exposed after its rectifier, and whether a 2x2 max-pool follows.
struct VggLayer {
    name: &'static str,
    cin: usize,
    cout: usize,
    tap: Option<Tap>,
    pool_after: bool,
}

const fn layer(name: &'static str, cin: usize, cout: usize, tap: Option<Tap>, pool_after: bool) -> VggLayer {
    VggLayer { name, cin, cout, tap, pool_after }
}

const VGG19_TRUNK: [VggLayer; 9] = [
    layer("conv1_1", 3, 64, Some(Tap::Relu1_1), false),
    layer("conv1_2", 64, 64, None, true),
    layer("conv2_1", 64, 128, Some(Tap::Relu2_1), false),
    layer("conv2_2", 128, 128, None, true),
    layer("conv3_1", 128, 256, Some(Tap::Relu3_1), false),
    layer("conv3_2", 256, 256, None, false),
    layer("conv3_3", 256, 256, None, false),
    layer("conv3_4", 256, 256, None, true),
    layer("conv4_1", 256, 512, Some(Tap::Relu4_1), false),
];

fn trunk_len(mode: Mode) -> usize {
    let deepest = mode.deepest_tap();
    VGG19_TRUNK.iter().position(|l| l.tap == Some(deepest)).unwrap() + 1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsSource {
    Archive(PathBuf),
    /// He-normal weights from `ChaCha8Rng::seed_from_u64(seed)`, drawn layer by
    /// layer in trunk order; biases are zero.
    RandomSeeded(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub mode: Mode,
    pub weights_source: WeightsSource,
}

impl EncoderSpec {
    pub fn new(mode: Mode, weights_source: WeightsSource) -> Self {
        Self { mode, weights_source }
    }

    pub fn tap_names(&self) -> Vec<&'static str> {
        self.mode.taps().iter().map(|t| t.name()).collect()
    }
}

/// Named multi-scale features of one batch of images.
#[derive(Clone)]
pub struct FeaturePyramid<T> {
    entries: BTreeMap<Tap, Var<T>>,
    source_size: (usize, usize),
}

impl<T: Float> FeaturePyramid<T> {
    pub fn get(&self, tap: Tap) -> Result<&Var<T>> {
        self.entries.get(&tap).ok_or_else(|| Error::MissingLayer(tap.name().to_string()))
    }

    pub fn taps(&self) -> impl Iterator<Item = Tap> + '_ {
        self.entries.keys().copied()
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn insert(&mut self, tap: Tap, features: Var<T>) {
        self.entries.insert(tap, features);
    }

    pub fn new(source_size: (usize, usize)) -> Self {
        Self { entries: BTreeMap::new(), source_size }
    }
}

impl<T: Float> fmt::Debug for FeaturePyramid<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shapes: BTreeMap<_, _> = self.entries.iter().map(|(k, v)| (k.name(), v.shape().to_vec())).collect();
        f.debug_struct("FeaturePyramid").field("entries", &shapes).field("source_size", &self.source_size).finish()
    }
}

/// Per-channel input normalisation stored with the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Immutable after construction; safe to share between threads.
pub struct Encoder<T> {
    mode: Mode,
    layers: Vec<Conv2d<T>>,
    preprocess: Option<Preprocess>,
    digest: String,
}

impl<T> fmt::Debug for Encoder<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoder")
            .field("mode", &self.mode)
            .field("layers", &self.layers.len())
            .field("digest", &self.digest)
            .finish()
    }
}

impl<T: Float> Encoder<T> {
    pub fn load(spec: &EncoderSpec) -> Result<Self> {
        match &spec.weights_source {
            WeightsSource::RandomSeeded(seed) => Ok(Self::random(spec.mode, *seed)),
            WeightsSource::Archive(path) => Self::from_archive(spec.mode, &Archive::load(path)?),
        }
    }

    pub fn random(mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Conv2d<T>> = VGG19_TRUNK[..trunk_len(mode)]
            .iter()
            .map(|l| Conv2d::random(l.cin, l.cout, 3, PadMode::Zero, &mut rng))
            .collect();
        let mut enc = Self { mode, layers, preprocess: None, digest: String::new() };
        enc.digest = enc.to_archive().digest();
        enc
    }

    /// Builds an encoder from an archive holding `convX_Y.weight` `[out,in,3,3]`
    /// and `convX_Y.bias` `[out]` for every trunk layer up to the deepest tap.
    /// Optional metadata `preprocess.mean` / `preprocess.std` hold three
    /// comma-separated values each.
    pub fn from_archive(mode: Mode, archive: &Archive) -> Result<Self> {
        let mut layers = Vec::new();
        for l in &VGG19_TRUNK[..trunk_len(mode)] {
            let w = archive.get_shaped::<T>(&format!("{}.weight", l.name), &[l.cout, l.cin, 3, 3])?;
            let b = archive.get_shaped::<T>(&format!("{}.bias", l.name), &[l.cout])?;
            layers.push(Conv2d::new(w, b, PadMode::Zero));
        }
        let preprocess = match (archive.metadata.get("preprocess.mean"), archive.metadata.get("preprocess.std")) {
            (Some(m), Some(s)) => Some(Preprocess { mean: parse_triplet(m)?, std: parse_triplet(s)? }),
            (None, None) => None,
            _ => return Err(Error::Archive("preprocess.mean and preprocess.std must be given together".into())),
        };
        let mut enc = Self { mode, layers, preprocess, digest: String::new() };
        enc.digest = enc.to_archive().digest();
        Ok(enc)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (l, conv) in VGG19_TRUNK.iter().zip(&self.layers) {
            a.insert(format!("{}.weight", l.name), &*conv.weight);
            a.insert(format!("{}.bias", l.name), &*conv.bias);
        }
        a.metadata.insert("kind".into(), "vgg19-encoder".into());
        if let Some(p) = &self.preprocess {
            let fmt3 = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
            a.metadata.insert("preprocess.mean".into(), fmt3(&p.mean));
            a.metadata.insert("preprocess.std".into(), fmt3(&p.std));
        }
        a
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn taps(&self) -> &'static [Tap] {
        self.mode.taps()
    }

    /// SHA-256 of the weights in archive form; checkpoints refer to it.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn preprocess(&self) -> Option<&Preprocess> {
        self.preprocess.as_ref()
    }

    /// Flat copy of every weight, for frozen-ness checks.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.layers.iter().flat_map(|c| [(*c.weight).clone(), (*c.bias).clone()]).collect()
    }

    /// Checks the input size rules for this mode.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let f = self.mode.downsample_factor();
        let bad = |reason: String| Err(Error::InputSize { height, width, reason });
        if height < 16 || width < 16 {
            return bad("both sides must be at least 16 pixels".into());
        }
        if height % f != 0 || width % f != 0 {
            return bad(format!("both sides must be divisible by {f} in {} mode", self.mode));
        }
        Ok(())
    }

    /// Runs the trunk on `image [N,3,H,W]` (values in [0,1]) up to the deepest
    /// requested tap. Never pads the input.
    pub fn encode(&self, tape: &Tape<T>, image: &Var<T>, taps: &[Tap]) -> Result<FeaturePyramid<T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("encoder expects [N,3,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        self.check_input(h, w)?;
        if let Some(t) = taps.iter().find(|t| !self.taps().contains(t)) {
            return Err(Error::Config(format!("layer {t} is not available in {} mode", self.mode)));
        }
        let mut pyramid = FeaturePyramid::new((h, w));
        let Some(deepest) = taps.iter().max().copied() else {
            return Ok(pyramid);
        };
        let mut x = match &self.preprocess {
            Some(p) => {
                let n = shape[0];
                let mean = Tensor::from_fn(&[n, 3], |i| T::from_f64_lossy(p.mean[i % 3]));
                let std = Tensor::from_fn(&[n, 3], |i| T::from_f64_lossy(p.std[i % 3]));
                let centred = tape.sub_channel(image, &Var::constant(mean))?;
                tape.div_channel(&centred, &Var::constant(std))?
            }
            None => image.clone(),
        };
        for (spec, conv) in VGG19_TRUNK.iter().zip(&self.layers) {
            x = tape.relu(&conv.forward(tape, &x, true)?);
            if let Some(tap) = spec.tap {
                if taps.contains(&tap) {
                    pyramid.insert(tap, x.clone());
                }
                if tap == deepest {
                    break;
                }
            }
            if spec.pool_after {
                x = tape.max_pool2(&x);
            }
        }
        Ok(pyramid)
    }

    /// All taps of this mode.
    pub fn encode_all(&self, tape: &Tape<T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        self.encode(tape, image, self.taps())
    }

    /// Convenience no-grad encoding of a plain tensor.
    pub fn features(&self, image: &Tensor<T>, taps: &[Tap]) -> Result<FeaturePyramid<T>> {
        let tape = Tape::no_grad();
        self.encode(&tape, &Var::constant(Arc::new(image.clone())), taps)
    }
}

fn parse_triplet(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Archive(format!("bad preprocess record `{s}`: {e}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Archive(format!("preprocess record `{s}` needs 3 values")))
}
