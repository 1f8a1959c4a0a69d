//! Run configuration.
//!
//! Config files are plain `key = value` lines (TOML syntax), e.g.
//!
//! ```toml
//! mode = "artistic"
//! ccpl.tau = 0.07
//! ccpl.layers = ["relu2_1", "relu3_1", "relu4_1"]
//! ccpl.anchors_per_layer = 8
//! ccpl.seed = 0
//! fusion.backend = "sct"
//! fusion.reduced_channels = 32
//! loss.lambda_c = 1.0
//! loss.lambda_s = 10.0
//! loss.lambda_ccp = 5.0
//! train.lr = 1e-4
//! train.batch_size = 8
//! encoder.seed = 0            # or encoder.weights = "vgg19.ccpl"
//! ```
//!
//! Every key is optional; omitted keys take the defaults of the selected mode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccpl::{CcplSettings, SamplingPlan, SeedPolicy, DEFAULT_PROJECTOR_WIDTH};
use crate::encoder::{EncoderSpec, Mode, Tap, WeightsSource};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_ccp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 1.0, lambda_s: 10.0, lambda_ccp: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s), ("lambda_ccp", self.lambda_ccp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossLayerSets {
    pub content: Vec<Tap>,
    pub style: Vec<Tap>,
    pub ccpl: Vec<Tap>,
}

impl LossLayerSets {
    pub fn for_mode(mode: Mode) -> Self {
        use Tap::*;
        match mode {
            Mode::Artistic => Self {
                content: vec![Relu4_1],
                style: vec![Relu1_1, Relu2_1, Relu3_1, Relu4_1],
                ccpl: vec![Relu2_1, Relu3_1, Relu4_1],
            },
            Mode::Photorealistic => Self {
                content: vec![Relu3_1],
                style: vec![Relu1_1, Relu2_1, Relu3_1],
                ccpl: vec![Relu1_1, Relu2_1, Relu3_1],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CcplSection {
    pub tau: Option<f64>,
    pub layers: Option<Vec<Tap>>,
    pub anchors_per_layer: Option<usize>,
    pub seed: Option<u64>,
    pub seed_policy: Option<SeedPolicy>,
    pub projector_width: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub backend: Option<FusionKind>,
    pub reduced_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_c: Option<f64>,
    pub lambda_s: Option<f64>,
    pub lambda_ccp: Option<f64>,
    pub content_layers: Option<Vec<Tap>>,
    pub style_layers: Option<Vec<Tap>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<String>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub resize_shorter_to: Option<u32>,
    pub crop: Option<u32>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// The raw file contents; everything optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<Mode>,
    pub ccpl: CcplSection,
    pub fusion: FusionSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub encoder: EncoderSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcplConfig {
    pub tau: f64,
    pub layers: Vec<Tap>,
    pub anchors_per_layer: usize,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
    pub projector_width: usize,
}

impl CcplConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            tau: 0.07,
            layers: LossLayerSets::for_mode(mode).ccpl,
            anchors_per_layer: 8,
            seed: 0,
            seed_policy: SeedPolicy::FreshPerStep,
            projector_width: DEFAULT_PROJECTOR_WIDTH,
        }
    }

    pub fn settings(&self) -> CcplSettings {
        CcplSettings {
            tau: self.tau,
            layers: self.layers.clone(),
            plan: SamplingPlan { anchors_per_layer: self.anchors_per_layer, seed_policy: self.seed_policy },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub resize_shorter_to: u32,
    pub crop: u32,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    /// MS-COCO / WikiArt scale recipe.
    pub fn full() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            iterations: 160_000,
            resize_shorter_to: 512,
            crop: 256,
            seed: 0,
            checkpoint_every: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    /// Small CPU-sized preset: 64x64 crops, batch 4, 500 iterations.
    pub fn desk() -> Self {
        Self { batch_size: 4, iterations: 500, resize_shorter_to: 72, crop: 64, checkpoint_every: 250, ..Self::full() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown training preset `{other}` (full | desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.crop > self.resize_shorter_to {
            return Err(Error::Config(format!(
                "train.crop ({}) exceeds train.resize_shorter_to ({})",
                self.crop, self.resize_shorter_to
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Fully resolved configuration for a mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransferConfig {
    pub mode: Mode,
    pub encoder: WeightsSource,
    pub fusion: FusionKind,
    pub reduced_channels: usize,
    pub weights: LossWeights,
    pub layers: LossLayerSets,
    pub ccpl: CcplConfig,
    pub train: TrainConfig,
}

impl StyleTransferConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            encoder: WeightsSource::RandomSeeded(0),
            fusion: FusionKind::Sct,
            reduced_channels: 32,
            weights: LossWeights::default(),
            layers: LossLayerSets::for_mode(mode),
            ccpl: CcplConfig::for_mode(mode),
            train: TrainConfig::full(),
        }
    }

    /// Desk-scale training preset for a mode.
    pub fn desk(mode: Mode) -> Self {
        Self { train: TrainConfig::desk(), ..Self::for_mode(mode) }
    }

    /// Resolves a config file. `mode_override` (e.g. from the command line)
    /// wins over the file's `mode`.
    pub fn resolve(file: &ConfigFile, mode_override: Option<Mode>) -> Result<Self> {
        let mode = mode_override.or(file.mode).unwrap_or_default();
        let mut cfg = Self::for_mode(mode);
        if let Some(p) = &file.train.preset {
            cfg.train = TrainConfig::preset(p)?;
        }
        let c = &file.ccpl;
        if let Some(v) = c.tau {
            cfg.ccpl.tau = v;
        }
        if let Some(v) = &c.layers {
            cfg.ccpl.layers = v.clone();
        }
        if let Some(v) = c.anchors_per_layer {
            cfg.ccpl.anchors_per_layer = v;
        }
        if let Some(v) = c.seed {
            cfg.ccpl.seed = v;
        }
        if let Some(v) = c.seed_policy {
            cfg.ccpl.seed_policy = v;
        }
        if let Some(v) = c.projector_width {
            cfg.ccpl.projector_width = v;
        }
        cfg.layers.ccpl = cfg.ccpl.layers.clone();
        if let Some(v) = file.fusion.backend {
            cfg.fusion = v;
        }
        if let Some(v) = file.fusion.reduced_channels {
            cfg.reduced_channels = v;
        }
        let l = &file.loss;
        if let Some(v) = l.lambda_c {
            cfg.weights.lambda_c = v;
        }
        if let Some(v) = l.lambda_s {
            cfg.weights.lambda_s = v;
        }
        if let Some(v) = l.lambda_ccp {
            cfg.weights.lambda_ccp = v;
        }
        if let Some(v) = &l.content_layers {
            cfg.layers.content = v.clone();
        }
        if let Some(v) = &l.style_layers {
            cfg.layers.style = v.clone();
        }
        let t = &file.train;
        if let Some(v) = t.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = t.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = t.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = t.resize_shorter_to {
            cfg.train.resize_shorter_to = v;
        }
        if let Some(v) = t.crop {
            cfg.train.crop = v;
        }
        if let Some(v) = t.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = t.checkpoint_every {
            cfg.train.checkpoint_every = v;
        }
        match (&file.encoder.weights, file.encoder.seed) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either encoder.weights or encoder.seed, not both".into()))
            }
            (Some(p), None) => cfg.encoder = WeightsSource::Archive(p.clone()),
            (None, Some(s)) => cfg.encoder = WeightsSource::RandomSeeded(s),
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.train.validate()?;
        if !(self.ccpl.tau > 0.0) {
            return Err(Error::Config(format!("ccpl.tau must be positive, got {}", self.ccpl.tau)));
        }
        if self.ccpl.anchors_per_layer == 0 {
            return Err(Error::Config("ccpl.anchors_per_layer must be positive".into()));
        }
        if self.reduced_channels == 0 {
            return Err(Error::Config("fusion.reduced_channels must be positive".into()));
        }
        let taps = self.mode.taps();
        for (what, set) in [("content", &self.layers.content), ("style", &self.layers.style), ("ccpl", &self.layers.ccpl)] {
            if let Some(t) = set.iter().find(|t| !taps.contains(t)) {
                return Err(Error::Config(format!("{what} layer {t} is not available in {} mode", self.mode)));
            }
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::new(self.mode, self.encoder.clone())
    }

    /// Hash of everything that determines the shape of the trainable model.
    pub fn architecture_hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "mode={};fusion={};reduced={};", self.mode, self.fusion, self.reduced_channels);
        let _ = write!(s, "ccpl_layers=");
        for t in &self.layers.ccpl {
            let _ = write!(s, "{t},");
        }
        let _ = write!(s, ";projector={}", self.ccpl.projector_width);
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    /// The resolved configuration in config-file form.
    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            mode: Some(self.mode),
            ccpl: CcplSection {
                tau: Some(self.ccpl.tau),
                layers: Some(self.ccpl.layers.clone()),
                anchors_per_layer: Some(self.ccpl.anchors_per_layer),
                seed: Some(self.ccpl.seed),
                seed_policy: Some(self.ccpl.seed_policy),
                projector_width: Some(self.ccpl.projector_width),
            },
            fusion: FusionSection { backend: Some(self.fusion), reduced_channels: Some(self.reduced_channels) },
            loss: LossSection {
                lambda_c: Some(self.weights.lambda_c),
                lambda_s: Some(self.weights.lambda_s),
                lambda_ccp: Some(self.weights.lambda_ccp),
                content_layers: Some(self.layers.content.clone()),
                style_layers: Some(self.layers.style.clone()),
            },
            train: TrainSection {
                preset: None,
                lr: Some(self.train.lr),
                batch_size: Some(self.train.batch_size),
                iterations: Some(self.train.iterations),
                resize_shorter_to: Some(self.train.resize_shorter_to),
                crop: Some(self.train.crop),
                seed: Some(self.train.seed),
                checkpoint_every: Some(self.train.checkpoint_every),
            },
            encoder: match &self.encoder {
                WeightsSource::Archive(p) => EncoderSection { weights: Some(p.clone()), seed: None },
                WeightsSource::RandomSeeded(s) => EncoderSection { weights: None, seed: Some(*s) },
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }
}
