//! Optimisation loop and checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::autograd::{Tape, Var};
use crate::ccpl::SeedPolicy;
use crate::config::{ConfigFile, StyleTransferConfig};
use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, streams, SctNet};
use crate::nn::Module;
use crate::objective::{LossBreakdown, Objective};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Float, Tensor};

const CHECKPOINT_KIND: &str = "ccpl-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub breakdown: LossBreakdown,
}

pub struct Trainer<T> {
    config: StyleTransferConfig,
    pub model: SctNet<T>,
    pub optimizer: Adam<T>,
    objective: Objective,
    step: usize,
    data_rng: ChaCha8Rng,
    ccpl_rng: ChaCha8Rng,
}

fn objective_for(cfg: &StyleTransferConfig) -> Objective {
    Objective { weights: cfg.weights, layers: cfg.layers.clone(), ccpl: cfg.ccpl.settings() }
}

fn adam_config(cfg: &StyleTransferConfig) -> AdamConfig {
    AdamConfig { lr: cfg.train.lr, beta1: cfg.train.adam_beta1, beta2: cfg.train.adam_beta2, eps: cfg.train.adam_eps }
}

impl<T: Float> Trainer<T> {
    pub fn new(config: StyleTransferConfig, encoder: Arc<Encoder<T>>) -> Result<Self> {
        config.validate()?;
        let model = SctNet::new(&config, encoder)?;
        Ok(Self {
            optimizer: Adam::new(adam_config(&config)),
            objective: objective_for(&config),
            step: 0,
            data_rng: seeded_rng(config.train.seed, streams::DATA),
            ccpl_rng: seeded_rng(config.ccpl.seed, streams::CCPL),
            model,
            config,
        })
    }

    pub fn config(&self) -> &StyleTransferConfig {
        &self.config
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Draws the next batch with the trainer's data generator.
    pub fn next_batch(&mut self, data: &mut Dataset) -> Result<(Tensor<T>, Tensor<T>)> {
        data.make_batch(&self.config.train, &mut self.data_rng)
    }

    /// Loss of the current model on a batch without updating anything.
    pub fn evaluate_batch(&mut self, content: &Tensor<T>, style: &Tensor<T>) -> Result<LossBreakdown> {
        let tape = Tape::no_grad();
        Ok(self.loss(&tape, content, style)?.1)
    }

    fn loss(&mut self, tape: &Tape<T>, content: &Tensor<T>, style: &Tensor<T>) -> Result<(Var<T>, LossBreakdown)> {
        let taps = self.objective.generated_taps();
        let c = Var::constant(Arc::new(content.clone()));
        let s = Var::constant(Arc::new(style.clone()));
        let fwd = self.model.forward(tape, &c, &s, &taps)?;
        let g = self.model.encoder().encode(tape, &fwd.generated, &taps)?;
        let mut fixed;
        let rng = match self.config.ccpl.seed_policy {
            SeedPolicy::FreshPerStep => &mut self.ccpl_rng,
            SeedPolicy::Fixed => {
                fixed = seeded_rng(self.config.ccpl.seed, streams::CCPL);
                &mut fixed
            }
        };
        self.objective.evaluate(tape, &fwd.content, &fwd.style, &g, &self.model.projectors, rng)
    }

    /// One Adam update of fusion, decoder and projector parameters. The
    /// encoder is never touched. Aborts without updating on a non-finite loss.
    pub fn train_step(&mut self, content: &Tensor<T>, style: &Tensor<T>) -> Result<StepReport> {
        let tape = Tape::new();
        let (loss, breakdown) = self.loss(&tape, content, style)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, breakdown: breakdown.to_string() });
        }
        let grads = tape.backward(&loss)?;
        self.optimizer.step(&mut self.model, &grads);
        self.step += 1;
        Ok(StepReport { step: self.step, breakdown })
    }

    /// Trains until `config.train.iterations` steps have been taken, saving a
    /// checkpoint into `out_dir` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        data: &mut Dataset,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < self.config.train.iterations {
            let (c, s) = self.next_batch(data)?;
            let report = self.train_step(&c, &s)?;
            on_step(&report);
            reports.push(report);
            if let Some(dir) = out_dir {
                let every = self.config.train.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.config.train.iterations {
                    self.save_checkpoint(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
                    self.save_checkpoint(&dir.join("latest.ckpt"))?;
                }
            }
        }
        Ok(reports)
    }

    fn check_encoder_frozen(&self) -> Result<()> {
        let enc = self.model.encoder();
        if enc.to_archive().digest() != enc.digest() {
            return Err(Error::Numerical("encoder weights changed during training".into()));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        self.check_encoder_frozen()?;
        let mut a = Archive::new();
        self.model.visit_params(&mut |name, p| a.insert(format!("param/{name}"), &**p));
        for (name, m) in &self.optimizer.m {
            a.insert(format!("adam.m/{name}"), m);
        }
        for (name, v) in &self.optimizer.v {
            a.insert(format!("adam.v/{name}"), v);
        }
        let md = &mut a.metadata;
        let c = &self.optimizer.config;
        md.insert("kind".into(), CHECKPOINT_KIND.into());
        md.insert("dtype".into(), format!("{:?}", T::DTYPE).to_lowercase());
        md.insert("mode".into(), self.config.mode.to_string());
        md.insert("fusion".into(), self.config.fusion.to_string());
        md.insert("config_hash".into(), self.config.architecture_hash());
        md.insert("config".into(), self.config.to_toml());
        md.insert("encoder_digest".into(), self.model.encoder().digest().to_string());
        md.insert("step".into(), self.step.to_string());
        md.insert("adam.lr".into(), c.lr.to_string());
        md.insert("adam.beta1".into(), c.beta1.to_string());
        md.insert("adam.beta2".into(), c.beta2.to_string());
        md.insert("adam.eps".into(), c.eps.to_string());
        md.insert("adam.steps".into(), self.optimizer.steps.to_string());
        md.insert("rng.data".into(), self.data_rng.get_word_pos().to_string());
        md.insert("rng.ccpl".into(), self.ccpl_rng.get_word_pos().to_string());
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Resumes training from a checkpoint written for an equivalent
    /// architecture. Refuses checkpoints whose config hash or encoder differ.
    pub fn resume(path: &Path, config: StyleTransferConfig, encoder: Arc<Encoder<T>>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.check_compatible(&config, &encoder)?;
        let mut t = Self::new(config, encoder)?;
        ckpt.restore_params(&mut t.model)?;
        let a = &ckpt.archive;
        for (name, p) in t.model.trainable() {
            for (prefix, map) in [("adam.m", &mut t.optimizer.m), ("adam.v", &mut t.optimizer.v)] {
                let key = format!("{prefix}/{name}");
                if a.contains(&key) {
                    map.insert(name.clone(), a.get_shaped(&key, p.shape())?);
                }
            }
        }
        t.optimizer.steps = ckpt.meta_parse("adam.steps")?;
        t.step = ckpt.step()?;
        t.data_rng.set_word_pos(ckpt.meta_parse("rng.data")?);
        t.ccpl_rng.set_word_pos(ckpt.meta_parse("rng.ccpl")?);
        Ok(t)
    }
}

/// A checkpoint file opened for inspection or loading.
pub struct Checkpoint {
    pub archive: Archive,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.metadata.get("kind").map(String::as_str) != Some(CHECKPOINT_KIND) {
            return Err(Error::Archive(format!("{} is not a training checkpoint", path.display())));
        }
        Ok(Self { archive })
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.archive
            .metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("checkpoint lacks `{key}`")))
    }

    fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Archive(format!("checkpoint field `{key}` is malformed: {raw}")))
    }

    pub fn step(&self) -> Result<usize> {
        self.meta_parse("step")
    }

    pub fn config_hash(&self) -> Result<&str> {
        self.meta("config_hash")
    }

    pub fn encoder_digest(&self) -> Result<&str> {
        self.meta("encoder_digest")
    }

    /// The configuration the checkpoint was trained with.
    pub fn config(&self) -> Result<StyleTransferConfig> {
        let file = ConfigFile::parse(self.meta("config")?)?;
        StyleTransferConfig::resolve(&file, None)
    }

    pub fn check_compatible<T: Float>(&self, config: &StyleTransferConfig, encoder: &Encoder<T>) -> Result<()> {
        let stored = self.config_hash()?;
        if stored != config.architecture_hash() {
            let theirs = self.meta("mode").unwrap_or("?");
            let fusion = self.meta("fusion").unwrap_or("?");
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was written for a different architecture ({theirs} mode, {fusion} fusion) \
                 than the requested one ({} mode, {} fusion); config hashes {stored} vs {}",
                config.mode,
                config.fusion,
                config.architecture_hash()
            )));
        }
        let digest = self.encoder_digest()?;
        if digest != encoder.digest() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained against encoder weights {digest}, but the supplied encoder is {}",
                encoder.digest()
            )));
        }
        Ok(())
    }

    /// Overwrites every trainable parameter of `model`; shapes must agree.
    pub fn restore_params<T: Float>(&self, model: &mut SctNet<T>) -> Result<()> {
        let mut err = None;
        model.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.archive.get_shaped::<T>(&format!("param/{name}"), p.shape()) {
                Ok(t) => *p = Arc::new(t),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Builds an inference-ready model. Without `encoder`, the encoder
    /// recorded in the checkpoint's config is loaded.
    pub fn into_model<T: Float>(self, encoder: Option<Arc<Encoder<T>>>) -> Result<(SctNet<T>, StyleTransferConfig)> {
        let config = self.config()?;
        let encoder = match encoder {
            Some(e) => e,
            None => Arc::new(Encoder::load(&config.encoder_spec())?),
        };
        self.check_compatible(&config, &encoder)?;
        let mut model = SctNet::new(&config, encoder)?;
        self.restore_params(&mut model)?;
        Ok((model, config))
    }
}

/// Convenience: read and build in one go.
pub fn load_checkpoint<T: Float>(
    path: &Path,
    encoder: Option<Arc<Encoder<T>>>,
) -> Result<(SctNet<T>, StyleTransferConfig)> {
    Checkpoint::read(path)?.into_model(encoder)
}
