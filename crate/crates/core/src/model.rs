//! Encoder -> fusion -> decoder, plus the CCPL projectors used in training.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::ccpl::Projectors;
use crate::config::StyleTransferConfig;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, FeaturePyramid, Mode, Tap};
use crate::error::{Error, Result};
use crate::fusion::{FuseFeatures, Fusion};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

/// Stream ids for the seeded generators derived from `train.seed`.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const CCPL: u64 = 2;
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Output of a training forward pass.
pub struct Forward<T> {
    pub generated: Var<T>,
    pub content: FeaturePyramid<T>,
    pub style: FeaturePyramid<T>,
}

#[derive(Clone)]
pub struct SctNet<T> {
    encoder: Arc<Encoder<T>>,
    pub fusion: Fusion<T>,
    pub decoder: Decoder<T>,
    pub projectors: Projectors<T>,
}

impl<T: Float> SctNet<T> {
    /// Freshly initialised trainable parts, seeded from `cfg.train.seed`.
    pub fn new(cfg: &StyleTransferConfig, encoder: Arc<Encoder<T>>) -> Result<Self> {
        if encoder.mode() != cfg.mode {
            return Err(Error::Config(format!(
                "encoder was built for {} mode but the config asks for {}",
                encoder.mode(),
                cfg.mode
            )));
        }
        let mut rng = seeded_rng(cfg.train.seed, streams::INIT);
        let fusion = Fusion::random(cfg.fusion, cfg.mode.deepest_channels(), cfg.reduced_channels, &mut rng);
        let decoder = Decoder::random(cfg.mode, &mut rng);
        let width = cfg.ccpl.projector_width;
        let projectors = Projectors::random(&cfg.layers.ccpl, width, width, &mut rng);
        Ok(Self { encoder, fusion, decoder, projectors })
    }

    pub fn mode(&self) -> Mode {
        self.encoder.mode()
    }

    pub fn encoder(&self) -> &Arc<Encoder<T>> {
        &self.encoder
    }

    /// Fuses the deepest features of `content` and `style` and decodes.
    /// The returned pyramids hold `taps` (plus the deepest tap) of both inputs.
    pub fn forward(&self, tape: &Tape<T>, content: &Var<T>, style: &Var<T>, taps: &[Tap]) -> Result<Forward<T>> {
        let deepest = self.mode().deepest_tap();
        let mut taps = taps.to_vec();
        taps.push(deepest);
        let c = self.encoder.encode(tape, content, &taps)?;
        let s = self.encoder.encode(tape, style, &taps)?;
        let fused = self.fusion.fuse(tape, c.get(deepest)?, s.get(deepest)?)?;
        let generated = self.decoder.decode(tape, &fused)?;
        Ok(Forward { generated, content: c, style: s })
    }

    /// Inference on inputs that already satisfy the encoder's size rules.
    /// Touches neither the projectors nor any CCPL code.
    pub fn generate(&self, content: &Tensor<T>, style: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let out = self.forward(
            &tape,
            &Var::constant(Arc::new(content.clone())),
            &Var::constant(Arc::new(style.clone())),
            &[],
        )?;
        Ok(out.generated.value().clone())
    }

    /// Named trainable parameters: fusion, decoder, projectors.
    pub fn trainable(&self) -> Vec<(String, Arc<Tensor<T>>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }
}

impl<T: Float> Module<T> for SctNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        self.fusion.visit_params(f);
        self.decoder.visit_params(f);
        self.projectors.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        self.fusion.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.projectors.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_mismatch_is_refused() {
        let cfg = StyleTransferConfig::for_mode(Mode::Artistic);
        let enc = Arc::new(Encoder::<f32>::random(Mode::Photorealistic, 0));
        assert!(SctNet::new(&cfg, enc).is_err());
    }

    #[test]
    fn generate_keeps_size_and_names_are_unique() {
        let cfg = StyleTransferConfig::for_mode(Mode::Photorealistic);
        let enc = Arc::new(Encoder::<f32>::random(Mode::Photorealistic, 0));
        let net = SctNet::new(&cfg, enc).unwrap();
        let c = Tensor::from_fn(&[1, 3, 32, 48], |i| (i % 13) as f32 / 13.0);
        let s = Tensor::from_fn(&[1, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        assert_eq!(net.generate(&c, &s).unwrap().shape(), &[1, 3, 32, 48]);
        let names: Vec<String> = net.trainable().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert!(names.iter().any(|n| n.starts_with("projector.relu1_1")));
    }
}
