//! Style transfer with a contrastive coherence-preserving loss and a
//! simple covariance transformation for feature fusion.

pub mod archive;
pub mod autograd;
pub mod ccpl;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image_io;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use archive::Archive;
pub use autograd::{Grads, Tape, Var};
pub use config::{LossWeights, StyleTransferConfig, TrainConfig};
pub use encoder::{Encoder, EncoderSpec, FeaturePyramid, Mode, Tap, WeightsSource};
pub use error::{Error, Result};
pub use eval::{EvalReport, FlowField};
pub use fusion::{Fusion, FusionKind};
pub use inference::{stylize_image, stylize_video};
pub use model::SctNet;
pub use objective::{LossBreakdown, Objective};
pub use tensor::{DType, Float, Tensor};
pub use trainer::{load_checkpoint, Checkpoint, StepReport, Trainer};
