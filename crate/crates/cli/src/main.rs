use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ccpl_core::config::ConfigFile;
use ccpl_core::data::Dataset;
use ccpl_core::eval::{evaluate_suite, read_external_scores, SuiteInputs};
use ccpl_core::image_io::{is_image_path, load_tensor, save_png};
use ccpl_core::synth::{self, TranslatingClip};
use ccpl_core::{
    load_checkpoint, stylize_image, stylize_video, Archive, Encoder, EncoderSpec, Mode, StyleTransferConfig, Trainer,
    WeightsSource,
};

#[derive(Parser)]
#[command(name = "ccpl", version, about = "Arbitrary style transfer for images and video")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train fusion, decoder and projectors on content and style folders.
    Train(TrainArgs),
    /// Stylize an image, a directory of frames, or (with ffmpeg) a video file.
    Stylize(StylizeArgs),
    /// Score stylized frames: SIFID, perceptual distance and temporal loss.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset or a translating clip with exact flows.
    Synth(SynthArgs),
    /// Write a seeded random encoder as a weight archive.
    InitEncoder(InitEncoderArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    content_dir: PathBuf,
    #[arg(long)]
    style_dir: PathBuf,
    /// Config file (TOML dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Encoder weight archive; overrides the config.
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    /// Training preset (`full` or `desk`) when the config names none.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Log the loss every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct StylizeArgs {
    /// Image file, directory of frames, or video file.
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the checkpoint's mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output PNG for an image, directory for frames, file for a video.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    /// Frame rate used when re-encoding a video.
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of stylized frames, sorted by name.
    #[arg(long)]
    stylized: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Directory of `flow_TTTT_UUUU.flo` files.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    intervals: Vec<usize>,
    /// Table output; key-value output goes next to it with a `.kv` extension.
    #[arg(long)]
    report: PathBuf,
    /// Encoder used for SIFID and the perceptual distance.
    #[arg(long, default_value = "artistic")]
    mode: Mode,
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    /// External perceptual scores (`frame_a frame_b score` per line).
    #[arg(long)]
    perceptual_scores: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    content: usize,
    #[arg(long, default_value_t = 5)]
    style: usize,
    #[arg(long, default_value_t = 96)]
    width: u32,
    #[arg(long, default_value_t = 80)]
    height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a clip of this many frames under `clip/` with flows.
    #[arg(long)]
    clip_frames: Option<usize>,
}

#[derive(Args)]
struct InitEncoderArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Train(a) => train(a),
        Cmd::Stylize(a) => stylize(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Synth(a) => synth_data(a),
        Cmd::InitEncoder(a) => init_encoder(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut cfg = StyleTransferConfig::resolve(&file, a.mode)?;
    if file.train.preset.is_none() {
        if let Some(p) = &a.preset {
            cfg.train = ccpl_core::TrainConfig::preset(p)?;
        }
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(w) = a.encoder_weights {
        cfg.encoder = WeightsSource::Archive(w);
    }
    cfg.validate()?;
    let encoder = Arc::new(Encoder::<f32>::load(&cfg.encoder_spec())?);
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, cfg.clone(), encoder)?,
        None => Trainer::new(cfg.clone(), encoder)?,
    };
    let mut data = Dataset::open(&a.content_dir, &a.style_dir)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    info!(
        "training {} mode for {} steps from step {} (batch {}, crop {})",
        cfg.mode,
        cfg.train.iterations,
        trainer.step_count(),
        cfg.train.batch_size,
        cfg.train.crop
    );
    let start = Instant::now();
    let every = a.log_every.max(1);
    trainer.run(&mut data, Some(&a.out), |r| {
        if r.step % every == 0 || r.step == 1 {
            info!("step {:>7} {:>8.1}s {}", r.step, start.elapsed().as_secs_f64(), r.breakdown);
        }
    })?;
    info!("wrote {}", a.out.join("latest.ckpt").display());
    Ok(())
}

const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "mov", "avi", "mkv", "webm", "gif"];

fn is_video_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn run_ffmpeg(args: &[&str]) -> Result<()> {
    let status = Command::new("ffmpeg")
        .args(["-hide_banner", "-loglevel", "error", "-y"])
        .args(args)
        .status()
        .context("video files need ffmpeg on PATH; pass a directory of frames instead")?;
    ensure!(status.success(), "ffmpeg failed with {status}");
    Ok(())
}

fn stylize(a: StylizeArgs) -> Result<()> {
    let encoder = match &a.encoder_weights {
        Some(path) => {
            let ckpt_cfg = ccpl_core::Checkpoint::read(&a.ckpt)?.config()?;
            Some(Arc::new(Encoder::<f32>::load(&EncoderSpec::new(ckpt_cfg.mode, WeightsSource::Archive(path.clone())))?))
        }
        None => None,
    };
    let (model, cfg) = load_checkpoint::<f32>(&a.ckpt, encoder)?;
    let mode = a.mode.unwrap_or(cfg.mode);
    let style = load_tensor::<f32>(&a.style)?;
    let start = Instant::now();
    if a.content.is_dir() {
        let written = stylize_video(&model, &a.content, &style, mode, &a.out)?;
        info!("stylized {} frames into {} in {:.1}s", written.len(), a.out.display(), start.elapsed().as_secs_f64());
    } else if is_video_path(&a.content) {
        let work = tempfile::tempdir()?;
        let (frames, styled) = (work.path().join("in"), work.path().join("out"));
        std::fs::create_dir_all(&frames)?;
        let input = a.content.to_string_lossy();
        let pattern = frames.join("frame_%06d.png");
        run_ffmpeg(&["-i", &input, &pattern.to_string_lossy()])?;
        let written = stylize_video(&model, &frames, &style, mode, &styled)?;
        let fps = a.fps.to_string();
        let out_pattern = styled.join("frame_%06d.png");
        run_ffmpeg(&["-framerate", &fps, "-i", &out_pattern.to_string_lossy(), "-pix_fmt", "yuv420p", &a.out.to_string_lossy()])?;
        info!("stylized {} frames into {}", written.len(), a.out.display());
    } else if is_image_path(&a.content) {
        let content = load_tensor::<f32>(&a.content)?;
        let out = stylize_image(&model, &content, &style, mode)?;
        save_png(&out, &a.out)?;
        info!("wrote {} in {:.2}s", a.out.display(), start.elapsed().as_secs_f64());
    } else {
        bail!("{} is not a PNG/JPEG image, a frame directory or a video file", a.content.display());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let source = match a.encoder_weights {
        Some(p) => WeightsSource::Archive(p),
        None => WeightsSource::RandomSeeded(0),
    };
    let encoder = Encoder::<f32>::load(&EncoderSpec::new(a.mode, source))?;
    let external = a.perceptual_scores.as_deref().map(read_external_scores).transpose()?;
    let inputs = SuiteInputs {
        stylized_dir: &a.stylized,
        style_image: &a.style,
        flow_dir: a.flows.as_deref(),
        intervals: &a.intervals,
        external_perceptual: external.as_ref(),
    };
    let report = evaluate_suite(&inputs, &encoder, &encoder)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let table = report.to_table();
    std::fs::write(&a.report, &table).with_context(|| format!("writing {}", a.report.display()))?;
    let kv = a.report.with_extension("kv");
    std::fs::write(&kv, report.to_key_values()).with_context(|| format!("writing {}", kv.display()))?;
    print!("{table}");
    info!("wrote {} and {}", a.report.display(), kv.display());
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let (c, s) = synth::write_dataset(&a.out, a.content, a.style, (a.width, a.height), a.seed)?;
    info!("wrote {} content images to {} and {} style images to {}", a.content, c.display(), a.style, s.display());
    if let Some(n) = a.clip_frames {
        let clip = TranslatingClip::new(a.seed, n, a.width, a.height, (2, 1));
        let (frames, flows) = (a.out.join("clip/frames"), a.out.join("clip/flows"));
        clip.write(&frames, &flows, &[1, 10])?;
        info!("wrote a {n}-frame clip to {} with flows in {}", frames.display(), flows.display());
    }
    Ok(())
}

fn init_encoder(a: InitEncoderArgs) -> Result<()> {
    let archive: Archive = Encoder::<f32>::random(a.mode, a.seed).to_archive();
    archive.save(&a.out)?;
    info!("wrote a random {} encoder (seed {}) to {}", a.mode, a.seed, a.out.display());
    Ok(())
}
