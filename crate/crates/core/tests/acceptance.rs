//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any failed.
//!
//! The two desk-scale training runs dominate the runtime (about 8 minutes
//! each on one core). Their outputs are shared: the `lambda_ccp = 5` model is
//! the smoke-test run, the "5" arm of the direction test, and the model used
//! for the inference and checkpoint checks.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ccpl_core::ccpl::{ccpl_infonce, ops_executed, Projectors};
use ccpl_core::data::Dataset;
use ccpl_core::eval::{sifid, sifid_from_features, temporal_loss, TEMPORAL_SCALE};
use ccpl_core::fusion::{adain_fuse, std_normalize, SctParams};
use ccpl_core::image_io::{load_tensor, list_images, rgb_to_tensor};
use ccpl_core::kernels::PadMode;
use ccpl_core::nn::{Conv2d, Module};
use ccpl_core::synth::{self, TranslatingClip};
use ccpl_core::{
    load_checkpoint, stylize_image, Encoder, FeaturePyramid, FlowField, Mode, Objective, SctNet, StyleTransferConfig, Tap, Tape, Tensor, Trainer, Var,
};

/// Seed shared by both desk-scale runs and recorded here as required.
const DESK_SEED: u64 = 0;
const CLIP_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn unit_rows(rng: &mut impl Rng, m: usize, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    for row in v.chunks_exact_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn infonce(z_g: &[f64], z_c: &[f64], m: usize, d: usize, tau: f64) -> f64 {
    let tape = Tape::<f64>::no_grad();
    let g = Var::constant(Tensor::new(&[m, d], z_g.to_vec()).unwrap());
    let c = Var::constant(Tensor::new(&[m, d], z_c.to_vec()).unwrap());
    ccpl_infonce(&tape, &g, &c, tau).unwrap().item()
}

/// Double loop over rows with a max-shifted log-sum-exp.
fn infonce_brute_force(z_g: &[f64], z_c: &[f64], m: usize, d: usize, tau: f64) -> f64 {
    let dot = |i: usize, j: usize| -> f64 { (0..d).map(|k| z_g[i * d + k] * z_c[j * d + k]).sum::<f64>() / tau };
    let mut total = 0.0;
    for i in 0..m {
        let logits: Vec<f64> = (0..m).map(|j| dot(i, j)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total
}

fn infonce_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(2..=64);
        let d = rng.random_range(1..=256);
        let (g, c) = (unit_rows(&mut rng, m, d), unit_rows(&mut rng, m, d));
        worst = worst.max(rel_err(infonce(&g, &c, m, d, 0.07), infonce_brute_force(&g, &c, m, d, 0.07)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-5 && secs < 10.0, format!("max rel err {worst:.2e} over 100 instances, {secs:.2}s"))
}

fn degenerate_value() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row = unit_rows(&mut rng, 1, 16);
    let z: Vec<f64> = row.iter().copied().cycle().take(8 * 16).collect();
    let v = infonce(&z, &z, 8, 16, 0.07);
    let expected = 8.0 * 8f64.ln();
    outcome((v - expected).abs() <= 1e-3, format!("{v:.6} vs 8 ln 8 = {expected:.6}"))
}

/// Two-layer generator `conv3x3 -> relu -> conv3x3` that maps an image
/// straight to a 64-channel feature map standing in for `relu1_1`.
#[derive(Clone)]
struct ToyGenerator {
    conv1: Conv2d<f64>,
    conv2: Conv2d<f64>,
    projectors: Projectors<f64>,
}

impl ToyGenerator {
    fn features(&self, tape: &Tape<f64>, x: &Var<f64>) -> FeaturePyramid<f64> {
        let h = tape.relu(&self.conv1.forward(tape, x, false).unwrap());
        let mut pyr = FeaturePyramid::new((x.shape()[2], x.shape()[3]));
        pyr.insert(Tap::Relu1_1, self.conv2.forward(tape, &h, false).unwrap());
        pyr
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<f64>>)) {
        self.conv1.visit_mut("g.conv1", f);
        self.conv2.visit_mut("g.conv2", f);
        self.projectors.visit_params_mut(f);
    }
}

/// Content + style + CCPL total loss on the toy generator's features in f64,
/// with CCPL sampling reseeded identically on every evaluation. Content and
/// style targets are real encoder features.
fn gradient_check() -> Outcome {
    let layers = vec![Tap::Relu1_1];
    let mut cfg = StyleTransferConfig::for_mode(Mode::Photorealistic);
    cfg.layers.content = layers.clone();
    cfg.layers.style = layers.clone();
    cfg.layers.ccpl = layers.clone();
    cfg.ccpl.layers = layers.clone();
    let objective = Objective { weights: cfg.weights, layers: cfg.layers.clone(), ccpl: cfg.ccpl.settings() };
    let encoder = Encoder::<f64>::random(Mode::Photorealistic, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let content = rgb_to_tensor::<f64>(&synth::content_image(11, 16, 16));
    let style = rgb_to_tensor::<f64>(&synth::style_image(12, 16, 16));
    let model = ToyGenerator {
        conv1: Conv2d::random(3, 8, 3, PadMode::Reflect, &mut rng),
        conv2: Conv2d::random(8, 64, 3, PadMode::Reflect, &mut rng),
        projectors: Projectors::random(&layers, 16, 16, &mut rng),
    };
    let tape = Tape::no_grad();
    let c_pyr = encoder.encode(&tape, &Var::constant(content.clone()), &layers).unwrap();
    let s_pyr = encoder.encode(&tape, &Var::constant(style), &layers).unwrap();

    let loss = |model: &ToyGenerator, tape: &Tape<f64>| -> Var<f64> {
        let g_pyr = model.features(tape, &Var::constant(content.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        objective.evaluate(tape, &c_pyr, &s_pyr, &g_pyr, &model.projectors, &mut rng).unwrap().0
    };

    let tape = Tape::new();
    let total = loss(&model, &tape);
    let grads = tape.backward(&total).unwrap();
    let mut params = Vec::new();
    model.clone().visit_mut(&mut |n, p| params.push((n.to_string(), p.clone())));

    // Twelve coordinates from the generator and twelve from the projectors,
    // uniform within each group; exact zeros (dead units) are redrawn since
    // there is nothing to compare.
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for group in ["g.", "projector."] {
        let pool: Vec<&(String, Arc<Tensor<f64>>)> = params.iter().filter(|(n, _)| n.starts_with(group)).collect();
        let group_len: usize = pool.iter().map(|(_, p)| p.len()).sum();
        let target = coords.len() + 12;
        while coords.len() < target {
            let mut k = rng.random_range(0..group_len);
            let (name, p) = pool.iter().find(|(_, p)| k < p.len() || { k -= p.len(); false }).unwrap();
            let g = grads.wrt(p).map(|g| g.data()[k]).unwrap_or(0.0);
            if g != 0.0 && !coords.iter().any(|(n, i, _)| n == name && *i == k) {
                coords.push((name.clone(), k, g));
            }
        }
    }

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, idx, analytic) in &coords {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            m.visit_mut(&mut |n, p| {
                if n == name {
                    let mut t = (**p).clone();
                    t.data_mut()[*idx] += delta;
                    *p = Arc::new(t);
                }
            });
            loss(&m, &Tape::no_grad()).item()
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let e = rel_err(*analytic, numeric);
        if e >= worst {
            worst = e;
            worst_at = format!("{name}[{idx}]: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    outcome(
        coords.len() >= 20 && worst <= 1e-3,
        format!("{} coordinates, max rel err {worst:.2e} at {worst_at}", coords.len()),
    )
}

fn conv1x1(weight: &[f64], cout: usize, cin: usize, bias: &[f64]) -> Conv2d<f64> {
    Conv2d::new(
        Tensor::new(&[cout, cin, 1, 1], weight.to_vec()).unwrap(),
        Tensor::new(&[cout], bias.to_vec()).unwrap(),
        PadMode::Zero,
    )
}

/// Hand computation of the SCT pass on one `[C, H*W]` pair.
fn sct_by_hand(
    fc: &DMatrix<f64>,
    fs: &DMatrix<f64>,
    (wc, bc): (&DMatrix<f64>, &DVector<f64>),
    (ws, bs): (&DMatrix<f64>, &DVector<f64>),
    (wr, br): (&DMatrix<f64>, &DVector<f64>),
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_c = fc.ncols() as f64;
    let mut c_norm = fc.clone();
    for mut row in c_norm.row_iter_mut() {
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_c;
        row.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
    }
    let s_mean = fs.column_mean();
    let mut s_centred = fs.clone();
    for mut col in s_centred.column_iter_mut() {
        col -= &s_mean;
    }
    let affine = |w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>| {
        let mut y = w * x;
        for mut col in y.column_iter_mut() {
            col += b;
        }
        y
    };
    let c_red = affine(wc, bc, &c_norm);
    let s_red = affine(ws, bs, &s_centred);
    let mut s_red_c = s_red.clone();
    let s_red_mean = s_red.column_mean();
    for mut col in s_red_c.column_iter_mut() {
        col -= &s_red_mean;
    }
    let cov = &s_red_c * s_red_c.transpose() / (fs.ncols() as f64 - 1.0);
    // Per pixel: covariance times the reduced content vector.
    let mut fused = DMatrix::zeros(c_red.nrows(), c_red.ncols());
    for p in 0..c_red.ncols() {
        fused.set_column(p, &(&cov * c_red.column(p)));
    }
    let mut out = affine(wr, br, &fused);
    for mut col in out.column_iter_mut() {
        col += &s_mean;
    }
    (cov, out)
}

fn sct_oracle() -> Outcome {
    let mut params = SctParams::<f64>::random(&[4, 2], &mut ChaCha8Rng::seed_from_u64(0));
    let wc = [0.5, -0.25, 1.0, 0.0, 0.75, 0.5, -0.5, 0.25];
    let ws = [-0.5, 1.0, 0.25, 0.5, 0.0, -0.75, 1.0, 0.5];
    let wr = [1.0, 0.5, -0.5, 0.25, 0.75, -1.0, 0.0, 0.5];
    let (bc, bs, br) = ([0.1, -0.2], [0.05, 0.3], [0.0, 0.1, -0.1, 0.2]);
    params.cnet = vec![conv1x1(&wc, 2, 4, &bc)];
    params.snet = vec![conv1x1(&ws, 2, 4, &bs)];
    params.restore = conv1x1(&wr, 4, 2, &br);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut map = || Tensor::<f64>::from_fn(&[1, 4, 3, 3], |_| rng.random_range(-2.0..2.0));
    let (fc, fs) = (map(), map());
    let tape = Tape::no_grad();
    let trace = params.trace(&tape, &Var::constant(fc.clone()), &Var::constant(fs.clone())).unwrap();

    let m = |rows: usize, cols: usize, d: &[f64]| DMatrix::from_row_slice(rows, cols, d);
    let (cov, out) = sct_by_hand(
        &m(4, 9, fc.data()),
        &m(4, 9, fs.data()),
        (&m(2, 4, &wc), &DVector::from_row_slice(&bc)),
        (&m(2, 4, &ws), &DVector::from_row_slice(&bs)),
        (&m(4, 2, &wr), &DVector::from_row_slice(&br)),
    );
    let cov_err = cov.iter().zip(trace.covariance.value().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let out_err = out.iter().zip(m(4, 9, trace.output.value().data()).iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Covariance symmetry and PSD on random style inputs through the full
    // artistic-width reduction stack.
    let stack = SctParams::<f64>::random(&[64, 16, 8, 4], &mut ChaCha8Rng::seed_from_u64(5));
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    for k in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + k);
        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        let f = Tensor::<f64>::from_fn(&[1, 64, h, w], |_| r.random_range(-3.0..3.0));
        let t = stack.trace(&Tape::no_grad(), &Var::constant(f.clone()), &Var::constant(f)).unwrap();
        let c = DMatrix::from_row_slice(4, 4, t.covariance.value().data());
        asym = asym.max((&c - c.transpose()).abs().max());
        min_eig = min_eig.min(c.symmetric_eigenvalues().min());
    }
    outcome(
        cov_err <= 1e-6 && out_err <= 1e-6 && asym == 0.0 && min_eig >= -1e-6,
        format!("toy |dcov| {cov_err:.1e}, |dout| {out_err:.1e}; 50 inputs: asymmetry {asym:.1e}, min eigenvalue {min_eig:.3e}"),
    )
}

fn plane_stats(t: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (_, _, h, w) = t.dims4();
    t.data()
        .chunks_exact(h * w)
        .map(|p| {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
            (mean, var.sqrt())
        })
        .collect()
}

fn normalization_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mean_err, mut std_err, mut tm_err, mut ts_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let c = rng.random_range(1..16);
        // Unit-scale or larger channels: the 1e-5 inside the std shifts a
        // channel of variance v by about 5e-6 / v.
        let feature = |rng: &mut ChaCha8Rng| {
            let (h, w) = (rng.random_range(4..12), rng.random_range(4..12));
            let planes: Vec<(f64, f64)> = (0..c).map(|_| (rng.random_range(-5.0..5.0), rng.random_range(1.0..5.0))).collect();
            Tensor::<f64>::from_fn(&[2, c, h, w], |i| {
                let (off, scale) = planes[(i / (h * w)) % c];
                off + scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let (fc, fs) = (feature(&mut rng), feature(&mut rng));
        let tape = Tape::no_grad();
        let (norm, _, _) = std_normalize(&tape, &Var::constant(fc.clone())).unwrap();
        for (m, s) in plane_stats(norm.value()) {
            mean_err = mean_err.max(m.abs());
            std_err = std_err.max((s - 1.0).abs());
        }
        let fused = adain_fuse(&tape, &Var::constant(fc), &Var::constant(fs.clone())).unwrap();
        for ((m, s), (ms, ss)) in plane_stats(fused.value()).into_iter().zip(plane_stats(&fs)) {
            tm_err = tm_err.max((m - ms).abs());
            ts_err = ts_err.max((s - ss).abs());
        }
    }
    outcome(
        mean_err < 1e-5 && std_err <= 1e-4 && tm_err <= 1e-4 && ts_err <= 1e-4,
        format!(
            "normalised |mean| {mean_err:.1e}, |std-1| {std_err:.1e}; adain |dmean| {tm_err:.1e}, |dstd| {ts_err:.1e}"
        ),
    )
}

struct DeskRun {
    trainer: Trainer<f32>,
    totals: Vec<f64>,
    elapsed: Duration,
}

fn desk_run(lambda_ccp: f64, content_dir: &Path, style_dir: &Path, encoder: &Arc<Encoder<f32>>) -> DeskRun {
    let mut cfg = StyleTransferConfig::desk(Mode::Artistic);
    cfg.weights.lambda_ccp = lambda_ccp;
    cfg.train.seed = DESK_SEED;
    let mut trainer = Trainer::new(cfg, encoder.clone()).unwrap();
    let mut data = Dataset::open(content_dir, style_dir).unwrap();
    let start = Instant::now();
    let reports = trainer.run(&mut data, None, |_| {}).unwrap();
    DeskRun { trainer, totals: reports.iter().map(|r| r.breakdown.total).collect(), elapsed: start.elapsed() }
}

fn smoke_test(run: &DeskRun) -> Outcome {
    let t = &run.totals;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&t[..10]), mean(&t[t.len() - 10..]));
    let mins = run.elapsed.as_secs_f64() / 60.0;
    outcome(
        t.len() == 500 && last <= 0.7 * first && mins < 15.0,
        format!("{} steps, mean total {first:.1} -> {last:.1} (ratio {:.3}), {mins:.1} min", t.len(), last / first),
    )
}

/// Mean interval-1 temporal loss (x100) of clamped stylized clip frames,
/// averaged over all style images.
fn clip_temporal_loss(model: &SctNet<f32>, clip: &TranslatingClip, styles: &[Tensor<f32>]) -> f64 {
    let frames: Vec<Tensor<f32>> = clip.tensors();
    let flow = clip.flow(1);
    let mut losses = Vec::new();
    for style in styles {
        let out: Vec<Tensor<f32>> = frames
            .iter()
            .map(|f| stylize_image(model, f, style, Mode::Artistic).unwrap().map(|v| v.clamp(0.0, 1.0)))
            .collect();
        for t in 0..out.len() - 1 {
            losses.push(temporal_loss(&out[t], &out[t + 1], &flow).unwrap().unwrap() * TEMPORAL_SCALE);
        }
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn direction_test(with: &DeskRun, without: &DeskRun, styles: &[Tensor<f32>]) -> Outcome {
    let clip = TranslatingClip::new(CLIP_SEED, 20, 64, 64, (2, 1));
    let l5 = clip_temporal_loss(&with.trainer.model, &clip, styles);
    let l0 = clip_temporal_loss(&without.trainer.model, &clip, styles);
    outcome(l5 < l0, format!("temporal loss lambda_ccp=5 {l5:.4} vs lambda_ccp=0 {l0:.4} (seed {DESK_SEED})"))
}

fn temporal_loss_correctness() -> Outcome {
    let frame = rgb_to_tensor::<f64>(&synth::content_image(21, 40, 30));
    let same = temporal_loss(&frame, &frame, &FlowField::zeros(40, 30)).unwrap().unwrap();
    let clip = TranslatingClip::new(22, 12, 40, 30, (-2, 1));
    let frames: Vec<Tensor<f64>> = clip.tensors();
    let mut worst = 0.0f64;
    for interval in [1, 10] {
        for t in 0..frames.len() - interval {
            let l = temporal_loss(&frames[t], &frames[t + interval], &clip.flow(interval)).unwrap().unwrap();
            worst = worst.max(l * TEMPORAL_SCALE);
        }
    }
    outcome(same == 0.0 && worst < 1e-4, format!("identical frames {same}, translation clip max {worst:.1e}"))
}

fn sifid_sanity() -> Outcome {
    let encoder = Encoder::<f32>::random(Mode::Artistic, 0);
    let x = rgb_to_tensor::<f32>(&synth::style_image(31, 64, 64));
    let self_dist = sifid(&x, &x, &encoder).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, n) = (16, 200);
    let a = DMatrix::<f64>::from_fn(c, n, |_, _| rng.sample(StandardNormal));
    let v = DVector::<f64>::from_fn(c, |_, _| rng.random_range(-2.0..2.0));
    let mut b = a.clone();
    for mut col in b.column_iter_mut() {
        col += &v;
    }
    let shifted = sifid_from_features(&a, &b).unwrap();
    let expected = v.norm_squared();
    outcome(
        self_dist.abs() <= 1e-5 && (shifted - expected).abs() <= 1e-4,
        format!("sifid(x, x) = {self_dist:.1e}; shifted features {shifted:.6} vs |v|^2 {expected:.6}"),
    )
}

fn inference_contracts(model: &SctNet<f32>, style: &Tensor<f32>) -> Outcome {
    let ops_before = ops_executed();
    let frame = rgb_to_tensor::<f32>(&synth::content_image(41, 72, 56));
    let a = stylize_image(model, &frame, style, Mode::Artistic).unwrap();
    let _other = stylize_image(model, &rgb_to_tensor(&synth::content_image(42, 72, 56)), style, Mode::Artistic);
    let b = stylize_image(model, &frame, style, Mode::Artistic).unwrap();
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sizes = Vec::new();
    while sizes.len() < 10 {
        let (h, w) = (rng.random_range(9..100usize), rng.random_range(9..100usize));
        if h % 8 != 0 && w % 8 != 0 {
            sizes.push((h, w));
        }
    }
    let mismatched: Vec<_> = sizes
        .iter()
        .filter(|&&(h, w)| {
            let c = Tensor::<f32>::from_fn(&[1, 3, h, w], |i| ((i * 37) % 101) as f32 / 100.0);
            stylize_image(model, &c, style, Mode::Artistic).unwrap().shape() != [1, 3, h, w]
        })
        .collect();
    let ccpl_ops = ops_executed() - ops_before;
    outcome(
        identical && mismatched.is_empty() && ccpl_ops == 0,
        format!("duplicate frames bit-identical: {identical}; size mismatches {mismatched:?} over {sizes:?}; CCPL ops {ccpl_ops}"),
    )
}

fn checkpoint_round_trip(trainer: &Trainer<f32>, encoder: &Arc<Encoder<f32>>, style: &Tensor<f32>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let probe = rgb_to_tensor::<f32>(&synth::content_image(51, 77, 53));
    let before = stylize_image(&trainer.model, &probe, style, Mode::Artistic).unwrap();
    trainer.save_checkpoint(&path).unwrap();
    let (loaded, _) = load_checkpoint::<f32>(&path, Some(encoder.clone())).unwrap();
    let after = stylize_image(&loaded, &probe, style, Mode::Artistic).unwrap();
    let differing = before.data().iter().zip(after.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    outcome(
        before.shape() == after.shape() && differing == 0,
        format!("{differing} of {} values differ after reload", before.len()),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |label: &str, o: Outcome| {
        println!("{} {label}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    println!("acceptance suite");
    report("infonce oracle", infonce_oracle());
    report("degenerate ccpl value", degenerate_value());
    report("gradient check", gradient_check());
    report("sct oracle", sct_oracle());
    report("normalization contracts", normalization_contracts());
    report("temporal loss correctness", temporal_loss_correctness());
    report("sifid sanity", sifid_sanity());

    if std::env::var_os("ACCEPTANCE_QUICK").is_some() {
        println!("ACCEPTANCE_QUICK is set: the training-based criteria were not run");
        std::process::exit(if failed > 0 { 1 } else { 2 });
    }

    let dir = tempfile::tempdir().unwrap();
    let (content_dir, style_dir) = synth::write_dataset(dir.path(), 30, 5, (96, 80), DESK_SEED).unwrap();
    let encoder = Arc::new(Encoder::<f32>::random(Mode::Artistic, DESK_SEED));
    let styles: Vec<Tensor<f32>> = list_images(&style_dir).unwrap().iter().map(|p| load_tensor(p).unwrap()).collect();

    let with_ccpl = desk_run(5.0, &content_dir, &style_dir, &encoder);
    report("desk training smoke test", smoke_test(&with_ccpl));
    let without_ccpl = desk_run(0.0, &content_dir, &style_dir, &encoder);
    report("ccpl direction", direction_test(&with_ccpl, &without_ccpl, &styles));
    report("inference contracts", inference_contracts(&with_ccpl.trainer.model, &styles[0]));
    report("checkpoint round trip", checkpoint_round_trip(&with_ccpl.trainer, &encoder, &styles[0]));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
