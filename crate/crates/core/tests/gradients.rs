//! Finite-difference check of the full training loss (generator, frozen
//! encoder, content + style + CCPL) in f64.
//!
//! The encoder and decoder contain tens of thousands of ReLU and max-pool
//! units, so a step of 1e-4 regularly straddles a kink. A step of 1e-6 keeps
//! the stencil on one linear piece for almost every coordinate.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccpl_core::ccpl::SeedPolicy;
use ccpl_core::nn::Module;
use ccpl_core::{Encoder, Mode, SctNet, StyleTransferConfig, Tape, Tensor, Trainer, Var};

#[test]
fn full_loss_gradients_match_central_differences() {
    let mut cfg = StyleTransferConfig::desk(Mode::Photorealistic);
    cfg.reduced_channels = 8;
    cfg.ccpl.projector_width = 16;
    cfg.ccpl.anchors_per_layer = 2;
    cfg.ccpl.seed_policy = SeedPolicy::Fixed;
    cfg.train.batch_size = 1;
    let encoder = Arc::new(Encoder::<f64>::random(Mode::Photorealistic, 7));
    let objective = Trainer::new(cfg.clone(), encoder.clone()).unwrap().objective().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let content = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let style = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let taps = objective.generated_taps();

    let loss = |model: &SctNet<f64>, tape: &Tape<f64>| -> Var<f64> {
        let fwd = model.forward(tape, &Var::constant(content.clone()), &Var::constant(style.clone()), &taps).unwrap();
        let g = model.encoder().encode(tape, &fwd.generated, &taps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        objective.evaluate(tape, &fwd.content, &fwd.style, &g, &model.projectors, &mut rng).unwrap().0
    };

    let model = SctNet::new(&cfg, encoder).unwrap();
    let tape = Tape::new();
    let total = loss(&model, &tape);
    let grads = tape.backward(&total).unwrap();
    let params = model.trainable();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for group in ["fusion.", "decoder.", "projector."] {
        let pool: Vec<_> = params.iter().filter(|(n, _)| n.starts_with(group)).collect();
        let mut taken = 0;
        while taken < 4 {
            let (name, p) = pool[rng.random_range(0..pool.len())];
            let idx = rng.random_range(0..p.len());
            let analytic = grads.wrt(p).map(|g| g.data()[idx]).unwrap_or(0.0);
            if analytic.abs() < 1e-3 {
                continue;
            }
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, q| {
                    if n == name {
                        let mut t = (**q).clone();
                        t.data_mut()[idx] += delta;
                        *q = Arc::new(t);
                    }
                });
                loss(&m, &Tape::no_grad()).item()
            };
            let h = 1e-6;
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic} numeric {numeric}");
            taken += 1;
            checked += 1;
        }
    }
    assert_eq!(checked, 12);
}
