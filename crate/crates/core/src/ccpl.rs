//! Contrastive coherence preserving loss.
//!
//! For each loss layer, `N` interior anchors are drawn from the generated
//! feature map and paired with their eight neighbours, giving `8N` difference
//! vectors `anchor - neighbour`. The same locations are read from the content
//! feature map. Both sets go through a shared two-layer projector, are
//! normalised onto the unit sphere, and scored with InfoNCE: the pair taken at
//! the same location is the positive, every other content vector of the same
//! image is a negative.

use std::collections::BTreeMap;
use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{FeaturePyramid, Tap};
use crate::error::{Error, Result};
use crate::nn::{Linear, Module};
use crate::tensor::{lit, Float, Tensor};

/// Offsets `(drow, dcol)` of the eight neighbours, in sampling order.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Added to embedding norms before division.
pub const NORM_EPS: f64 = 1e-8;

pub const DEFAULT_PROJECTOR_WIDTH: usize = 128;

thread_local! {
    static OPS_EXECUTED: Cell<usize> = const { Cell::new(0) };
}

/// Number of sampling / projection / InfoNCE evaluations performed on the
/// calling thread so far. Inference must never move it.
pub fn ops_executed() -> usize {
    OPS_EXECUTED.with(Cell::get)
}

fn count_op() {
    OPS_EXECUTED.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// A new draw every step from the trainer's running generator.
    #[default]
    FreshPerStep,
    /// The same locations every step.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    pub anchors_per_layer: usize,
    pub seed_policy: SeedPolicy,
}

impl SamplingPlan {
    pub fn new(anchors_per_layer: usize) -> Self {
        Self { anchors_per_layer, seed_policy: SeedPolicy::FreshPerStep }
    }

    pub fn vectors_per_layer(&self) -> usize {
        8 * self.anchors_per_layer
    }
}

/// Where a difference vector was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub anchor: (usize, usize),
    /// Index into [`NEIGHBOR_OFFSETS`].
    pub neighbor: u8,
}

impl Location {
    pub fn neighbor_position(&self) -> (usize, usize) {
        let (di, dj) = NEIGHBOR_OFFSETS[self.neighbor as usize];
        ((self.anchor.0 as isize + di) as usize, (self.anchor.1 as isize + dj) as usize)
    }
}

/// `d_g[m]` and `d_c[m]` share `locations[m]`.
pub struct DifferenceVectorBatch<T> {
    pub d_g: Var<T>,
    pub d_c: Var<T>,
    pub locations: Vec<Location>,
}

/// Draws `count` distinct positions `(i, j)` with `1 <= i <= h-2` and
/// `1 <= j <= w-2`.
pub fn sample_anchors(h: usize, w: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if h < 3 || w < 3 {
        return Err(Error::NoInteriorAnchors { height: h, width: w });
    }
    let (ih, iw) = (h - 2, w - 2);
    if count > ih * iw {
        return Err(Error::Config(format!(
            "{count} anchors requested but a {h}x{w} map has only {} interior positions",
            ih * iw
        )));
    }
    Ok(rand::seq::index::sample(rng, ih * iw, count)
        .into_iter()
        .map(|k| (1 + k / iw, 1 + k % iw))
        .collect())
}

/// Builds the difference-vector batch for batch item `item` of two same-shape
/// feature maps. The content side is detached.
pub fn sample_difference_vectors<T: Float>(
    tape: &Tape<T>,
    generated: &Var<T>,
    content: &Var<T>,
    item: usize,
    plan: &SamplingPlan,
    rng: &mut impl Rng,
) -> Result<DifferenceVectorBatch<T>> {
    if generated.shape() != content.shape() {
        return Err(Error::Shape(format!(
            "generated features {:?} vs content features {:?}",
            generated.shape(),
            content.shape()
        )));
    }
    if generated.shape().len() != 4 {
        return Err(Error::Shape(format!("expected [N,C,H,W] features, got {:?}", generated.shape())));
    }
    count_op();
    let (h, w) = (generated.shape()[2], generated.shape()[3]);
    let anchors = sample_anchors(h, w, plan.anchors_per_layer, rng)?;
    let locations: Vec<Location> = anchors
        .iter()
        .flat_map(|&a| (0..8u8).map(move |k| Location { anchor: a, neighbor: k }))
        .collect();
    let anchor_pos: Vec<(usize, usize)> = locations.iter().map(|l| l.anchor).collect();
    let neighbor_pos: Vec<(usize, usize)> = locations.iter().map(Location::neighbor_position).collect();

    let diff = |f: &Var<T>| -> Result<Var<T>> {
        let a = tape.gather_positions(f, item, &anchor_pos)?;
        let n = tape.gather_positions(f, item, &neighbor_pos)?;
        tape.sub(&a, &n)
    };
    let d_g = diff(generated)?;
    let d_c = diff(&content.detach())?;
    Ok(DifferenceVectorBatch { d_g, d_c, locations })
}

/// Two-layer MLP with a rectifier in between.
#[derive(Clone)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Float> Projector<T> {
    pub fn random(in_features: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self { fc1: Linear::random(in_features, hidden, rng), fc2: Linear::random(hidden, out, rng) }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.fc2.out_features()
    }

    fn embed(&self, tape: &Tape<T>, d: &Var<T>) -> Result<Var<T>> {
        let h = tape.relu(&self.fc1.forward(tape, d)?);
        let z = self.fc2.forward(tape, &h)?;
        tape.normalize_rows(&z, lit(NORM_EPS))
    }
}

/// Maps both sides of a batch through the shared projector: `(z_g, z_c)`,
/// each `[M, D]` with unit rows.
pub fn project<T: Float>(
    tape: &Tape<T>,
    batch: &DifferenceVectorBatch<T>,
    projector: &Projector<T>,
) -> Result<(Var<T>, Var<T>)> {
    let c = batch.d_g.shape()[1];
    if c != projector.in_features() {
        return Err(Error::Shape(format!(
            "projector expects {}-wide vectors, batch has {c}",
            projector.in_features()
        )));
    }
    count_op();
    Ok((projector.embed(tape, &batch.d_g)?, projector.embed(tape, &batch.d_c)?))
}

/// InfoNCE summed over the `M` rows:
/// `sum_m -log( exp(z_g[m].z_c[m]/tau) / sum_n exp(z_g[m].z_c[n]/tau) )`.
pub fn ccpl_infonce<T: Float>(tape: &Tape<T>, z_g: &Var<T>, z_c: &Var<T>, tau: f64) -> Result<Var<T>> {
    if z_g.shape() != z_c.shape() || z_g.shape().len() != 2 {
        return Err(Error::Shape(format!("embeddings {:?} vs {:?}", z_g.shape(), z_c.shape())));
    }
    let m = z_g.shape()[0];
    if m < 2 {
        return Err(Error::TooFewVectors(m));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    count_op();
    let sims = tape.bmm(z_g, z_c, false, true)?;
    let logits = tape.scale(&sims, lit(1.0 / tau));
    tape.cross_entropy_diag(&logits)
}

/// Per-layer projectors, one for each CCPL layer.
#[derive(Clone)]
pub struct Projectors<T> {
    pub layers: BTreeMap<Tap, Projector<T>>,
}

impl<T: Float> Projectors<T> {
    pub fn random(layers: &[Tap], hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: layers.iter().map(|&t| (t, Projector::random(t.channels(), hidden, out, rng))).collect(),
        }
    }

    pub fn get(&self, tap: Tap) -> Result<&Projector<T>> {
        self.layers.get(&tap).ok_or_else(|| Error::Config(format!("no projector for layer {tap}")))
    }
}

impl<T: Float> Module<T> for Projectors<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        for (tap, p) in &self.layers {
            p.fc1.visit(&format!("projector.{tap}.fc1"), f);
            p.fc2.visit(&format!("projector.{tap}.fc2"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        for (tap, p) in self.layers.iter_mut() {
            p.fc1.visit_mut(&format!("projector.{tap}.fc1"), f);
            p.fc2.visit_mut(&format!("projector.{tap}.fc2"), f);
        }
    }
}

/// What [`ccpl_total`] needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct CcplSettings {
    pub tau: f64,
    pub layers: Vec<Tap>,
    pub plan: SamplingPlan,
}

/// CCPL over the configured layers: per layer the InfoNCE of each batch item,
/// averaged over the batch, then summed over layers. Negatives never cross
/// images.
pub fn ccpl_total<T: Float>(
    tape: &Tape<T>,
    content: &FeaturePyramid<T>,
    generated: &FeaturePyramid<T>,
    settings: &CcplSettings,
    projectors: &Projectors<T>,
    rng: &mut impl Rng,
) -> Result<Var<T>> {
    let mut terms = Vec::new();
    for &tap in &settings.layers {
        let (g_f, c_f) = (generated.get(tap)?, content.get(tap)?);
        let projector = projectors.get(tap)?;
        let batch = g_f.shape()[0];
        let mut per_item = Vec::with_capacity(batch);
        for item in 0..batch {
            let dv = sample_difference_vectors(tape, g_f, c_f, item, &settings.plan, rng)?;
            let (z_g, z_c) = project(tape, &dv, projector)?;
            per_item.push(ccpl_infonce(tape, &z_g, &z_c, settings.tau)?);
        }
        let sum = tape.add_all(&per_item)?;
        terms.push(tape.scale(&sum, lit(1.0 / batch as f64)));
    }
    if terms.is_empty() {
        return Ok(Var::constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature(c: usize, h: usize, w: usize, seed: u64) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn neighbours_of_anchor_3_3() {
        let got: Vec<(usize, usize)> =
            (0..8).map(|k| Location { anchor: (3, 3), neighbor: k }.neighbor_position()).collect();
        assert_eq!(got, vec![(2, 2), (2, 3), (2, 4), (3, 2), (3, 4), (4, 2), (4, 3), (4, 4)]);
    }

    #[test]
    fn eight_anchors_give_64_vectors() {
        let tape = Tape::new();
        let g = feature(16, 8, 8, 1);
        let c = feature(16, 8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_difference_vectors(&tape, &g, &c, 0, &SamplingPlan::new(8), &mut rng).unwrap();
        assert_eq!(b.d_g.shape(), &[64, 16]);
        assert_eq!(b.d_c.shape(), &[64, 16]);
        assert_eq!(b.locations.len(), 64);
    }

    #[test]
    fn differences_are_taken_at_recorded_locations() {
        let tape = Tape::new();
        let g = feature(3, 6, 7, 3);
        let c = feature(3, 6, 7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = sample_difference_vectors(&tape, &g, &c, 0, &SamplingPlan::new(5), &mut rng).unwrap();
        let at = |f: &Var<f64>, (i, j): (usize, usize), ch: usize| f.value().data()[(ch * 6 + i) * 7 + j];
        for (m, loc) in b.locations.iter().enumerate() {
            for ch in 0..3 {
                let dg = at(&g, loc.anchor, ch) - at(&g, loc.neighbor_position(), ch);
                let dc = at(&c, loc.anchor, ch) - at(&c, loc.neighbor_position(), ch);
                assert_eq!(b.d_g.value().data()[m * 3 + ch], dg);
                assert_eq!(b.d_c.value().data()[m * 3 + ch], dc);
            }
        }
    }

    #[test]
    fn identical_maps_give_identical_differences() {
        let tape = Tape::new();
        let g = feature(4, 5, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_difference_vectors(&tape, &g, &g, 0, &SamplingPlan::new(9), &mut rng).unwrap();
        assert_eq!(b.d_g.value(), b.d_c.value());
    }

    #[test]
    fn anchors_are_interior_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = sample_anchors(7, 5, 15, &mut rng).unwrap();
            let mut sorted = a.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 15);
            assert!(a.iter().all(|&(i, j)| (1..=5).contains(&i) && (1..=3).contains(&j)));
        }
        assert!(matches!(sample_anchors(2, 9, 1, &mut rng), Err(Error::NoInteriorAnchors { .. })));
        assert!(sample_anchors(4, 4, 5, &mut rng).is_err());
    }

    #[test]
    fn infonce_needs_two_rows() {
        let tape = Tape::<f64>::new();
        let z = Var::constant(Tensor::from_fn(&[1, 4], |_| 0.5));
        assert!(matches!(ccpl_infonce(&tape, &z, &z, 0.07), Err(Error::TooFewVectors(1))));
    }

    #[test]
    fn projection_is_unit_norm_and_shared() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = Projector::<f64>::random(256, 128, 128, &mut rng);
        let d = Var::constant(Tensor::from_fn(&[64, 256], |_| rng.random_range(-1.0..1.0)));
        let batch = DifferenceVectorBatch { d_g: d.clone(), d_c: d, locations: Vec::new() };
        let (zg, zc) = project(&tape, &batch, &proj).unwrap();
        assert_eq!(zg.shape(), &[64, 128]);
        assert_eq!(zc.shape(), &[64, 128]);
        assert_eq!(zg.value(), zc.value());
        for row in zg.value().data().chunks(128) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{n}");
        }
    }
}
