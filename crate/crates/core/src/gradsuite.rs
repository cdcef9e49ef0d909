//! The gradient verification suite: every loss, time-wise attention, both
//! convolutions and a miniature end-to-end model, each over several seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    cls_loss, cp_loss, focal_heatmap_loss, kp_loss, offset_loss, overall_loss, shape_loss, LossWeights,
};
use crate::model::{forward, Bound, ModelConfig, Parameters};
use crate::numerics::{grad_check_with, GradCheckConfig, Tape, Tensor, Var};
use crate::outputs::{CpOutputs, KpOutputs};
use crate::synth::knots_for;
use crate::targets::{render_targets, ActorAnnotation, BBox, ClipTargets};
use crate::twa::twa;

pub const TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Central-difference step; small enough that the curvature of the focal
/// logarithms near 0 and 1 stays far below the tolerance.
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("suite shapes are valid")
}

const SIZE: usize = 16;
const STRIDE: usize = 4;
const KNOTS: usize = 4;
const FRAMES: usize = 2;
const GRID: usize = SIZE / STRIDE;

/// Random targets on a 16×16 frame (4×4 grid) with one or two actors.
fn random_targets(rng: &mut ChaCha8Rng) -> Result<ClipTargets> {
    let mut frames = Vec::with_capacity(FRAMES);
    for _ in 0..FRAMES {
        let n = rng.random_range(1..=2);
        let actors: Vec<ActorAnnotation> = (0..n)
            .map(|i| {
                // Keep the two actors in different halves so centres differ.
                let x0 = if i == 0 { 0.0 } else { 8.0 };
                let w = rng.random_range(3.0..7.0);
                let h = rng.random_range(3.0..12.0);
                let x1 = x0 + rng.random_range(0.0..8.0 - w);
                let y1 = rng.random_range(0.0..16.0 - h);
                let b = BBox::new(x1, y1, x1 + w, y1 + h);
                ActorAnnotation {
                    bbox: b,
                    knots: knots_for(&b, KNOTS),
                    class_id: 0,
                    actor_id: i,
                }
            })
            .collect();
        frames.push(render_targets(&actors, KNOTS, SIZE, SIZE, STRIDE)?);
    }
    ClipTargets::stack(&frames)
}

/// Split a `T×(5 + 3K + 2)×h×w` variable into CP and KP maps, heatmaps
/// through a sigmoid.
fn split_maps(t: &Tape, x: Var) -> Result<(CpOutputs<Var>, KpOutputs<Var>)> {
    let s = |start, len| t.slice(x, 1, start, len);
    let cp = CpOutputs {
        heatmap: t.sigmoid(s(0, 1)?),
        shape: t.scale(s(1, 2)?, 4.0),
        offset: s(3, 2)?,
    };
    let kp = KpOutputs {
        heatmap: t.sigmoid(s(5, KNOTS)?),
        distance: s(5 + KNOTS, 2 * KNOTS)?,
        offset: s(5 + 3 * KNOTS, 2)?,
    };
    Ok((cp, kp))
}

const MAP_CHANNELS: usize = 5 + 3 * KNOTS + 2;

fn check(
    name: &'static str,
    seed: u64,
    tol: f64,
    max_coords: Option<usize>,
    x: &Tensor,
    f: impl Fn(&Tape, Var) -> Result<Var>,
) -> Result<GradCase> {
    let cfg = GradCheckConfig {
        eps: EPS,
        max_coords,
        seed,
        ..GradCheckConfig::default()
    };
    let r = grad_check_with(f, x, &cfg)?;
    Ok(GradCase {
        name,
        seed,
        max_rel_error: r.max_rel_error,
        tolerance: tol,
        coords: r.coords_checked,
    })
}

/// `Σ x ⊙ r` for a fixed random `r`, so that every output element matters.
fn project(t: &Tape, y: Var, r: &Tensor) -> Result<Var> {
    let c = t.constant(r.clone());
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

/// Miniature model used by the end-to-end check.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        size: SIZE,
        channels: 4,
        stem_channels: 3,
        kernels: [3, 3],
        head_channels: 2,
        head3d_channels: 3,
        frames: FRAMES,
        knots: KNOTS,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Rebuild a [`Bound`] whose tensors are slices of one flat variable.
fn unflatten(t: &Tape, flat: Var, template: &Parameters) -> Result<Bound> {
    let mut bound = template.bind(t, false);
    let mut at = 0;
    for (slot, p) in bound.vars.iter_mut().zip(&template.params) {
        let n = p.value.len();
        let s = t.slice(flat, 0, at, n)?;
        *slot = t.reshape(s, p.value.shape())?;
        at += n;
    }
    Ok(bound)
}

fn flatten(p: &Parameters) -> Result<Tensor> {
    let data: Vec<f64> = p.params.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    Tensor::new(&[data.len()], data)
}

/// Every check for one seed.
pub fn run_seed(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let weights = LossWeights::default();
    let targets = random_targets(&mut rng)?;
    let n = targets.n_actors.clone();
    let maps = uniform(&mut rng, &[FRAMES, MAP_CHANNELS, GRID, GRID], -2.0, 2.0);

    let heat = uniform(&mut rng, &[FRAMES, 1, GRID, GRID], 0.02, 0.98);
    out.push(check("focal_heatmap_loss", seed, TOLERANCE, None, &heat, |t, x| {
        focal_heatmap_loss(t, x, &targets.cp_heatmap, &n, weights.focal)
    })?);
    let shp = uniform(&mut rng, &[FRAMES, 2, GRID, GRID], 0.0, 12.0);
    out.push(check("shape_loss", seed, TOLERANCE, None, &shp, |t, x| {
        shape_loss(t, x, &targets.cp_shape, &targets.cp_mask, &n)
    })?);
    let off = uniform(&mut rng, &[FRAMES, 2, GRID, GRID], 0.0, 1.0);
    out.push(check("offset_loss", seed, TOLERANCE, None, &off, |t, x| {
        offset_loss(t, x, &targets.cp_offset, &targets.cp_mask, &n)
    })?);
    out.push(check("cp_loss", seed, TOLERANCE, None, &maps, |t, x| {
        let (cp, _) = split_maps(t, x)?;
        Ok(cp_loss(t, &cp, &targets, &weights)?.total)
    })?);
    out.push(check("kp_loss", seed, TOLERANCE, None, &maps, |t, x| {
        let (_, kp) = split_maps(t, x)?;
        Ok(kp_loss(t, &kp, &targets, &weights, KNOTS)?.total)
    })?);
    let logits = uniform(&mut rng, &[5], -3.0, 3.0);
    let label = rng.random_range(0..5);
    out.push(check("cls_loss", seed, TOLERANCE, None, &logits, |t, x| cls_loss(t, x, label))?);
    let joint = uniform(&mut rng, &[FRAMES * MAP_CHANNELS * GRID * GRID + 5], -2.0, 2.0);
    out.push(check("overall_loss", seed, TOLERANCE, None, &joint, |t, x| {
        let m = t.slice(x, 0, 0, FRAMES * MAP_CHANNELS * GRID * GRID)?;
        let m = t.reshape(m, &[FRAMES, MAP_CHANNELS, GRID, GRID])?;
        let l = t.slice(x, 0, FRAMES * MAP_CHANNELS * GRID * GRID, 5)?;
        let (cp, kp) = split_maps(t, m)?;
        let mut loc = Vec::with_capacity(FRAMES);
        // Per-frame localization terms, each built from that frame's slice.
        for f in 0..FRAMES {
            let frame_targets = frame_slice(&targets, f)?;
            let cpf = CpOutputs {
                heatmap: t.slice(cp.heatmap, 0, f, 1)?,
                shape: t.slice(cp.shape, 0, f, 1)?,
                offset: t.slice(cp.offset, 0, f, 1)?,
            };
            let kpf = KpOutputs {
                heatmap: t.slice(kp.heatmap, 0, f, 1)?,
                distance: t.slice(kp.distance, 0, f, 1)?,
                offset: t.slice(kp.offset, 0, f, 1)?,
            };
            let c = cp_loss(t, &cpf, &frame_targets, &weights)?.total;
            let k = kp_loss(t, &kpf, &frame_targets, &weights, KNOTS)?.total;
            loc.push(t.add(c, k)?);
        }
        let cls = cls_loss(t, l, label)?;
        overall_loss(t, &loc, cls, &weights)
    })?);

    let feats = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let r = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    out.push(check("twa", seed, TOLERANCE, None, &feats, |t, x| {
        let y = twa(t, x, false)?.y;
        project(t, y, &r)
    })?);

    let x2 = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let w2 = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let r2 = uniform(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    out.push(check("conv2d_input", seed, TOLERANCE, None, &x2, |t, x| {
        let w = t.constant(w2.clone());
        let y = t.conv2d(x, w, 2, 1)?;
        project(t, y, &r2)
    })?);
    out.push(check("conv2d_weight", seed, TOLERANCE, None, &w2, |t, w| {
        let x = t.constant(x2.clone());
        let y = t.conv2d(x, w, 2, 1)?;
        project(t, y, &r2)
    })?);
    let x3 = uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    let w3 = uniform(&mut rng, &[3, 2, 3, 3, 3], -1.0, 1.0);
    let r3 = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    out.push(check("conv3d_input", seed, TOLERANCE, None, &x3, |t, x| {
        let w = t.constant(w3.clone());
        let y = t.conv3d(x, w, [2, 2, 2], [1, 1, 1])?;
        project(t, y, &r3)
    })?);
    out.push(check("conv3d_weight", seed, TOLERANCE, None, &w3, |t, w| {
        let x = t.constant(x3.clone());
        let y = t.conv3d(x, w, [2, 2, 2], [1, 1, 1])?;
        project(t, y, &r3)
    })?);

    out.push(model_case(seed, &mut rng, &targets)?);
    Ok(out)
}

fn frame_slice(targets: &ClipTargets, f: usize) -> Result<ClipTargets> {
    let pick = |t: &Tensor| -> Result<Tensor> { Tensor::stack(&[t.index0(f)?]) };
    Ok(ClipTargets {
        cp_heatmap: pick(&targets.cp_heatmap)?,
        cp_shape: pick(&targets.cp_shape)?,
        cp_offset: pick(&targets.cp_offset)?,
        cp_mask: pick(&targets.cp_mask)?,
        kp_heatmap: pick(&targets.kp_heatmap)?,
        kp_distance: pick(&targets.kp_distance)?,
        kp_distance_mask: pick(&targets.kp_distance_mask)?,
        kp_offset: pick(&targets.kp_offset)?,
        kp_offset_mask: pick(&targets.kp_offset_mask)?,
        n_actors: vec![targets.n_actors[f]],
    })
}

fn model_case(seed: u64, rng: &mut ChaCha8Rng, targets: &ClipTargets) -> Result<GradCase> {
    let cfg = ModelConfig {
        seed,
        ..mini_config()
    };
    let params = Parameters::init(&cfg)?;
    let clip = uniform(rng, &[FRAMES, 3, SIZE, SIZE], 0.0, 1.0);
    let label = rng.random_range(0..cfg.num_classes);
    let weights = LossWeights::default();
    let flat = flatten(&params)?;
    check("model", seed, MODEL_TOLERANCE, None, &flat, |t, x| {
        let bound = unflatten(t, x, &params)?;
        let out = forward(t, &cfg, &bound, &clip)?;
        let cp = cp_loss(t, &out.cp, targets, &weights)?;
        let kp = kp_loss(t, &out.kp, targets, &weights, cfg.knots)?;
        let cls = cls_loss(t, out.logits, label)?;
        let loc = t.add(cp.total, kp.total)?;
        crate::losses::overall_loss_from_sum(t, loc, FRAMES, cls, &weights)
    })
}

/// Seeds `0..seeds`, every check.
pub fn run_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for s in 0..seeds {
        out.extend(run_seed(s)?);
    }
    Ok(out)
}
