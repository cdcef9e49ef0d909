//! Deterministic synthetic clips: filled rectangles whose class is defined
//! by how they move.
//!
//! | class | motion                     |
//! |-------|----------------------------|
//! | 0     | horizontal glide           |
//! | 1     | vertical glide             |
//! | 2     | diagonal glide             |
//! | 3     | horizontal oscillation     |
//! | 4     | grow / shrink in place     |
//! | 5     | circular                   |
//!
//! Positions that would leave the actor's region are folded back
//! (reflection at the boundary). Pixels are rendered with exact area
//! coverage so sub-pixel motion is visible, then Gaussian noise is added.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationFile, ClipAnnotation, Dataset, FrameAnnotation};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::targets::{ActorAnnotation, BBox};

pub const MAX_CLASSES: usize = 6;
pub const MAX_KNOTS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_clips: usize,
    /// Clips generated for the evaluation split by [`generate_splits`].
    pub eval_clips: usize,
    pub frames: usize,
    pub size: usize,
    pub num_classes: usize,
    pub knots: usize,
    /// Inclusive `[min, max]` actors per clip.
    pub actors_per_clip: [usize; 2],
    /// Inclusive `[min, max]` actor side length in pixels.
    pub actor_size: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
    /// Untrimmed clips hold the actor still outside a labelled extent.
    pub trimmed: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_clips: 200,
            eval_clips: 50,
            frames: 8,
            size: 64,
            num_classes: 4,
            knots: 4,
            actors_per_clip: [1, 2],
            actor_size: [12.0, 20.0],
            noise_std: 0.05,
            seed: 0,
            trimmed: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.size == 0 {
            return bad("synth: frames and size must be positive".into());
        }
        if !(1..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("synth: num_classes must be in 1..={MAX_CLASSES}"));
        }
        if self.knots > MAX_KNOTS {
            return bad(format!("synth: at most {MAX_KNOTS} knots"));
        }
        let [lo, hi] = self.actors_per_clip;
        if lo == 0 || lo > hi || hi > 2 {
            return bad("synth: actors_per_clip must satisfy 1 <= min <= max <= 2".into());
        }
        let [smin, smax] = self.actor_size;
        let room = if hi == 2 { self.size as f64 / 2.0 } else { self.size as f64 };
        if !(smin >= 2.0 && smin <= smax && smax * 1.4 < room) {
            return bad(format!(
                "synth: actor_size {:?} does not fit a {}-pixel region",
                self.actor_size, room
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("synth: noise_std must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Everything needed to place one actor at any frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorSpec {
    pub class_id: usize,
    pub actor_id: u32,
    /// Centre at frame 0 before folding.
    pub center: [f64; 2],
    pub size: [f64; 2],
    /// Per-frame velocity for glides; amplitude in pixels for periodic
    /// motions.
    pub motion: [f64; 2],
    pub period: f64,
    pub phase: f64,
    pub color: [f64; 3],
    /// `[x1, y1, x2, y2]` the actor is confined to.
    pub region: [f64; 4],
}

fn fold(x: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let y = (x - lo).rem_euclid(2.0 * len);
    lo + if y > len { 2.0 * len - y } else { y }
}

impl ActorSpec {
    fn raw(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let [cx, cy] = self.center;
        let [w, h] = self.size;
        let [mx, my] = self.motion;
        let ang = 2.0 * PI * t / self.period + self.phase;
        match self.class_id {
            0 | 1 | 2 => ([cx + mx * t, cy + my * t], [w, h]),
            3 => ([cx + mx * ang.sin(), cy], [w, h]),
            4 => {
                let s = 1.0 + mx * ang.sin();
                ([cx, cy], [w * s, h * s])
            }
            _ => ([cx + mx * ang.cos(), cy + my * ang.sin()], [w, h]),
        }
    }

    /// Box at (possibly fractional) time `t`, folded into the region.
    pub fn bbox_at(&self, t: f64) -> BBox {
        let ([cx, cy], [w, h]) = self.raw(t);
        let [x1, y1, x2, y2] = self.region;
        let cx = fold(cx, x1 + w / 2.0, x2 - w / 2.0);
        let cy = fold(cy, y1 + h / 2.0, y2 - h / 2.0);
        BBox::from_center(cx, cy, w, h)
    }

    fn fits_unfolded(&self, frames: usize) -> bool {
        let [x1, y1, x2, y2] = self.region;
        (0..frames).all(|t| {
            let ([cx, cy], [w, h]) = self.raw(t as f64);
            cx - w / 2.0 >= x1 && cx + w / 2.0 <= x2 && cy - h / 2.0 >= y1 && cy + h / 2.0 <= y2
        })
    }
}

/// Fixed fractional knot positions: corners (TL, TR, BR, BL), then edge
/// midpoints (top, right, bottom, left), then the centre.
pub fn knot_fractions(k: usize) -> Vec<[f64; 2]> {
    const ALL: [[f64; 2]; MAX_KNOTS] = [
        [0.0, 0.0],
        [1.0, 0.0],
        [1.0, 1.0],
        [0.0, 1.0],
        [0.5, 0.0],
        [1.0, 0.5],
        [0.5, 1.0],
        [0.0, 0.5],
        [0.5, 0.5],
    ];
    ALL[..k.min(MAX_KNOTS)].to_vec()
}

pub fn knots_for(b: &BBox, k: usize) -> Vec<[f64; 2]> {
    knot_fractions(k)
        .into_iter()
        .map(|[fx, fy]| [b.x1 + fx * b.width(), b.y1 + fy * b.height()])
        .collect()
}

fn sample_spec(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    class_id: usize,
    actor_id: u32,
    region: [f64; 4],
) -> ActorSpec {
    let [smin, smax] = cfg.actor_size;
    let size = [rng.random_range(smin..=smax), rng.random_range(smin..=smax)];
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (motion, period) = match class_id {
        0 => ([sign(rng) * rng.random_range(1.5..3.0), 0.0], 1.0),
        1 => ([0.0, sign(rng) * rng.random_range(1.5..3.0)], 1.0),
        2 => {
            let s = rng.random_range(1.2..2.2);
            ([sign(rng) * s, sign(rng) * s], 1.0)
        }
        3 => ([rng.random_range(4.0..6.0), 0.0], rng.random_range(3.5..4.5)),
        4 => ([rng.random_range(0.25..0.35), 0.0], rng.random_range(5.0..7.0)),
        _ => {
            let r = rng.random_range(4.0..6.0);
            ([r, r * sign(rng)], rng.random_range(7.0..9.0))
        }
    };
    let phase = rng.random_range(0.0..2.0 * PI);
    let color = std::array::from_fn(|_| rng.random_range(0.45..1.0));
    let [x1, y1, x2, y2] = region;
    let mut spec = ActorSpec {
        class_id,
        actor_id,
        center: [0.0, 0.0],
        size,
        motion,
        period,
        phase,
        color,
        region,
    };
    let grow = if class_id == 4 { 1.0 + motion[0] } else { 1.0 };
    let (hw, hh) = (size[0] * grow / 2.0, size[1] * grow / 2.0);
    // Prefer a start from which the whole path fits without folding.
    for _ in 0..32 {
        spec.center = [rng.random_range(x1 + hw..=x2 - hw), rng.random_range(y1 + hh..=y2 - hh)];
        if spec.fits_unfolded(cfg.frames) {
            break;
        }
    }
    spec
}

/// Paint `color` over the area covered by `b`, weighting edge pixels by
/// their exact coverage.
fn paint(frame: &mut [f64], size: usize, b: &BBox, color: [f64; 3]) {
    let plane = size * size;
    let x_lo = b.x1.floor().max(0.0) as usize;
    let y_lo = b.y1.floor().max(0.0) as usize;
    let x_hi = (b.x2.ceil().max(0.0) as usize).min(size);
    let y_hi = (b.y2.ceil().max(0.0) as usize).min(size);
    for y in y_lo..y_hi {
        let cy = (b.y2.min(y as f64 + 1.0) - b.y1.max(y as f64)).max(0.0);
        for x in x_lo..x_hi {
            let cx = (b.x2.min(x as f64 + 1.0) - b.x1.max(x as f64)).max(0.0);
            let cov = cx * cy;
            for (c, &col) in color.iter().enumerate() {
                let p = &mut frame[c * plane + y * size + x];
                *p = (1.0 - cov) * *p + cov * col;
            }
        }
    }
}

/// Render actors over a flat background; returns `T×3×H×W` and per-frame
/// annotations. Outside `extent` actors are frozen at the nearest end.
pub fn render_clip(
    specs: &[ActorSpec],
    cfg: &SynthConfig,
    background: [f64; 3],
    extent: Option<[usize; 2]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<FrameAnnotation>)> {
    let n = cfg.size;
    let plane = n * n;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("synth noise: {e}")))?;
    let mut data = Vec::with_capacity(cfg.frames * 3 * plane);
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let local = match extent {
            Some([s, e]) => t.clamp(s, e) - s,
            None => t,
        };
        let mut frame: Vec<f64> = background.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect();
        let mut actors = Vec::with_capacity(specs.len());
        for spec in specs {
            let b = spec.bbox_at(local as f64);
            paint(&mut frame, n, &b, spec.color);
            actors.push(ActorAnnotation {
                bbox: b,
                knots: knots_for(&b, cfg.knots),
                class_id: spec.class_id,
                actor_id: spec.actor_id,
            });
        }
        if cfg.noise_std > 0.0 {
            for v in &mut frame {
                *v += noise.sample(rng);
            }
        }
        data.extend(frame);
        frames.push(FrameAnnotation { actors });
    }
    Ok((Tensor::new(&[cfg.frames, 3, n, n], data)?, frames))
}

/// Regions for `count` actors of a class: halves split across the main
/// direction of motion.
fn regions(class_id: usize, count: usize, size: f64) -> Vec<[f64; 4]> {
    if count == 1 {
        return vec![[0.0, 0.0, size, size]];
    }
    let h = size / 2.0;
    if class_id == 1 {
        vec![[0.0, 0.0, h, size], [h, 0.0, size, size]]
    } else {
        vec![[0.0, 0.0, size, h], [0.0, h, size, size]]
    }
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Balanced labels: each consecutive block of `num_classes` clips is a
/// shuffled permutation of the classes.
fn labels(cfg: &SynthConfig, total: usize) -> Vec<usize> {
    let mut rng = clip_rng(cfg.seed, 0);
    rng.set_stream(0);
    let mut out = Vec::with_capacity(total + cfg.num_classes);
    while out.len() < total {
        let mut block: Vec<usize> = (0..cfg.num_classes).collect();
        block.shuffle(&mut rng);
        out.extend(block);
    }
    out.truncate(total);
    out
}

fn generate_clip(cfg: &SynthConfig, index: usize, label: usize) -> Result<(Tensor, ClipAnnotation)> {
    let mut rng = clip_rng(cfg.seed, index);
    let [lo, hi] = cfg.actors_per_clip;
    let count = rng.random_range(lo..=hi);
    let specs: Vec<ActorSpec> = regions(label, count, cfg.size as f64)
        .into_iter()
        .enumerate()
        .map(|(i, r)| sample_spec(&mut rng, cfg, label, i as u32, r))
        .collect();
    let background = std::array::from_fn(|_| rng.random_range(0.0..0.25));
    let extent = if cfg.trimmed || cfg.frames < 3 {
        None
    } else {
        let len = rng.random_range(cfg.frames.div_ceil(2)..cfg.frames);
        let start = rng.random_range(0..=cfg.frames - len);
        Some([start, start + len - 1])
    };
    let (clip, frames) = render_clip(&specs, cfg, background, extent, &mut rng)?;
    Ok((
        clip,
        ClipAnnotation {
            id: format!("clip{index:05}"),
            frames,
            label,
            extent,
        },
    ))
}

fn generate_range(cfg: &SynthConfig, range: std::ops::Range<usize>, labels: &[usize]) -> Result<Dataset> {
    let mut clips = Vec::with_capacity(range.len());
    let mut anns = Vec::with_capacity(range.len());
    for i in range {
        let (c, a) = generate_clip(cfg, i, labels[i])?;
        clips.push(c);
        anns.push(a);
    }
    Ok(Dataset {
        clips,
        annotations: AnnotationFile { clips: anns },
    })
}

/// `num_clips` clips, fully determined by the config.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let labels = labels(cfg, cfg.num_clips);
    generate_range(cfg, 0..cfg.num_clips, &labels)
}

/// Training (`num_clips`) and evaluation (`eval_clips`) splits drawn from
/// one stream, so the first split equals [`generate_dataset`].
pub fn generate_splits(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let total = cfg.num_clips + cfg.eval_clips;
    let labels = labels(cfg, total);
    Ok((
        generate_range(cfg, 0..cfg.num_clips, &labels)?,
        generate_range(cfg, cfg.num_clips..total, &labels)?,
    ))
}

/// Motion summary of one actor track: mean |vx|, mean |vy|, mean
/// |acceleration| and mean |size change| per frame.
pub fn motion_features(boxes: &[BBox]) -> [f64; 4] {
    let centers: Vec<(f64, f64)> = boxes.iter().map(BBox::center).collect();
    let v: Vec<(f64, f64)> = centers.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    [
        mean(&mut v.iter().map(|p| p.0.abs())),
        mean(&mut v.iter().map(|p| p.1.abs())),
        mean(&mut v.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))),
        mean(&mut boxes.windows(2).map(|w| (w[1].width() - w[0].width()).abs() + (w[1].height() - w[0].height()).abs())),
    ]
}
