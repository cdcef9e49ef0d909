//! Independent oracles and random instances shared by the integration
//! tests and the acceptance run.
#![allow(dead_code)]

use point3d::decode::Detection;
use point3d::eval::{iou_2d, GroundTruth};
use point3d::linking::{link_score, Tube};
use point3d::numerics::Tensor;
use point3d::targets::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn det(frame: usize, bbox: BBox, score: f64, class_id: usize) -> Detection {
    Detection {
        clip: "c".into(),
        frame,
        bbox,
        score,
        class_id,
        knots: None,
        cell: None,
    }
}

pub fn gt(frame: usize, bbox: BBox, class_id: usize) -> GroundTruth {
    GroundTruth {
        clip: "c".into(),
        frame,
        bbox,
        class_id,
        actor_id: 0,
        in_extent: true,
    }
}

/// Direct per-pixel summation with α = 2, β = 4, normalised by max(N, 1).
pub fn focal_oracle(pred: &[f64], gt: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        sum += if g == 1.0 {
            (1.0 - p) * (1.0 - p) * p.ln()
        } else {
            (1.0 - g).powi(4) * p * p * (1.0 - p).ln()
        };
    }
    -sum / (n.max(1) as f64)
}

/// A random 8×8 heatmap instance: (prediction, target, number of peaks).
pub fn focal_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
    let n = rng.random_range(0..4);
    let mut gt: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..0.99)).collect();
    for _ in 0..n {
        gt[rng.random_range(0..64)] = 1.0;
    }
    let peaks = gt.iter().filter(|&&g| g == 1.0).count();
    let pred: Vec<f64> = (0..64).map(|_| rng.random_range(1e-3..1.0 - 1e-3)).collect();
    (pred, gt, peaks)
}

pub fn random_features(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    Tensor::from_fn(&[t, c, h, w], |_| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn permute(f: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::stack(&perm.iter().map(|&p| f.index0(p).unwrap()).collect::<Vec<_>>()).unwrap()
}

/// Softmax attention written out entry by entry.
pub fn twa_oracle(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let t = f.shape()[0];
    let d = f.len() / t;
    let x = f.data();
    let g: Vec<f64> = (0..t * t)
        .map(|k| (0..d).map(|p| x[(k / t) * d + p] * x[(k % t) * d + p]).sum())
        .collect();
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        let row = &g[i * t..(i + 1) * t];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..t {
            m[i * t + j] = (row[j] - max).exp() / z;
        }
    }
    let y = (0..t * d)
        .map(|k| x[k] + (0..t).map(|j| m[(k / d) * t + j] * x[j * d + k % d]).sum::<f64>())
        .collect();
    (y, m)
}

/// Up to 5 frames of up to 4 detections, occasionally with empty frames.
pub fn link_instance(rng: &mut ChaCha8Rng) -> Vec<Vec<Detection>> {
    let t = rng.random_range(1..=5);
    (0..t)
        .map(|f| {
            // Occasionally empty frames split the clip into segments.
            let n = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=4) };
            (0..n)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..12.0), rng.random_range(0.0..12.0));
                    let (w, h) = (rng.random_range(2.0..8.0), rng.random_range(2.0..8.0));
                    det(f, BBox::new(x, y, x + w, y + h), rng.random_range(0.0..1.0), 0)
                })
                .collect()
        })
        .collect()
}

/// Best score over every gap-free run of non-empty frames and every choice
/// of one detection per frame, scored from scratch.
pub fn link_oracle_best_score(frames: &[Vec<Detection>], beta: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut t = 0;
    while t < frames.len() {
        if frames[t].is_empty() {
            t += 1;
            continue;
        }
        let s = t;
        while t < frames.len() && !frames[t].is_empty() {
            t += 1;
        }
        let run = &frames[s..t];
        let total: usize = run.iter().map(Vec::len).product();
        for mut code in 0..total {
            let path: Vec<&Detection> = run
                .iter()
                .map(|f| {
                    let d = &f[code % f.len()];
                    code /= f.len();
                    d
                })
                .collect();
            let score = if path.len() == 1 {
                path[0].score
            } else {
                path.windows(2)
                    .map(|p| p[0].score + p[1].score + beta * iou_2d(&p[0].bbox, &p[1].bbox))
                    .sum()
            };
            best = Some(best.map_or(score, |b: f64| b.max(score)));
        }
    }
    best
}

pub fn path_score(tube: &Tube, beta: f64) -> f64 {
    let d = &tube.detections;
    if d.len() == 1 {
        return d[0].score;
    }
    d.windows(2).map(|p| link_score(&p[0], &p[1], beta).unwrap()).sum()
}

/// All-point AP computed from scratch: at every TP rank, the best
/// precision at that recall or beyond, times the recall increment.
pub fn oracle_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0;
    let points: Vec<(f64, f64)> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += usize::from(h);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if hits[i] {
            let p = points[i..].iter().map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

/// Every one-to-one assignment of detections (ranked) to ground truths
/// they overlap by at least `thr`, as `assign[d] = Some(g)`.
pub fn assignments(ious: &[Vec<f64>], thr: f64) -> Vec<Vec<Option<usize>>> {
    fn go(d: usize, ious: &[Vec<f64>], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if d == ious.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        go(d + 1, ious, thr, used, cur, out);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && ious[d][g] >= thr {
                used[g] = true;
                cur.push(Some(g));
                go(d + 1, ious, thr, used, cur, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let n_gt = ious.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    go(0, ious, thr, &mut vec![false; n_gt], &mut Vec::new(), &mut out);
    out
}

/// The assignment rule: each detection in rank order takes the
/// highest-IoU ground truth left by better-ranked detections, if any
/// clears the threshold.
pub fn follows_rule(a: &[Option<usize>], ious: &[Vec<f64>], thr: f64) -> bool {
    let n_gt = ious.first().map_or(0, Vec::len);
    let mut taken = vec![false; n_gt];
    for (d, choice) in a.iter().enumerate() {
        let best = (0..n_gt)
            .filter(|&g| !taken[g] && ious[d][g] >= thr)
            .map(|g| ious[d][g])
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        match (choice, best) {
            (None, None) => {}
            (Some(g), Some(b)) if ious[d][*g] == b && !taken[*g] => taken[*g] = true,
            _ => return false,
        }
    }
    true
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
    BBox::new(x, y, x + rng.random_range(2.0..6.0), y + rng.random_range(2.0..6.0))
}

/// One frame-mAP instance with the per-class AP the oracle expects.
pub struct FrameMapCase {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
    pub expected_ap: Vec<f64>,
    /// Classes where the ruled assignment is the only one the rule allows.
    pub unique_rule: bool,
    /// Classes where greedy matching scores below the best assignment.
    pub below_optimal: usize,
}

/// Up to 3 classes, 1–3 ground truths and 0–4 detections per class over
/// two frames. The oracle enumerates every assignment, keeps the one the
/// matching rule selects and scores it with [`oracle_ap`].
pub fn frame_map_case(rng: &mut ChaCha8Rng, thr: f64) -> FrameMapCase {
    let classes = rng.random_range(1..=3);
    let mut case = FrameMapCase {
        dets: Vec::new(),
        gts: Vec::new(),
        expected_ap: Vec::new(),
        unique_rule: true,
        below_optimal: 0,
    };
    for c in 0..classes {
        let n_gt = rng.random_range(1..=3);
        let n_det = rng.random_range(0..=4);
        let cg: Vec<GroundTruth> = (0..n_gt).map(|_| gt(rng.random_range(0..2), random_box(rng), c)).collect();
        let mut cd: Vec<Detection> = (0..n_det)
            .map(|_| {
                // Detections jitter around a ground truth half the time.
                let (frame, bbox) = if rng.random_bool(0.5) {
                    let g = &cg[rng.random_range(0..n_gt)];
                    (g.frame, g.bbox.translate(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                } else {
                    (rng.random_range(0..2), random_box(rng))
                };
                det(frame, bbox, rng.random_range(0.0..1.0), c)
            })
            .collect();
        cd.sort_by(|a, b| b.score.total_cmp(&a.score));
        let ious: Vec<Vec<f64>> = cd
            .iter()
            .map(|d| cg.iter().map(|g| if g.frame == d.frame { iou_2d(&d.bbox, &g.bbox) } else { 0.0 }).collect())
            .collect();
        let all = if cd.is_empty() { vec![vec![]] } else { assignments(&ious, thr) };
        let ap_of = |a: &[Option<usize>]| oracle_ap(&a.iter().map(Option::is_some).collect::<Vec<_>>(), n_gt);
        let ruled: Vec<&Vec<Option<usize>>> = all.iter().filter(|a| cd.is_empty() || follows_rule(a, &ious, thr)).collect();
        case.unique_rule &= ruled.len() == 1;
        let ap = ap_of(ruled[0]);
        let best = all.iter().map(|a| ap_of(a)).fold(0.0, f64::max);
        if ap < best {
            case.below_optimal += 1;
        }
        case.expected_ap.push(ap);
        case.dets.extend(cd);
        case.gts.extend(cg);
    }
    case
}
