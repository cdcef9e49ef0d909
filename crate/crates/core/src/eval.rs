//! Frame-level and video-level mean average precision plus a false
//! positive breakdown.
//!
//! Matching is greedy by descending score: each detection claims the
//! unmatched ground truth of its class (same clip and frame) with the highest
//! overlap at or above the threshold. AP is the exact area under the
//! all-point interpolated precision/recall curve.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::linking::Tube;
use crate::targets::BBox;

/// Intersection over union of two boxes; 0 for disjoint or degenerate boxes.
pub fn iou_2d(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Temporal IoU of the frame ranges times the mean spatial IoU over frames
/// present in both; inputs are sorted by frame.
pub fn iou_tube(a: &[(usize, BBox)], b: &[(usize, BBox)]) -> f64 {
    let (Some(a0), Some(b0)) = (a.first(), b.first()) else {
        return 0.0;
    };
    let (a1, b1) = (a[a.len() - 1].0, b[b.len() - 1].0);
    let lo = a0.0.max(b0.0);
    let hi = a1.min(b1);
    if lo > hi {
        return 0.0;
    }
    let union = a1.max(b1) - a0.0.min(b0.0) + 1;
    let temporal = (hi - lo + 1) as f64 / union as f64;
    let bmap: BTreeMap<usize, &BBox> = b.iter().map(|(f, bb)| (*f, bb)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, ab) in a.iter().filter(|(f, _)| (lo..=hi).contains(f)) {
        if let Some(bb) = bmap.get(f) {
            total += iou_2d(ab, bb);
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    temporal * total / count as f64
}

impl Tube {
    pub fn boxes(&self) -> Vec<(usize, BBox)> {
        self.detections.iter().map(|d| (d.frame, d.bbox)).collect()
    }
}

/// One annotated actor box used for frame-level evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub clip: String,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub actor_id: u32,
    /// False for frames outside the action's labelled temporal extent.
    pub in_extent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTube {
    pub clip: String,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub actor_id: u32,
    pub boxes: Vec<(usize, BBox)>,
}

/// All-point interpolated AP of a ranked list of hit/miss flags.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    let curve = pr_curve(hits, n_gt);
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |p| p.0);
    // Walk from the right so the precision envelope is a running maximum.
    for i in (0..curve.len()).rev() {
        envelope = envelope.max(curve[i].1);
        let r_prev = if i == 0 { 0.0 } else { curve[i - 1].0 };
        ap += (prev_recall.min(curve[i].0) - r_prev).max(0.0) * envelope;
        prev_recall = r_prev;
    }
    ap
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(hits: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    if n_gt == 0 {
        return Vec::new();
    }
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += usize::from(h);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Classes that appear only in detections and therefore carry no AP.
    pub excluded_classes: Vec<usize>,
}

fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.clip.cmp(&b.clip))
        .then(a.frame.cmp(&b.frame))
        .then_with(|| a.box_cmp(b))
}

type FrameKey<'a> = (&'a str, usize);

/// Greedy matching of one class; returns per-detection hits (in ranked
/// order), the ranked detections and the matched-flag of every GT.
fn match_frames<'a>(
    dets: &[&'a Detection],
    gts: &[&GroundTruth],
    thr: f64,
) -> (Vec<bool>, Vec<&'a Detection>, Vec<bool>) {
    let mut ranked: Vec<&Detection> = dets.to_vec();
    ranked.sort_by(|a, b| score_order(a, b));
    let mut by_frame: BTreeMap<FrameKey, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry((g.clip.as_str(), g.frame)).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(ranked.len());
    for d in &ranked {
        let mut best: Option<(f64, usize)> = None;
        if let Some(cands) = by_frame.get(&(d.clip.as_str(), d.frame)) {
            for &g in cands {
                if used[g] {
                    continue;
                }
                let iou = iou_2d(&d.bbox, &gts[g].bbox);
                if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
        }
        if let Some((_, g)) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    (hits, ranked, used)
}

fn classes_of(gts: &[GroundTruth], dets: &[Detection]) -> (BTreeSet<usize>, Vec<usize>) {
    let with_gt: BTreeSet<usize> = gts.iter().filter(|g| g.in_extent).map(|g| g.class_id).collect();
    let excluded = dets
        .iter()
        .map(|d| d.class_id)
        .filter(|c| !with_gt.contains(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    (with_gt, excluded)
}

/// Frame-mAP over classes that have at least one in-extent ground truth.
pub fn frame_map(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> MapResult {
    let (classes, excluded_classes) = classes_of(gts, dets);
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.in_extent && g.class_id == c).collect();
        let (hits, _, _) = match_frames(&cd, &cg, thr);
        per_class.insert(c, average_precision(&hits, cg.len()));
    }
    let map = mean(per_class.values().copied());
    MapResult {
        map,
        per_class,
        excluded_classes,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Video-mAP at one tube-IoU threshold.
pub fn video_map_at(tubes: &[Tube], gts: &[GtTube], thr: f64) -> MapResult {
    let with_gt: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let excluded_classes = tubes
        .iter()
        .map(|t| t.class_id)
        .filter(|c| !with_gt.contains(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut per_class = BTreeMap::new();
    for &c in &with_gt {
        let mut ct: Vec<&Tube> = tubes.iter().filter(|t| t.class_id == c).collect();
        ct.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.clip().cmp(b.clip()))
                .then(a.start().cmp(&b.start()))
                .then_with(|| a.detections[0].box_cmp(&b.detections[0]))
        });
        let cg: Vec<&GtTube> = gts.iter().filter(|g| g.class_id == c).collect();
        let mut used = vec![false; cg.len()];
        let mut hits = Vec::with_capacity(ct.len());
        for t in &ct {
            let boxes = t.boxes();
            let mut best: Option<(f64, usize)> = None;
            for (i, g) in cg.iter().enumerate() {
                if used[i] || g.clip != t.clip() {
                    continue;
                }
                let iou = iou_tube(&boxes, &g.boxes);
                if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, i));
                }
            }
            if let Some((_, i)) = best {
                used[i] = true;
            }
            hits.push(best.is_some());
        }
        per_class.insert(c, average_precision(&hits, cg.len()));
    }
    MapResult {
        map: mean(per_class.values().copied()),
        per_class,
        excluded_classes,
    }
}

/// The ten thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoMap {
    pub at_0_2: f64,
    pub at_0_5: f64,
    pub at_0_75: f64,
    /// Mean over [`coco_thresholds`].
    pub at_0_5_to_0_95: f64,
    pub per_class_at_0_5: BTreeMap<usize, f64>,
    /// mAP at each of [`coco_thresholds`].
    pub sweep: Vec<f64>,
}

pub fn video_map(tubes: &[Tube], gts: &[GtTube]) -> VideoMap {
    let sweep: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| video_map_at(tubes, gts, t).map)
        .collect();
    let at_0_5 = video_map_at(tubes, gts, 0.5);
    VideoMap {
        at_0_2: video_map_at(tubes, gts, 0.2).map,
        at_0_5: at_0_5.map,
        at_0_75: video_map_at(tubes, gts, 0.75).map,
        at_0_5_to_0_95: sweep.iter().sum::<f64>() / sweep.len() as f64,
        per_class_at_0_5: at_0_5.per_class,
        sweep,
    }
}

/// Lower overlap bound for a false positive to count as a localization error.
pub const LOCALIZATION_IOU_FLOOR: f64 = 0.1;

/// Area-under-recall shares of each false positive kind plus the miss rate,
/// averaged over classes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Localization: right class, overlap in `[0.1, thr)` or a duplicate.
    pub el: f64,
    /// Classification: overlaps a ground truth of another class.
    pub ec: f64,
    /// Time: overlaps the actor outside the labelled temporal extent.
    pub et: f64,
    /// Everything else.
    pub eo: f64,
    /// Share of ground-truth boxes never detected.
    pub em: f64,
    /// Non-interpolated AP; with the five shares above it sums to one.
    pub ap_raw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpKind {
    Localization,
    Classification,
    Time,
    Other,
}

fn classify_fp(d: &Detection, gts: &[GroundTruth], thr: f64) -> FpKind {
    let same_frame = || gts.iter().filter(|g| g.clip == d.clip && g.frame == d.frame);
    let iou = |g: &GroundTruth| iou_2d(&d.bbox, &g.bbox);
    if same_frame().any(|g| g.in_extent && g.class_id == d.class_id && iou(g) >= LOCALIZATION_IOU_FLOOR) {
        FpKind::Localization
    } else if same_frame().any(|g| g.in_extent && g.class_id != d.class_id && iou(g) >= thr) {
        FpKind::Classification
    } else if same_frame().any(|g| !g.in_extent && g.class_id == d.class_id && iou(g) >= thr) {
        FpKind::Time
    } else {
        FpKind::Other
    }
}

pub fn error_taxonomy(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> ErrorBreakdown {
    let (classes, _) = classes_of(gts, dets);
    let mut acc = ErrorBreakdown::default();
    for &c in &classes {
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.in_extent && g.class_id == c).collect();
        let (hits, ranked, used) = match_frames(&cd, &cg, thr);
        let n_gt = cg.len() as f64;
        let mut counts = [0usize; 4];
        let mut tp = 0usize;
        let mut areas = [0.0f64; 4];
        let mut ap_raw = 0.0;
        for (i, (&hit, d)) in hits.iter().zip(&ranked).enumerate() {
            if hit {
                tp += 1;
                let seen = (i + 1) as f64;
                for (a, &n) in areas.iter_mut().zip(&counts) {
                    *a += n as f64 / seen / n_gt;
                }
                ap_raw += tp as f64 / seen / n_gt;
            } else {
                let k = match classify_fp(d, gts, thr) {
                    FpKind::Localization => 0,
                    FpKind::Classification => 1,
                    FpKind::Time => 2,
                    FpKind::Other => 3,
                };
                counts[k] += 1;
            }
        }
        acc.el += areas[0];
        acc.ec += areas[1];
        acc.et += areas[2];
        acc.eo += areas[3];
        acc.ap_raw += ap_raw;
        acc.em += used.iter().filter(|&&u| !u).count() as f64 / n_gt;
    }
    let n = classes.len().max(1) as f64;
    ErrorBreakdown {
        el: acc.el / n,
        ec: acc.ec / n,
        et: acc.et / n,
        eo: acc.eo / n,
        em: acc.em / n,
        ap_raw: acc.ap_raw / n,
    }
}

/// Everything the evaluator reports for one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_map: f64,
    pub frame_ap_per_class: BTreeMap<usize, f64>,
    pub video_map: VideoMap,
    pub errors: ErrorBreakdown,
    pub excluded_classes: Vec<usize>,
    pub num_detections: usize,
    pub num_tubes: usize,
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    tubes: &[Tube],
    gt_tubes: &[GtTube],
    iou_thr: f64,
) -> EvalReport {
    let fm = frame_map(dets, gts, iou_thr);
    EvalReport {
        frame_map: fm.map,
        frame_ap_per_class: fm.per_class,
        video_map: video_map(tubes, gt_tubes),
        errors: error_taxonomy(dets, gts, iou_thr),
        excluded_classes: fm.excluded_classes,
        num_detections: dets.len(),
        num_tubes: tubes.len(),
    }
}

/// Per-class precision/recall curves as CSV (`class,rank,recall,precision`).
pub fn pr_curves_csv(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> String {
    let (classes, _) = classes_of(gts, dets);
    let mut out = String::from("class,rank,recall,precision\n");
    for &c in &classes {
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.in_extent && g.class_id == c).collect();
        let (hits, _, _) = match_frames(&cd, &cg, thr);
        for (i, (r, p)) in pr_curve(&hits, cg.len()).into_iter().enumerate() {
            out.push_str(&format!("{c},{},{r},{p}\n", i + 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(b: [f64; 4]) -> BBox {
        BBox::from(b)
    }

    fn det(frame: usize, b: [f64; 4], score: f64, class_id: usize) -> Detection {
        Detection {
            clip: "v".into(),
            frame,
            bbox: bb(b),
            score,
            class_id,
            knots: None,
            cell: None,
        }
    }

    fn gt(frame: usize, b: [f64; 4], class_id: usize) -> GroundTruth {
        GroundTruth {
            clip: "v".into(),
            frame,
            bbox: bb(b),
            class_id,
            actor_id: 0,
            in_extent: true,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bb([0.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &bb([2.0, 2.0, 3.0, 3.0])), 0.0);
        let half = bb([0.5, 0.0, 1.5, 1.0]);
        assert!((iou_2d(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tube_iou_examples() {
        let a: Vec<_> = (0..4).map(|f| (f, bb([0.0, 0.0, 2.0, 2.0]))).collect();
        assert_eq!(iou_tube(&a, &a), 1.0);
        let later: Vec<_> = (5..8).map(|f| (f, bb([0.0, 0.0, 2.0, 2.0]))).collect();
        assert_eq!(iou_tube(&a, &later), 0.0);
        // [0,0,2,2] vs [0,0,2,1]: IoU 0.5 everywhere
        let half: Vec<_> = (0..4).map(|f| (f, bb([0.0, 0.0, 2.0, 1.0]))).collect();
        assert_eq!(iou_tube(&a, &half), 0.5);
        let short: Vec<_> = (2..4).map(|f| (f, bb([0.0, 0.0, 2.0, 2.0]))).collect();
        assert_eq!(iou_tube(&a, &short), 0.5);
    }

    #[test]
    fn ap_hand_case() {
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true, true], 2), 1.0);
    }

    #[test]
    fn frame_map_hand_case() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0), gt(1, [0.0, 0.0, 4.0, 4.0], 0)];
        let d = vec![
            det(0, [0.0, 0.0, 4.0, 4.0], 0.9, 0),
            det(0, [10.0, 10.0, 14.0, 14.0], 0.8, 0),
            det(1, [0.0, 0.0, 4.0, 4.5], 0.7, 0),
        ];
        let r = frame_map(&d, &g, 0.5);
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(frame_map(&[], &g, 0.5).map, 0.0);
        let perfect: Vec<_> = g.iter().map(|g| det(g.frame, g.bbox.as_array(), 1.0, 0)).collect();
        assert_eq!(frame_map(&perfect, &g, 0.5).map, 1.0);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0)];
        let d = vec![det(0, [0.0, 0.0, 4.0, 4.0], 0.9, 0), det(0, [0.0, 0.0, 4.0, 4.0], 0.9, 3)];
        let r = frame_map(&d, &g, 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.excluded_classes, vec![3]);
    }

    #[test]
    fn tube_threshold_behaviour() {
        let g = vec![GtTube {
            clip: "v".into(),
            class_id: 1,
            actor_id: 0,
            boxes: (0..3).map(|f| (f, bb([0.0, 0.0, 10.0, 10.0]))).collect(),
        }];
        // spatial IoU 0.6 in every frame
        let t = Tube::new((0..3).map(|f| det(f, [0.0, 0.0, 10.0, 6.0], 0.8, 1)).collect()).unwrap();
        let vm = video_map(&[t], &g);
        assert_eq!(vm.at_0_5, 1.0);
        assert_eq!(vm.at_0_75, 0.0);
        assert_eq!(vm.at_0_2, 1.0);
        assert_eq!(vm.at_0_5_to_0_95, vm.sweep.iter().sum::<f64>() / 10.0);
    }

    #[test]
    fn taxonomy_perfect_and_wrong_class() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0), gt(1, [0.0, 0.0, 4.0, 4.0], 0)];
        let perfect: Vec<_> = g.iter().map(|g| det(g.frame, g.bbox.as_array(), 1.0, 0)).collect();
        let e = error_taxonomy(&perfect, &g, 0.5);
        assert_eq!((e.el, e.ec, e.et, e.eo, e.em), (0.0, 0.0, 0.0, 0.0, 0.0));

        // Right boxes, wrong class, plus one correct low-score hit so the
        // classification errors sit below a recall point.
        let mut d: Vec<_> = g.iter().map(|g| det(g.frame, g.bbox.as_array(), 0.9, 1)).collect();
        d.push(det(0, [0.0, 0.0, 4.0, 4.0], 0.5, 0));
        d.push(det(0, [20.0, 20.0, 24.0, 24.0], 0.5, 1));
        let mut g2 = g.clone();
        g2.push(gt(0, [20.0, 20.0, 24.0, 24.0], 1));
        let e = error_taxonomy(&d, &g2, 0.5);
        assert_eq!(e.el, 0.0);
        assert!(e.ec > 0.0);
        assert_eq!(e.et, 0.0);
        let total = e.ap_raw + e.el + e.ec + e.et + e.eo + e.em;
        assert!((total - 1.0).abs() < 1e-12);
    }
}
