//! Point head maps to scored boxes.
//!
//! Peaks of the centre heatmap (3×3 local maxima above a threshold, best
//! `max_det` kept) become boxes from the shape and offset maps. Knot points
//! can then widen each box to cover the recovered knots.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{local_maxima, Tensor};
use crate::outputs::{CpOutputs, KpOutputs};
use crate::targets::BBox;

/// One scored box in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(default)]
    pub clip: String,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<[f64; 2]>>,
    /// Heatmap cell `(x, y)` the detection was decoded from.
    #[serde(skip)]
    pub cell: Option<(usize, usize)>,
}

impl Detection {
    /// Total order used for deterministic tie-breaking: box coordinates,
    /// then score.
    pub fn box_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.bbox.as_array(), other.bbox.as_array());
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.score.total_cmp(&other.score))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub threshold: f64,
    pub max_det: usize,
    pub use_knots: bool,
    /// Search radius (cells) around a regressed knot for a heatmap peak.
    pub knot_radius: f64,
    /// Minimum knot heatmap value for a peak to be snapped to.
    pub knot_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            max_det: 10,
            use_knots: true,
            knot_radius: 2.0,
            knot_threshold: 0.1,
        }
    }
}

fn spatial(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == channels => Ok((h, w)),
        _ => Err(Error::dim(
            "decode",
            format!("{what} map {:?} should have {channels} channels", t.shape()),
        )),
    }
}

/// Decode one frame's centre-point maps. Boxes are clamped to the
/// `R·w × R·h` frame; boxes that collapse under clamping are dropped.
pub fn decode_boxes(
    cp: &CpOutputs,
    frame: usize,
    threshold: f64,
    max_det: usize,
    stride: usize,
) -> Result<Vec<Detection>> {
    let (h, w) = spatial(&cp.heatmap, 1, "heatmap")?;
    if spatial(&cp.shape, 2, "shape")? != (h, w) || spatial(&cp.offset, 2, "offset")? != (h, w) {
        return Err(Error::dim("decode", "centre-point maps disagree in size"));
    }
    let mask = local_maxima(&cp.heatmap)?;
    let heat = cp.heatmap.data();
    let mut peaks: Vec<(f64, usize, usize)> = (0..h * w)
        .filter(|&i| mask.data()[i] != 0.0 && heat[i] >= threshold)
        .map(|i| (heat[i], i / w, i % w))
        .collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_det);

    let r = stride as f64;
    let (fw, fh) = ((w * stride) as f64, (h * stride) as f64);
    let cells = h * w;
    let mut out = Vec::with_capacity(peaks.len());
    for (score, y, x) in peaks {
        let i = y * w + x;
        let cx = r * (x as f64 + cp.offset.data()[i]);
        let cy = r * (y as f64 + cp.offset.data()[cells + i]);
        let bw = cp.shape.data()[i];
        let bh = cp.shape.data()[cells + i];
        let bbox = BBox::from_center(cx, cy, bw, bh).clamp_to(fw, fh);
        if !bbox.is_well_formed() {
            continue;
        }
        out.push(Detection {
            clip: String::new(),
            frame,
            bbox,
            score,
            class_id: 0,
            knots: None,
            cell: Some((x, y)),
        });
    }
    Ok(out)
}

/// Recover the K knots of `det` and grow its box to contain them.
///
/// Each knot is first regressed from the centre cell's distance channels;
/// if channel `k` of the knot heatmap has a peak (local maximum at least
/// `knot_threshold`) within `knot_radius` cells of that point, the knot
/// snaps to the nearest such peak refined by the shared knot offset map.
pub fn refine_with_knots(det: &Detection, kp: &KpOutputs, stride: usize, cfg: &DecodeConfig) -> Result<Detection> {
    let k = kp.heatmap.shape()[0];
    let (h, w) = spatial(&kp.heatmap, k, "knot heatmap")?;
    if spatial(&kp.distance, 2 * k, "knot distance")? != (h, w) || spatial(&kp.offset, 2, "knot offset")? != (h, w)
    {
        return Err(Error::dim("refine_with_knots", "knot maps disagree in size"));
    }
    let r = stride as f64;
    let (cx, cy) = det.bbox.center();
    let (gx, gy) = det.cell.unwrap_or((
        ((cx / r).floor().max(0.0) as usize).min(w - 1),
        ((cy / r).floor().max(0.0) as usize).min(h - 1),
    ));
    let cells = h * w;
    let centre = gy * w + gx;
    let mask = local_maxima(&kp.heatmap)?;
    let mut knots = Vec::with_capacity(k);
    for c in 0..k {
        let rx = cx / r + kp.distance.data()[2 * c * cells + centre];
        let ry = cy / r + kp.distance.data()[(2 * c + 1) * cells + centre];
        let mut best: Option<(f64, f64, usize, usize)> = None;
        let rad = cfg.knot_radius;
        let y0 = ((ry - rad).ceil() as isize).max(0);
        let x0 = ((rx - rad).ceil() as isize).max(0);
        let y1 = ((ry + rad).floor() as isize).min(h as isize - 1);
        let x1 = ((rx + rad).floor() as isize).min(w as isize - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (y, x) = (y as usize, x as usize);
                let i = c * cells + y * w + x;
                let v = kp.heatmap.data()[i];
                if mask.data()[i] == 0.0 || v < cfg.knot_threshold {
                    continue;
                }
                let d = (x as f64 - rx).hypot(y as f64 - ry);
                if d > rad {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bv, by, bx)) => d
                        .total_cmp(&bd)
                        .then(bv.total_cmp(&v))
                        .then((y, x).cmp(&(by, bx)))
                        .is_lt(),
                };
                if better {
                    best = Some((d, v, y, x));
                }
            }
        }
        let knot = match best {
            Some((_, _, y, x)) => {
                let i = y * w + x;
                [r * (x as f64 + kp.offset.data()[i]), r * (y as f64 + kp.offset.data()[cells + i])]
            }
            None => [r * rx, r * ry],
        };
        knots.push(knot);
    }
    let (fw, fh) = ((w * stride) as f64, (h * stride) as f64);
    let mut out = det.clone();
    out.bbox = det.bbox.hull_with(&knots).clamp_to(fw, fh);
    out.knots = Some(knots);
    Ok(out)
}

/// Decode one frame, refining with knots when enabled.
pub fn decode_frame(
    cp: &CpOutputs,
    kp: Option<&KpOutputs>,
    frame: usize,
    stride: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let dets = decode_boxes(cp, frame, cfg.threshold, cfg.max_det, stride)?;
    match kp {
        Some(kp) if cfg.use_knots => dets.iter().map(|d| refine_with_knots(d, kp, stride, cfg)).collect(),
        _ => Ok(dets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{render_targets, ActorAnnotation};

    fn perfect_cp(annotations: &[ActorAnnotation], size: usize, stride: usize) -> (CpOutputs, KpOutputs) {
        let t = render_targets(annotations, 4, size, size, stride).unwrap();
        (
            CpOutputs {
                heatmap: t.cp.heatmap,
                shape: t.cp.shape,
                offset: t.cp.offset,
            },
            KpOutputs {
                heatmap: t.kp.heatmap,
                distance: t.kp.distance,
                offset: t.kp.offset,
            },
        )
    }

    fn corners(b: [f64; 4]) -> Vec<[f64; 2]> {
        vec![[b[0], b[1]], [b[2], b[1]], [b[0], b[3]], [b[2], b[3]]]
    }

    fn actor(b: [f64; 4]) -> ActorAnnotation {
        ActorAnnotation {
            bbox: b.into(),
            knots: corners(b),
            class_id: 0,
            actor_id: 0,
        }
    }

    #[test]
    fn round_trip_single_actor() {
        let b = [13.0, 9.5, 27.0, 30.0];
        let (cp, _) = perfect_cp(&[actor(b)], 48, 4);
        let dets = decode_boxes(&cp, 0, 0.3, 10, 4).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.as_array(), b);
        assert_eq!(dets[0].score, 1.0);
    }

    #[test]
    fn empty_heatmap_decodes_nothing() {
        let cp = CpOutputs {
            heatmap: Tensor::zeros(&[1, 8, 8]).unwrap(),
            shape: Tensor::full(&[2, 8, 8], 4.0).unwrap(),
            offset: Tensor::zeros(&[2, 8, 8]).unwrap(),
        };
        assert!(decode_boxes(&cp, 0, 0.3, 10, 4).unwrap().is_empty());
    }

    #[test]
    fn top_k_keeps_best() {
        let mut heat = Tensor::zeros(&[1, 8, 8]).unwrap();
        heat.set(&[0, 1, 1], 0.9);
        heat.set(&[0, 6, 6], 0.6);
        let cp = CpOutputs {
            heatmap: heat,
            shape: Tensor::full(&[2, 8, 8], 4.0).unwrap(),
            offset: Tensor::zeros(&[2, 8, 8]).unwrap(),
        };
        let d = decode_boxes(&cp, 0, 0.3, 1, 4).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, 0.9);
        assert_eq!(d[0].bbox.as_array(), [2.0, 2.0, 6.0, 6.0]);
        let d = decode_boxes(&cp, 0, 0.3, 10, 4).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn ties_order_by_row_then_column() {
        let mut heat = Tensor::zeros(&[1, 8, 8]).unwrap();
        heat.set(&[0, 5, 1], 0.7);
        heat.set(&[0, 1, 6], 0.7);
        heat.set(&[0, 1, 2], 0.7);
        let cp = CpOutputs {
            heatmap: heat,
            shape: Tensor::full(&[2, 8, 8], 2.0).unwrap(),
            offset: Tensor::zeros(&[2, 8, 8]).unwrap(),
        };
        let cells: Vec<_> = decode_boxes(&cp, 0, 0.3, 10, 4)
            .unwrap()
            .iter()
            .map(|d| d.cell.unwrap())
            .collect();
        assert_eq!(cells, vec![(2, 1), (6, 1), (1, 5)]);
    }

    #[test]
    fn knots_inside_box_leave_it_unchanged() {
        let b = [8.0, 8.0, 24.0, 24.0];
        let mut a = actor(b);
        a.knots = vec![[12.0, 12.0], [20.0, 12.0], [12.0, 20.0], [16.0, 16.0]];
        let (cp, kp) = perfect_cp(&[a.clone()], 32, 4);
        let det = &decode_boxes(&cp, 0, 0.3, 10, 4).unwrap()[0];
        let refined = refine_with_knots(det, &kp, 4, &DecodeConfig::default()).unwrap();
        assert_eq!(refined.bbox, det.bbox);
        for (got, want) in refined.knots.unwrap().iter().zip(&a.knots) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn knot_outside_box_extends_hull() {
        let b = [8.0, 8.0, 24.0, 24.0];
        let mut a = actor(b);
        a.knots[0] = [3.0, 12.0];
        let (cp, kp) = perfect_cp(&[a], 32, 4);
        let det = &decode_boxes(&cp, 0, 0.3, 10, 4).unwrap()[0];
        let refined = refine_with_knots(det, &kp, 4, &DecodeConfig::default()).unwrap();
        assert_eq!(refined.bbox.as_array(), [3.0, 8.0, 24.0, 24.0]);
    }

    #[test]
    fn missing_knot_peak_falls_back_to_distance() {
        let b = [8.0, 8.0, 24.0, 24.0];
        let (cp, mut kp) = perfect_cp(&[actor(b)], 32, 4);
        kp.heatmap = Tensor::zeros(kp.heatmap.shape()).unwrap();
        let det = &decode_boxes(&cp, 0, 0.3, 10, 4).unwrap()[0];
        let refined = refine_with_knots(det, &kp, 4, &DecodeConfig::default()).unwrap();
        assert_eq!(refined.knots.unwrap(), corners(b));
    }

    #[test]
    fn detection_json_fields() {
        let d = Detection {
            clip: "c0".into(),
            frame: 3,
            bbox: [1.0, 2.0, 3.0, 4.0].into(),
            score: 0.5,
            class_id: 2,
            knots: Some(vec![[1.0, 2.0]]),
            cell: Some((0, 0)),
        };
        let v = serde_json::to_value(&d).unwrap();
        for key in ["clip", "frame", "box", "score", "class", "knots"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("cell").is_none());
    }
}
