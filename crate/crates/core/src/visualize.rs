//! Static frame overlays: predicted and ground-truth boxes and knots drawn
//! over a clip frame, written as binary PPM or SVG.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::targets::{ActorAnnotation, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Ppm,
    Svg,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Svg => "svg",
        }
    }
}

pub const PRED_COLOR: [u8; 3] = [230, 40, 40];
pub const GT_COLOR: [u8; 3] = [40, 210, 60];

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub bbox: BBox,
    pub knots: Vec<[f64; 2]>,
    pub color: [u8; 3],
    pub label: String,
}

impl Overlay {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            knots: d.knots.clone().unwrap_or_default(),
            color: PRED_COLOR,
            label: format!("c{} {:.2}", d.class_id, d.score),
        }
    }

    pub fn from_ground_truth(a: &ActorAnnotation) -> Self {
        Self {
            bbox: a.bbox,
            knots: a.knots.clone(),
            color: GT_COLOR,
            label: format!("gt c{}", a.class_id),
        }
    }
}

/// Overlays for one frame: detections, plus ground truth when asked for or
/// when there is nothing predicted to show.
pub fn frame_overlays(dets: &[&Detection], gts: &[ActorAnnotation], with_gt: bool) -> Vec<Overlay> {
    let mut out: Vec<Overlay> = dets.iter().map(|d| Overlay::from_detection(d)).collect();
    if with_gt || dets.is_empty() {
        out.extend(gts.iter().map(Overlay::from_ground_truth));
    }
    out
}

fn frame_pixels(frame: &Tensor) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let [3, h, w] = *frame.shape() else {
        return Err(Error::dim("visualize", format!("expected 3×H×W frame, got {:?}", frame.shape())));
    };
    let d = frame.data();
    let px = (0..h * w)
        .map(|i| std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    Ok((h, w, px))
}

/// Binary PPM (P6) of the frame upscaled by `scale`, boxes as one-pixel
/// outlines and knots as 3×3 dots.
pub fn render_ppm(frame: &Tensor, overlays: &[Overlay], scale: usize) -> Result<Vec<u8>> {
    let scale = scale.max(1);
    let (h, w, px) = frame_pixels(frame)?;
    let (hh, ww) = (h * scale, w * scale);
    let mut img = vec![[0u8; 3]; hh * ww];
    for y in 0..hh {
        for x in 0..ww {
            img[y * ww + x] = px[(y / scale) * w + x / scale];
        }
    }
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < ww && (y as usize) < hh {
            img[y as usize * ww + x as usize] = c;
        }
    };
    let s = scale as f64;
    for o in overlays {
        let x1 = (o.bbox.x1 * s).round() as i64;
        let y1 = (o.bbox.y1 * s).round() as i64;
        let x2 = ((o.bbox.x2 * s).round() as i64 - 1).max(x1);
        let y2 = ((o.bbox.y2 * s).round() as i64 - 1).max(y1);
        for x in x1..=x2 {
            put(x, y1, o.color);
            put(x, y2, o.color);
        }
        for y in y1..=y2 {
            put(x1, y, o.color);
            put(x2, y, o.color);
        }
        for k in &o.knots {
            let (kx, ky) = ((k[0] * s).round() as i64, (k[1] * s).round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(kx + dx, ky + dy, o.color);
                }
            }
        }
    }
    let mut out = format!("P6\n{ww} {hh}\n255\n").into_bytes();
    out.extend(img.iter().flatten());
    Ok(out)
}

/// SVG of the frame (one rect per pixel) with labelled box outlines and
/// knot markers, scaled by `scale`.
pub fn render_svg(frame: &Tensor, overlays: &[Overlay], scale: usize) -> Result<String> {
    let scale = scale.max(1);
    let (h, w, px) = frame_pixels(frame)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
        w * scale,
        h * scale
    );
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = px[y * w + x];
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="1" height="1" fill="rgb({r},{g},{b})"/>"#);
        }
    }
    for o in overlays {
        let [r, g, b] = o.color;
        let bb = o.bbox;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="rgb({r},{g},{b})" stroke-width="0.4"/>"#,
            bb.x1,
            bb.y1,
            bb.width(),
            bb.height()
        );
        for k in &o.knots {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="0.6" fill="rgb({r},{g},{b})"/>"#,
                k[0], k[1]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="3" fill="rgb({r},{g},{b})">{}</text>"#,
            bb.x1,
            (bb.y1 - 0.5).max(3.0),
            o.label
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render(frame: &Tensor, overlays: &[Overlay], scale: usize, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Ppm => render_ppm(frame, overlays, scale),
        ImageFormat::Svg => render_svg(frame, overlays, scale).map(String::into_bytes),
    }
}
