//! Ground-truth annotations and the dense maps the detection losses consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box `(x1, y1, x2, y2)` in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        (*self).into()
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Smallest box containing `self` and every point.
    pub fn hull_with(&self, points: &[[f64; 2]]) -> Self {
        points.iter().fold(*self, |b, &[x, y]| {
            Self::new(b.x1.min(x), b.y1.min(y), b.x2.max(x), b.y2.max(y))
        })
    }
}

/// One actor in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub knots: Vec<[f64; 2]>,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub actor_id: u32,
}

/// Geometry of the low-resolution target grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, stride: usize) -> Result<Self> {
        if stride == 0 || height == 0 || width == 0 || height % stride != 0 || width % stride != 0 {
            return Err(Error::Config(format!(
                "stride {stride} must divide frame size {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            stride,
        })
    }

    pub fn out_h(&self) -> usize {
        self.height / self.stride
    }

    pub fn out_w(&self) -> usize {
        self.width / self.stride
    }

    pub fn cells(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Low-resolution cell and fractional remainder of an input-pixel point.
    fn locate(&self, x: f64, y: f64) -> ((usize, usize), (f64, f64)) {
        let r = self.stride as f64;
        let (fx, fy) = (x / r, y / r);
        let cx = (fx.floor().max(0.0) as usize).min(self.out_w() - 1);
        let cy = (fy.floor().max(0.0) as usize).min(self.out_h() - 1);
        ((cx, cy), (fx - cx as f64, fy - cy as f64))
    }
}

/// Gaussian radius for a box measured in feature-map units.
pub fn gaussian_sigma(box_w: f64, box_h: f64) -> Result<f64> {
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::Contract(format!(
            "gaussian_sigma needs a positive box, got {box_w}x{box_h}"
        )));
    }
    Ok((box_w.min(box_h) / 6.0).max(1.0))
}

/// Element-wise max of a Gaussian centred on integer cell `(cx, cy)`.
fn splat_max(plane: &mut [f64], w: usize, cx: usize, cy: usize, sigma: f64) {
    let denom = 2.0 * sigma * sigma;
    for (i, v) in plane.iter_mut().enumerate() {
        let dx = (i % w) as f64 - cx as f64;
        let dy = (i / w) as f64 - cy as f64;
        let g = (-(dx * dx + dy * dy) / denom).exp();
        if g > *v {
            *v = g;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpTargets {
    /// `1×h×w` centre heatmap.
    pub heatmap: Tensor,
    /// `2×h×w` box `(width, height)` in input pixels at centre cells.
    pub shape: Tensor,
    /// `2×h×w` sub-cell remainder of the centre.
    pub offset: Tensor,
    /// `h×w`, 1 at centre cells.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KpTargets {
    /// `K×h×w` knot heatmaps.
    pub heatmap: Tensor,
    /// `2K×h×w` knot-minus-centre distances in feature units, at centre cells.
    pub distance: Tensor,
    /// `h×w`, 1 at centre cells.
    pub distance_mask: Tensor,
    /// `2×h×w` sub-cell remainder of each knot, at knot cells.
    pub offset: Tensor,
    /// `h×w`, 1 at knot cells.
    pub offset_mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub cp: CpTargets,
    pub kp: KpTargets,
    pub n_actors: usize,
    pub warnings: Vec<String>,
}

fn check_actor(a: &ActorAnnotation, grid: &Grid) -> Result<()> {
    if !a.bbox.is_well_formed() {
        return Err(Error::Data(format!("actor {} has malformed box {:?}", a.actor_id, a.bbox)));
    }
    let (w, h) = (grid.width as f64, grid.height as f64);
    let b = &a.bbox;
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
        return Err(Error::Data(format!(
            "actor {} box {:?} leaves the {}x{} frame",
            a.actor_id, b, grid.width, grid.height
        )));
    }
    Ok(())
}

pub fn render_cp_targets(
    annotations: &[ActorAnnotation],
    height: usize,
    width: usize,
    stride: usize,
) -> Result<(CpTargets, Vec<String>)> {
    let grid = Grid::new(height, width, stride)?;
    let (h, w) = (grid.out_h(), grid.out_w());
    let cells = grid.cells();
    let mut heat = vec![0.0; cells];
    let mut shape = vec![0.0; 2 * cells];
    let mut offset = vec![0.0; 2 * cells];
    let mut mask = vec![0.0; cells];
    let mut warnings = Vec::new();
    let r = stride as f64;
    for a in annotations {
        check_actor(a, &grid)?;
        let (px, py) = a.bbox.center();
        let ((cx, cy), (ox, oy)) = grid.locate(px, py);
        let sigma = gaussian_sigma(a.bbox.width() / r, a.bbox.height() / r)?;
        splat_max(&mut heat, w, cx, cy, sigma);
        let cell = cy * w + cx;
        heat[cell] = 1.0;
        if mask[cell] != 0.0 {
            warnings.push(format!(
                "actor {} shares centre cell ({cx}, {cy}); its regression targets overwrite the earlier actor",
                a.actor_id
            ));
        }
        mask[cell] = 1.0;
        shape[cell] = a.bbox.width();
        shape[cells + cell] = a.bbox.height();
        offset[cell] = ox;
        offset[cells + cell] = oy;
    }
    Ok((
        CpTargets {
            heatmap: Tensor::new(&[1, h, w], heat)?,
            shape: Tensor::new(&[2, h, w], shape)?,
            offset: Tensor::new(&[2, h, w], offset)?,
            mask: Tensor::new(&[h, w], mask)?,
        },
        warnings,
    ))
}

pub fn render_kp_targets(
    annotations: &[ActorAnnotation],
    knots: usize,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<(KpTargets, Vec<String>)> {
    let grid = Grid::new(height, width, stride)?;
    if knots == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (h, w) = (grid.out_h(), grid.out_w());
    let cells = grid.cells();
    let mut heat = vec![0.0; knots * cells];
    let mut dist = vec![0.0; 2 * knots * cells];
    let mut dist_mask = vec![0.0; cells];
    let mut offset = vec![0.0; 2 * cells];
    let mut offset_mask = vec![0.0; cells];
    let mut warnings = Vec::new();
    let r = stride as f64;
    for a in annotations {
        check_actor(a, &grid)?;
        if a.knots.len() != knots {
            return Err(Error::Data(format!(
                "actor {} has {} knots, expected {knots}",
                a.actor_id,
                a.knots.len()
            )));
        }
        let sigma = gaussian_sigma(a.bbox.width() / r, a.bbox.height() / r)?;
        let (px, py) = a.bbox.center();
        let ((ccx, ccy), _) = grid.locate(px, py);
        let centre = ccy * w + ccx;
        dist_mask[centre] = 1.0;
        for (k, &[kx, ky]) in a.knots.iter().enumerate() {
            let (cx_knot, cy_knot) = (
                kx.clamp(0.0, width as f64),
                ky.clamp(0.0, height as f64),
            );
            if (cx_knot, cy_knot) != (kx, ky) {
                warnings.push(format!(
                    "actor {} knot {k} at ({kx}, {ky}) clamped into the frame",
                    a.actor_id
                ));
            }
            let ((cx, cy), (ox, oy)) = grid.locate(cx_knot, cy_knot);
            let plane = &mut heat[k * cells..(k + 1) * cells];
            splat_max(plane, w, cx, cy, sigma);
            plane[cy * w + cx] = 1.0;
            dist[2 * k * cells + centre] = (cx_knot - px) / r;
            dist[(2 * k + 1) * cells + centre] = (cy_knot - py) / r;
            let cell = cy * w + cx;
            offset[cell] = ox;
            offset[cells + cell] = oy;
            offset_mask[cell] = 1.0;
        }
    }
    Ok((
        KpTargets {
            heatmap: Tensor::new(&[knots, h, w], heat)?,
            distance: Tensor::new(&[2 * knots, h, w], dist)?,
            distance_mask: Tensor::new(&[h, w], dist_mask)?,
            offset: Tensor::new(&[2, h, w], offset)?,
            offset_mask: Tensor::new(&[h, w], offset_mask)?,
        },
        warnings,
    ))
}

pub fn render_targets(
    annotations: &[ActorAnnotation],
    knots: usize,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<FrameTargets> {
    let (cp, mut warnings) = render_cp_targets(annotations, height, width, stride)?;
    let (kp, kp_warnings) = render_kp_targets(annotations, knots, height, width, stride)?;
    warnings.extend(kp_warnings);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FrameTargets {
        cp,
        kp,
        n_actors: annotations.len(),
        warnings,
    })
}

/// Per-frame targets of a clip stacked along a leading frame axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTargets {
    pub cp_heatmap: Tensor,
    pub cp_shape: Tensor,
    pub cp_offset: Tensor,
    pub cp_mask: Tensor,
    pub kp_heatmap: Tensor,
    pub kp_distance: Tensor,
    pub kp_distance_mask: Tensor,
    pub kp_offset: Tensor,
    pub kp_offset_mask: Tensor,
    pub n_actors: Vec<usize>,
}

impl ClipTargets {
    pub fn stack(frames: &[FrameTargets]) -> Result<Self> {
        let pick = |f: fn(&FrameTargets) -> &Tensor| -> Result<Tensor> {
            Tensor::stack(&frames.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            cp_heatmap: pick(|t| &t.cp.heatmap)?,
            cp_shape: pick(|t| &t.cp.shape)?,
            cp_offset: pick(|t| &t.cp.offset)?,
            cp_mask: pick(|t| &t.cp.mask)?,
            kp_heatmap: pick(|t| &t.kp.heatmap)?,
            kp_distance: pick(|t| &t.kp.distance)?,
            kp_distance_mask: pick(|t| &t.kp.distance_mask)?,
            kp_offset: pick(|t| &t.kp.offset)?,
            kp_offset_mask: pick(|t| &t.kp.offset_mask)?,
            n_actors: frames.iter().map(|t| t.n_actors).collect(),
        })
    }

    pub fn frames(&self) -> usize {
        self.n_actors.len()
    }
}
