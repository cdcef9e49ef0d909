//! Detection and classification losses, recorded on a [`Tape`].
//!
//! Localization maps may carry a leading frame axis; every per-frame term is
//! normalised by that frame's actor count and the frame terms are summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::outputs::{CpOutputs, KpOutputs};
use crate::targets::ClipTargets;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpWeights {
    pub heatmap: f64,
    pub shape: f64,
    pub offset: f64,
}

impl Default for CpWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            shape: 0.1,
            offset: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpWeights {
    pub heatmap: f64,
    pub distance: f64,
    pub offset: f64,
}

impl Default for KpWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            distance: 1.0,
            offset: 1.0,
        }
    }
}

/// Exponents of the penalty-reduced focal loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cp: CpWeights,
    pub kp: KpWeights,
    pub loc: f64,
    pub cls: f64,
    pub focal: FocalParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cp: CpWeights::default(),
            kp: KpWeights::default(),
            loc: 10.0,
            cls: 1.0,
            focal: FocalParams::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cp.heatmap,
            self.cp.shape,
            self.cp.offset,
            self.kp.heatmap,
            self.kp.distance,
            self.kp.offset,
            self.loc,
            self.cls,
            self.focal.alpha,
            self.focal.beta,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn norms(n_actors: &[usize]) -> Vec<f64> {
    n_actors.iter().map(|&n| n as f64).collect()
}

/// Focal heatmap loss summed over frames; `pred` holds `n_actors.len()`
/// equally sized frames.
pub fn focal_heatmap_loss(
    tape: &Tape,
    pred: Var,
    gt: &Tensor,
    n_actors: &[usize],
    focal: FocalParams,
) -> Result<Var> {
    tape.focal_loss(pred, gt, &norms(n_actors), focal.alpha, focal.beta)
}

/// Masked L1 over all channels at masked cells, with a per-frame mask that
/// must mark at most `max_marks[f]` cells (and at least one when non-zero).
fn masked_l1_checked(
    tape: &Tape,
    what: &'static str,
    pred: Var,
    target: &Tensor,
    mask: &Tensor,
    n_actors: &[usize],
    max_marks: &[usize],
) -> Result<Var> {
    let pshape = tape.shape(pred);
    let mshape = mask.shape();
    if pshape.len() < 3 || mshape.len() < 2 || pshape[pshape.len() - 2..] != mshape[mshape.len() - 2..] {
        return Err(Error::dim(
            what,
            format!("mask {mshape:?} does not match prediction {pshape:?}"),
        ));
    }
    let frames = n_actors.len();
    if frames == 0 || mask.len() % frames != 0 {
        return Err(Error::Contract(format!(
            "{what}: mask {:?} cannot hold {frames} frames",
            mask.shape()
        )));
    }
    let per_frame = mask.len() / frames;
    for (f, chunk) in mask.data().chunks(per_frame).enumerate() {
        let marks = chunk.iter().filter(|&&m| m != 0.0).count();
        if marks > max_marks[f] || (n_actors[f] > 0 && marks == 0) {
            return Err(Error::Contract(format!(
                "{what}: frame {f} mask marks {marks} cells for {} actors",
                n_actors[f]
            )));
        }
    }
    tape.masked_l1(pred, target, mask, &norms(n_actors))
}

/// Mean over actors of the L1 distance between predicted and target box
/// shapes at centre cells.
pub fn shape_loss(tape: &Tape, pred: Var, target: &Tensor, mask: &Tensor, n_actors: &[usize]) -> Result<Var> {
    masked_l1_checked(tape, "shape_loss", pred, target, mask, n_actors, n_actors)
}

/// Same masked L1 contract as [`shape_loss`] over the 2 offset channels.
pub fn offset_loss(tape: &Tape, pred: Var, target: &Tensor, mask: &Tensor, n_actors: &[usize]) -> Result<Var> {
    masked_l1_checked(tape, "offset_loss", pred, target, mask, n_actors, n_actors)
}

#[derive(Clone, Copy, Debug)]
pub struct CpLoss {
    pub heatmap: Var,
    pub shape: Var,
    pub offset: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct KpLoss {
    pub heatmap: Var,
    pub distance: Var,
    pub offset: Var,
    pub total: Var,
}

pub fn cp_loss(
    tape: &Tape,
    pred: &CpOutputs<Var>,
    targets: &ClipTargets,
    weights: &LossWeights,
) -> Result<CpLoss> {
    let n = &targets.n_actors;
    let heatmap = focal_heatmap_loss(tape, pred.heatmap, &targets.cp_heatmap, n, weights.focal)?;
    let shape = shape_loss(tape, pred.shape, &targets.cp_shape, &targets.cp_mask, n)?;
    let offset = offset_loss(tape, pred.offset, &targets.cp_offset, &targets.cp_mask, n)?;
    let total = tape.weighted_sum(&[
        (weights.cp.heatmap, heatmap),
        (weights.cp.shape, shape),
        (weights.cp.offset, offset),
    ])?;
    Ok(CpLoss {
        heatmap,
        shape,
        offset,
        total,
    })
}

/// Knot-point loss; the heatmap term adds the focal losses of all K channels.
pub fn kp_loss(
    tape: &Tape,
    pred: &KpOutputs<Var>,
    targets: &ClipTargets,
    weights: &LossWeights,
    knots: usize,
) -> Result<KpLoss> {
    let n = &targets.n_actors;
    let hshape = tape.shape(pred.heatmap);
    if hshape[hshape.len() - 3] != knots {
        return Err(Error::dim(
            "kp_loss",
            format!("heatmap {hshape:?} does not have {knots} knot channels"),
        ));
    }
    let heatmap = focal_heatmap_loss(tape, pred.heatmap, &targets.kp_heatmap, n, weights.focal)?;
    let distance = masked_l1_checked(
        tape,
        "kp_distance_loss",
        pred.distance,
        &targets.kp_distance,
        &targets.kp_distance_mask,
        n,
        n,
    )?;
    let max_knots: Vec<usize> = n.iter().map(|&a| a * knots).collect();
    let offset = masked_l1_checked(
        tape,
        "kp_offset_loss",
        pred.offset,
        &targets.kp_offset,
        &targets.kp_offset_mask,
        n,
        &max_knots,
    )?;
    let total = tape.weighted_sum(&[
        (weights.kp.heatmap, heatmap),
        (weights.kp.distance, distance),
        (weights.kp.offset, offset),
    ])?;
    Ok(KpLoss {
        heatmap,
        distance,
        offset,
        total,
    })
}

/// Cross entropy of clip logits against the clip label.
pub fn cls_loss(tape: &Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// `λ_loc · mean_t(loc_t) + λ_cls · cls`.
pub fn overall_loss(tape: &Tape, loc_per_frame: &[Var], cls: Var, weights: &LossWeights) -> Result<Var> {
    let (&first, rest) = loc_per_frame
        .split_first()
        .ok_or_else(|| Error::Contract("overall_loss needs at least one frame".into()))?;
    let mut sum = first;
    for &v in rest {
        sum = tape.add(sum, v)?;
    }
    overall_loss_from_sum(tape, sum, loc_per_frame.len(), cls, weights)
}

/// [`overall_loss`] when the per-frame localization losses are already summed.
pub fn overall_loss_from_sum(
    tape: &Tape,
    loc_sum: Var,
    frames: usize,
    cls: Var,
    weights: &LossWeights,
) -> Result<Var> {
    if frames == 0 {
        return Err(Error::Contract("overall_loss needs at least one frame".into()));
    }
    tape.weighted_sum(&[(weights.loc / frames as f64, loc_sum), (weights.cls, cls)])
}

/// Per-step loss record written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_cp_h: f64,
    pub l_cp_s: f64,
    pub l_cp_o: f64,
    pub l_kp: f64,
    pub l_cls: f64,
    pub l_overall: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(tape: &Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn focal_hand_case() {
        let tape = Tape::new();
        let gt = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let pred = tape.leaf(Tensor::new(&[1, 2, 2], vec![0.9, 0.1, 0.1, 0.1]).unwrap());
        let l = focal_heatmap_loss(&tape, pred, &gt, &[1], FocalParams::default()).unwrap();
        assert!((tape.scalar(l) - 0.004_214_4).abs() < 1e-6, "{}", tape.scalar(l));
    }

    #[test]
    fn focal_empty_frame() {
        let tape = Tape::new();
        let gt = Tensor::zeros(&[1, 4, 4]).unwrap();
        let pred = tape.leaf(Tensor::full(&[1, 4, 4], 1e-7).unwrap());
        let l = focal_heatmap_loss(&tape, pred, &gt, &[0], FocalParams::default()).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn focal_near_perfect() {
        let tape = Tape::new();
        let mut gt = Tensor::zeros(&[1, 3, 3]).unwrap();
        gt.set(&[0, 1, 1], 1.0);
        let pred = gt.map(|g| if g == 1.0 { 1.0 - 1e-7 } else { 1e-7 });
        let pv = tape.leaf(pred);
        let l = focal_heatmap_loss(&tape, pv, &gt, &[1], FocalParams::default()).unwrap();
        assert!(tape.scalar(l) < 1e-5);
    }

    #[test]
    fn focal_shape_mismatch() {
        let tape = Tape::new();
        let pv = tape.leaf(Tensor::full(&[1, 3, 3], 0.5).unwrap());
        let gt = Tensor::zeros(&[1, 3, 4]).unwrap();
        assert!(matches!(
            focal_heatmap_loss(&tape, pv, &gt, &[1], FocalParams::default()),
            Err(Error::Dimension { .. })
        ));
    }

    fn one_cell_mask(h: usize, w: usize, cells: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros(&[h, w]).unwrap();
        for &(y, x) in cells {
            m.set(&[y, x], 1.0);
        }
        m
    }

    #[test]
    fn shape_loss_examples() {
        let tape = Tape::new();
        let mut target = Tensor::zeros(&[2, 3, 3]).unwrap();
        target.set(&[0, 1, 1], 12.0);
        target.set(&[1, 1, 1], 18.0);
        let mut pred = Tensor::zeros(&[2, 3, 3]).unwrap();
        pred.set(&[0, 1, 1], 10.0);
        pred.set(&[1, 1, 1], 20.0);
        let mask = one_cell_mask(3, 3, &[(1, 1)]);
        let pv = tape.leaf(pred);
        let l = shape_loss(&tape, pv, &target, &mask, &[1]).unwrap();
        assert_eq!(tape.scalar(l), 4.0);

        let exact = tape.leaf(target.clone());
        let l = shape_loss(&tape, exact, &target, &mask, &[1]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn shape_loss_means_over_actors() {
        let tape = Tape::new();
        let target = Tensor::zeros(&[2, 3, 3]).unwrap();
        let mut pred = Tensor::zeros(&[2, 3, 3]).unwrap();
        pred.set(&[0, 0, 0], 1.0);
        pred.set(&[1, 2, 2], 3.0);
        let mask = one_cell_mask(3, 3, &[(0, 0), (2, 2)]);
        let pv = tape.leaf(pred);
        let l = shape_loss(&tape, pv, &target, &mask, &[2]).unwrap();
        assert_eq!(tape.scalar(l), 2.0);
    }

    #[test]
    fn mask_disagreement_is_a_contract_error() {
        let tape = Tape::new();
        let t = Tensor::zeros(&[2, 3, 3]).unwrap();
        let mask = one_cell_mask(3, 3, &[(0, 0), (2, 2)]);
        let pv = tape.leaf(t.clone());
        assert!(matches!(shape_loss(&tape, pv, &t, &mask, &[1]), Err(Error::Contract(_))));
        let bad = Tensor::zeros(&[4, 4]).unwrap();
        assert!(matches!(shape_loss(&tape, pv, &t, &bad, &[1]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn offset_loss_hand_case() {
        let tape = Tape::new();
        let mut target = Tensor::zeros(&[2, 2, 2]).unwrap();
        target.set(&[0, 0, 1], 0.25);
        target.set(&[1, 0, 1], 0.5);
        let mut pred = Tensor::zeros(&[2, 2, 2]).unwrap();
        pred.set(&[0, 0, 1], 0.1);
        pred.set(&[1, 0, 1], 0.2);
        let mask = one_cell_mask(2, 2, &[(0, 1)]);
        let pv = tape.leaf(pred);
        let l = offset_loss(&tape, pv, &target, &mask, &[1]).unwrap();
        assert!((tape.scalar(l) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn cls_loss_examples() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[3], vec![20.0, -20.0, -20.0]).unwrap());
        assert!(tape.scalar(cls_loss(&tape, l, 0).unwrap()) < 1e-8);
        let l = tape.leaf(Tensor::zeros(&[4]).unwrap());
        assert!((tape.scalar(cls_loss(&tape, l, 2).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let l = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
        let got = tape.scalar(cls_loss(&tape, l, 0).unwrap());
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 2.407_605_964).abs() < 1e-8);
        assert!(cls_loss(&tape, l, 3).is_err());
    }

    #[test]
    fn weighted_compositions() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let (a, b, c) = (scalar_var(&tape, 1.0), scalar_var(&tape, 2.0), scalar_var(&tape, 3.0));
        let total = tape
            .weighted_sum(&[(w.cp.heatmap, a), (w.cp.shape, b), (w.cp.offset, c)])
            .unwrap();
        assert!((tape.scalar(total) - 4.2).abs() < 1e-15);

        let loc = scalar_var(&tape, 0.5);
        let cls = scalar_var(&tape, 2.0);
        let o = overall_loss(&tape, &[loc], cls, &w).unwrap();
        assert_eq!(tape.scalar(o), 7.0);
    }

    #[test]
    fn zero_cls_weight_cuts_classification_gradient() {
        let tape = Tape::new();
        let w = LossWeights {
            cls: 0.0,
            ..Default::default()
        };
        let logits = tape.leaf(Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap());
        let cls = cls_loss(&tape, logits, 1).unwrap();
        let loc = scalar_var(&tape, 0.7);
        let o = overall_loss(&tape, &[loc], cls, &w).unwrap();
        let g = tape.backward(o).unwrap();
        assert!(g.get(logits).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            loc: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
