//! Point head prediction maps.
//!
//! Generic over storage: tape variables while training, plain tensors when
//! decoding. Maps are `c×h×w` for one frame or `T×c×h×w` for a clip.

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Centre-point branch: heatmap (1 channel), box shape (2), centre offset (2).
#[derive(Clone, Debug, PartialEq)]
pub struct CpOutputs<T = Tensor> {
    pub heatmap: T,
    pub shape: T,
    pub offset: T,
}

/// Knot-point branch: K heatmaps, 2K centre distances, 2 shared knot offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct KpOutputs<T = Tensor> {
    pub heatmap: T,
    pub distance: T,
    pub offset: T,
}

impl CpOutputs<Var> {
    pub fn values(&self, tape: &Tape) -> CpOutputs {
        CpOutputs {
            heatmap: tape.value(self.heatmap).clone(),
            shape: tape.value(self.shape).clone(),
            offset: tape.value(self.offset).clone(),
        }
    }
}

impl KpOutputs<Var> {
    pub fn values(&self, tape: &Tape) -> KpOutputs {
        KpOutputs {
            heatmap: tape.value(self.heatmap).clone(),
            distance: tape.value(self.distance).clone(),
            offset: tape.value(self.offset).clone(),
        }
    }
}

impl CpOutputs {
    /// Maps of frame `t` from clip-stacked maps.
    pub fn frame(&self, t: usize) -> Result<Self> {
        Ok(Self {
            heatmap: self.heatmap.index0(t)?,
            shape: self.shape.index0(t)?,
            offset: self.offset.index0(t)?,
        })
    }
}

impl KpOutputs {
    pub fn frame(&self, t: usize) -> Result<Self> {
        Ok(Self {
            heatmap: self.heatmap.index0(t)?,
            distance: self.distance.index0(t)?,
            offset: self.offset.index0(t)?,
        })
    }
}
