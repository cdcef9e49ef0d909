//! Clip collections on disk: one `PTK1` tensor per clip plus a single
//! annotation JSON file.
//!
//! ```text
//! <dir>/annotations.json   {clips:[{id, frames:[{actors:[…]}], label, extent?}]}
//! <dir>/clips/<id>.ptk     T×3×H×W
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GtTube};
use crate::numerics::{ptk, Tensor};
use crate::targets::{render_targets, ActorAnnotation, ClipTargets};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub actors: Vec<ActorAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub id: String,
    pub frames: Vec<FrameAnnotation>,
    pub label: usize,
    /// Inclusive frame range of the action in untrimmed clips; absent means
    /// the whole clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<[usize; 2]>,
}

impl ClipAnnotation {
    pub fn in_extent(&self, frame: usize) -> bool {
        self.extent.is_none_or(|[a, b]| (a..=b).contains(&frame))
    }

    /// Actors that count as ground truth in `frame`.
    pub fn active_actors(&self, frame: usize) -> &[ActorAnnotation] {
        if self.in_extent(frame) {
            &self.frames[frame].actors
        } else {
            &[]
        }
    }

    /// Dense training targets for frames `start..start + len`.
    pub fn targets(&self, start: usize, len: usize, knots: usize, size: [usize; 2], stride: usize) -> Result<ClipTargets> {
        let frames = (start..start + len)
            .map(|f| render_targets(self.active_actors(f), knots, size[0], size[1], stride))
            .collect::<Result<Vec<_>>>()?;
        ClipTargets::stack(&frames)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub clips: Vec<ClipAnnotation>,
}

impl AnnotationFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read annotations {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Every actor box as a frame-level ground truth, flagged by extent.
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        for clip in &self.clips {
            for (f, frame) in clip.frames.iter().enumerate() {
                for a in &frame.actors {
                    out.push(GroundTruth {
                        clip: clip.id.clone(),
                        frame: f,
                        bbox: a.bbox,
                        class_id: a.class_id,
                        actor_id: a.actor_id,
                        in_extent: clip.in_extent(f),
                    });
                }
            }
        }
        out
    }

    /// One tube per actor over the labelled extent.
    pub fn gt_tubes(&self) -> Vec<GtTube> {
        let mut out: Vec<GtTube> = Vec::new();
        for clip in &self.clips {
            let first = out.len();
            for (f, frame) in clip.frames.iter().enumerate() {
                if !clip.in_extent(f) {
                    continue;
                }
                for a in &frame.actors {
                    match out[first..].iter_mut().find(|t| t.actor_id == a.actor_id) {
                        Some(t) => t.boxes.push((f, a.bbox)),
                        None => out.push(GtTube {
                            clip: clip.id.clone(),
                            class_id: a.class_id,
                            actor_id: a.actor_id,
                            boxes: vec![(f, a.bbox)],
                        }),
                    }
                }
            }
        }
        out
    }
}

/// Clips with their annotations, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Tensor>,
    pub annotations: AnnotationFile,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("clips"))?;
        for (clip, ann) in self.clips.iter().zip(&self.annotations.clips) {
            ptk::write_file(dir.join("clips").join(format!("{}.ptk", ann.id)), clip)?;
        }
        self.annotations.save(dir.join("annotations.json"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let annotations = AnnotationFile::load(dir.join("annotations.json"))?;
        let clips = annotations
            .clips
            .iter()
            .map(|c| {
                let t = ptk::read_file(dir.join("clips").join(format!("{}.ptk", c.id)))?;
                check_clip(&t, c)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips, annotations })
    }
}

fn check_clip(t: &Tensor, c: &ClipAnnotation) -> Result<()> {
    match *t.shape() {
        [frames, 3, _, _] if frames == c.frames.len() => Ok(()),
        _ => Err(Error::Data(format!(
            "clip {} has shape {:?} but {} annotated frames",
            c.id,
            t.shape(),
            c.frames.len()
        ))),
    }
}
