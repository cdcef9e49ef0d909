//! Inference over whole datasets: windows → maps → detections → tubes →
//! metrics, plus the JSON formats exchanged between the commands.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::decode::{decode_frame, DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::linking::{viterbi_link, LinkConfig, Tube};
use crate::model::{predict, ModelConfig, Parameters};
use crate::numerics::Tensor;
use crate::train::{frames_of, windows};

/// Per-frame detections of one clip, class taken from the window's logits.
pub fn detect_clip(
    cfg: &ModelConfig,
    params: &Parameters,
    clip: &Tensor,
    clip_id: &str,
    decode: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    let len = clip.shape()[0];
    let frames = cfg.frames.min(len);
    let mut out = vec![Vec::new(); len];
    for start in windows(len, frames) {
        let pred = predict(cfg, params, &frames_of(clip, start, frames)?)?;
        let class_id = pred.class_id();
        for t in 0..frames {
            let cp = pred.cp.frame(t)?;
            let kp = pred.kp.frame(t)?;
            let mut dets = decode_frame(&cp, Some(&kp), start + t, cfg.stride, decode)?;
            for d in &mut dets {
                d.clip = clip_id.to_string();
                d.class_id = class_id;
            }
            // Later windows overwrite the overlap of an end-aligned window.
            out[start + t] = dets;
        }
    }
    Ok(out)
}

/// Link one clip's detections; each tube takes the majority class of its
/// detections (ties to the smaller id).
pub fn link_clip(per_frame: &[Vec<Detection>], link: &LinkConfig) -> Result<Vec<Tube>> {
    let mut tubes = viterbi_link(per_frame, link.max_tubes, link.beta)?;
    for t in &mut tubes {
        let mut counts = std::collections::BTreeMap::new();
        for d in &t.detections {
            *counts.entry(d.class_id).or_insert(0usize) += 1;
        }
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&c, _)| c);
        t.class_id = best.unwrap_or(t.class_id);
    }
    Ok(tubes)
}

#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub tubes: Vec<Tube>,
}

/// Detect and link every clip, spreading clips over at most `threads`
/// workers that share the parameters read-only. Output order follows the
/// dataset regardless of thread count.
pub fn run_inference(
    cfg: &ModelConfig,
    params: &Parameters,
    ds: &Dataset,
    decode: &DecodeConfig,
    link: &LinkConfig,
    threads: usize,
) -> Result<Inference> {
    let jobs: Vec<(&Tensor, &str)> = ds
        .clips
        .iter()
        .zip(&ds.annotations.clips)
        .map(|(c, a)| (c, a.id.as_str()))
        .collect();
    let one = |(clip, id): (&Tensor, &str)| -> Result<(Vec<Detection>, Vec<Tube>)> {
        let per_frame = detect_clip(cfg, params, clip, id, decode)?;
        let tubes = link_clip(&per_frame, link)?;
        Ok((per_frame.into_iter().flatten().collect(), tubes))
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    let results: Vec<Result<(Vec<Detection>, Vec<Tube>)>> = if threads == 1 {
        jobs.into_iter().map(one).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&j| one(j)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("inference worker panicked"))
                .collect()
        })
    };
    let mut inf = Inference::default();
    for r in results {
        let (d, t) = r?;
        inf.detections.extend(d);
        inf.tubes.extend(t);
    }
    Ok(inf)
}

pub fn evaluate_dataset(inf: &Inference, ds: &Dataset, iou_thr: f64) -> EvalReport {
    evaluate(
        &inf.detections,
        &ds.annotations.ground_truths(),
        &inf.tubes,
        &ds.annotations.gt_tubes(),
        iou_thr,
    )
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !d.bbox.is_well_formed() || !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Data(format!("{}:{}: malformed detection", path.display(), i + 1)));
        }
        out.push(d);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeFrame {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: crate::targets::BBox,
    pub score: f64,
}

/// On-disk form of a tube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub clip: String,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
    pub frames: Vec<TubeFrame>,
}

impl From<&Tube> for TubeRecord {
    fn from(t: &Tube) -> Self {
        Self {
            clip: t.clip().to_string(),
            class_id: t.class_id,
            score: t.score,
            frames: t
                .detections
                .iter()
                .map(|d| TubeFrame {
                    frame: d.frame,
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect(),
        }
    }
}

impl TubeRecord {
    pub fn into_tube(self) -> Result<Tube> {
        let dets = self
            .frames
            .into_iter()
            .map(|f| Detection {
                clip: self.clip.clone(),
                frame: f.frame,
                bbox: f.bbox,
                score: f.score,
                class_id: self.class_id,
                knots: None,
                cell: None,
            })
            .collect();
        let mut tube = Tube::new(dets).map_err(|e| Error::Data(format!("tube in clip {}: {e}", self.clip)))?;
        tube.score = self.score;
        Ok(tube)
    }
}

pub fn write_tubes(path: impl AsRef<Path>, tubes: &[Tube]) -> Result<()> {
    let records: Vec<TubeRecord> = tubes.iter().map(TubeRecord::from).collect();
    fs::write(path, serde_json::to_string(&records)?)?;
    Ok(())
}

pub fn read_tubes(path: impl AsRef<Path>) -> Result<Vec<Tube>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let records: Vec<TubeRecord> = serde_json::from_str(&text)?;
    records.into_iter().map(TubeRecord::into_tube).collect()
}

/// Group detections by clip (in first-seen order) and frame.
pub fn group_by_clip(dets: &[Detection]) -> Vec<(String, Vec<Vec<Detection>>)> {
    let mut out: Vec<(String, Vec<Vec<Detection>>)> = Vec::new();
    for d in dets {
        let pos = match out.iter().position(|(c, _)| *c == d.clip) {
            Some(p) => p,
            None => {
                out.push((d.clip.clone(), Vec::new()));
                out.len() - 1
            }
        };
        let frames = &mut out[pos].1;
        if frames.len() <= d.frame {
            frames.resize(d.frame + 1, Vec::new());
        }
        frames[d.frame].push(d.clone());
    }
    out
}
