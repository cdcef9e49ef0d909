//! Linking per-frame detections into action tubes.
//!
//! A path picks one detection in each frame of a gap-free frame range. Its
//! score is the sum of [`link_score`] over consecutive pairs (a single-frame
//! path scores its detection's confidence). Among equal scores the path that
//! starts earliest wins, then the path whose detections are smallest under
//! [`Detection::box_cmp`] compared frame by frame.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::eval::iou_2d;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Weight of the box overlap term in [`link_score`].
    pub beta: f64,
    pub max_tubes: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            max_tubes: 10,
        }
    }
}

/// Detections over consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    pub detections: Vec<Detection>,
    /// Mean detection score.
    pub score: f64,
    pub class_id: usize,
}

impl Tube {
    pub fn new(detections: Vec<Detection>) -> Result<Self> {
        let first = detections
            .first()
            .ok_or_else(|| Error::Contract("a tube needs at least one detection".into()))?;
        if detections.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
            return Err(Error::Contract("tube frames must increase by one".into()));
        }
        let score = detections.iter().map(|d| d.score).sum::<f64>() / detections.len() as f64;
        let class_id = first.class_id;
        Ok(Self {
            detections,
            score,
            class_id,
        })
    }

    pub fn start(&self) -> usize {
        self.detections[0].frame
    }

    pub fn end(&self) -> usize {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn clip(&self) -> &str {
        &self.detections[0].clip
    }
}

/// `a.score + b.score + beta · IoU(a, b)` for detections in adjacent frames.
pub fn link_score(a: &Detection, b: &Detection, beta: f64) -> Result<f64> {
    if b.frame != a.frame + 1 {
        return Err(Error::Contract(format!(
            "link_score needs adjacent frames, got {} and {}",
            a.frame, b.frame
        )));
    }
    Ok(a.score + b.score + beta * iou_2d(&a.bbox, &b.bbox))
}

fn path_cmp(frames: &[Vec<Detection>], start: usize, a: &[usize], b: &[usize]) -> Ordering {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(t, (&i, &j))| frames[start + t][i].box_cmp(&frames[start + t][j]).then(i.cmp(&j)))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Best path (score, detection indices) over frames `start..end`, all non-empty.
fn viterbi_segment(frames: &[Vec<Detection>], start: usize, end: usize, beta: f64) -> Result<(f64, Vec<usize>)> {
    let first = &frames[start];
    if end - start == 1 {
        return Ok(single_frame_best(first));
    }
    // (accumulated score, path of indices) per detection of the current frame
    let mut best: Vec<(f64, Vec<usize>)> = (0..first.len()).map(|i| (0.0, vec![i])).collect();
    for t in start + 1..end {
        let mut next = Vec::with_capacity(frames[t].len());
        for (j, dj) in frames[t].iter().enumerate() {
            let mut choice: Option<(f64, usize)> = None;
            for (i, di) in frames[t - 1].iter().enumerate() {
                let s = best[i].0 + link_score(di, dj, beta)?;
                let take = match choice {
                    None => true,
                    Some((cs, ci)) => {
                        s > cs || (s == cs && path_cmp(frames, start, &best[i].1, &best[ci].1).is_lt())
                    }
                };
                if take {
                    choice = Some((s, i));
                }
            }
            let (s, i) = choice.expect("previous frame is non-empty");
            let mut path = best[i].1.clone();
            path.push(j);
            next.push((s, path));
        }
        best = next;
    }
    let mut winner = 0;
    for k in 1..best.len() {
        let (s, w) = (best[k].0, best[winner].0);
        if s > w || (s == w && path_cmp(frames, start, &best[k].1, &best[winner].1).is_lt()) {
            winner = k;
        }
    }
    Ok(best.swap_remove(winner))
}

fn single_frame_best(dets: &[Detection]) -> (f64, Vec<usize>) {
    let mut winner = 0;
    for (k, d) in dets.iter().enumerate().skip(1) {
        let w = &dets[winner];
        if d.score > w.score || (d.score == w.score && d.box_cmp(w).is_lt()) {
            winner = k;
        }
    }
    (dets[winner].score, vec![winner])
}

/// Maximal runs of frames that all hold at least one detection.
fn segments(frames: &[Vec<Detection>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
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
        out.push((s, t));
    }
    out
}

fn check_frames(frames: &[Vec<Detection>]) -> Result<()> {
    let Some(base) = frames.iter().flatten().next().map(|d| d.frame as isize) else {
        return Ok(());
    };
    let base_index = frames.iter().position(|f| !f.is_empty()).expect("non-empty frame") as isize;
    for (t, dets) in frames.iter().enumerate() {
        if dets.iter().any(|d| d.frame as isize - base != t as isize - base_index) {
            return Err(Error::Contract(format!(
                "detections in slot {t} carry inconsistent frame indices"
            )));
        }
    }
    Ok(())
}

type Candidate = (f64, usize, Vec<usize>);

fn better(frames: &[Vec<Detection>], a: &Candidate, b: &Candidate) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    path_cmp(frames, a.1, &a.2, &b.2).is_lt()
}

fn extract(frames: &[Vec<Detection>], start: usize, path: &[usize]) -> Result<Tube> {
    Tube::new(
        path.iter()
            .enumerate()
            .map(|(t, &i)| frames[start + t][i].clone())
            .collect(),
    )
}

/// Greedy multi-tube Viterbi linking: take the best path over all gap-free
/// ranges, remove its detections, repeat until nothing is left or
/// `max_tubes` tubes exist. `frames[t]` holds the detections of frame `t`.
pub fn viterbi_link(frames: &[Vec<Detection>], max_tubes: usize, beta: f64) -> Result<Vec<Tube>> {
    if frames.is_empty() {
        return Err(Error::Contract("viterbi_link needs at least one frame".into()));
    }
    check_frames(frames)?;
    let mut remaining: Vec<Vec<Detection>> = frames.to_vec();
    let mut tubes = Vec::new();
    while tubes.len() < max_tubes {
        let mut best: Option<Candidate> = None;
        for (s, e) in segments(&remaining) {
            let (score, path) = viterbi_segment(&remaining, s, e, beta)?;
            let cand = (score, s, path);
            if best.as_ref().is_none_or(|b| better(&remaining, &cand, b)) {
                best = Some(cand);
            }
        }
        let Some((_, start, path)) = best else { break };
        tubes.push(extract(&remaining, start, &path)?);
        for (t, &i) in path.iter().enumerate() {
            remaining[start + t].remove(i);
        }
    }
    Ok(tubes)
}

/// Odometer step over per-frame indices, last frame fastest; false when exhausted.
fn advance(idx: &mut [usize], len: impl Fn(usize) -> usize) -> bool {
    for t in (0..idx.len()).rev() {
        idx[t] += 1;
        if idx[t] < len(t) {
            return true;
        }
        idx[t] = 0;
    }
    false
}

/// Largest number of paths [`brute_force_link`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Exhaustive best single tube under the same scoring and tie-breaking as
/// [`viterbi_link`]'s first tube.
pub fn brute_force_link(frames: &[Vec<Detection>], beta: f64) -> Result<Option<Tube>> {
    check_frames(frames)?;
    frames
        .iter()
        .filter(|f| !f.is_empty())
        .try_fold(1usize, |acc, f| acc.checked_mul(f.len()))
        .filter(|&n| n <= BRUTE_FORCE_LIMIT)
        .ok_or_else(|| Error::Contract(format!("instance exceeds {BRUTE_FORCE_LIMIT} paths")))?;
    let mut best: Option<Candidate> = None;
    for (s, e) in segments(frames) {
        let mut idx = vec![0usize; e - s];
        loop {
            let score = if idx.len() == 1 {
                frames[s][idx[0]].score
            } else {
                let mut acc = 0.0;
                for t in 1..idx.len() {
                    acc += link_score(&frames[s + t - 1][idx[t - 1]], &frames[s + t][idx[t]], beta)?;
                }
                acc
            };
            let cand = (score, s, idx.clone());
            if best.as_ref().is_none_or(|b| better(frames, &cand, b)) {
                best = Some(cand);
            }
            if !advance(&mut idx, |t| frames[s + t].len()) {
                break;
            }
        }
    }
    best.map(|(_, start, path)| extract(frames, start, &path)).transpose()
}
