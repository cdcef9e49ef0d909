//! The toy detector: a two-stage strided convolutional extractor, the point
//! head, time-wise attention and the 3-D classification head.
//!
//! ```text
//! clip T×3×H×W ─ extractor ─ F T×C×h×w ─┬─ point head ─ CP / KP maps (per frame)
//!                                        └─ TWA ─ 3-D head ─ clip logits
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ptk, Tape, Tensor, Var};
use crate::outputs::{CpOutputs, KpOutputs};
use crate::twa::twa;

/// Output stride of the extractor (two stride-2 stages).
pub const STRIDE: usize = 4;

/// Initial heatmap logit bias, a prior probability of about 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Inputs the 3-D head can be fed, concatenated channel-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head3dInput {
    FeaturesTwa,
    RawClip,
    Heatmaps,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwaConfig {
    pub enabled: bool,
    pub use_raw_gram: bool,
}

impl Default for TwaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            use_raw_gram: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input frame side `H = W`.
    pub size: usize,
    pub stride: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Channels after the first extractor stage.
    pub stem_channels: usize,
    /// Extractor kernel sizes of the two stages.
    pub kernels: [usize; 2],
    /// Hidden channels of each point-head branch.
    pub head_channels: usize,
    pub head3d_channels: usize,
    /// Frames per clip window `T`.
    pub frames: usize,
    pub knots: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub twa: TwaConfig,
    pub head3d_inputs: Vec<Head3dInput>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            size: 64,
            stride: STRIDE,
            channels: 32,
            stem_channels: 16,
            kernels: [5, 5],
            head_channels: 16,
            head3d_channels: 32,
            frames: 8,
            knots: 4,
            num_classes: 4,
            seed: 0,
            twa: TwaConfig::default(),
            head3d_inputs: vec![Head3dInput::FeaturesTwa, Head3dInput::Heatmaps],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.stride != STRIDE {
            return bad(format!("stride must be {STRIDE} (two stride-2 stages), got {}", self.stride));
        }
        if self.size == 0 || self.size % self.stride != 0 {
            return bad(format!("stride {} must divide input size {}", self.stride, self.size));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if [self.channels, self.stem_channels, self.head_channels, self.head3d_channels].contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.kernels.iter().any(|&k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {:?}", self.kernels));
        }
        if self.head3d_inputs.is_empty() {
            return bad("head3d_inputs must name at least one input".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.size / self.stride
    }

    fn head3d_in_channels(&self) -> usize {
        let mut seen = self.head3d_inputs.clone();
        seen.sort();
        seen.dedup();
        seen.iter()
            .map(|i| match i {
                Head3dInput::FeaturesTwa => self.channels,
                Head3dInput::RawClip => 3,
                Head3dInput::Heatmaps => 1 + self.knots,
            })
            .sum()
    }

    /// Channel counts of the six point-head branches: CP heatmap, shape,
    /// offset, then KP heatmaps, distances, offset.
    pub fn branch_channels(&self) -> [usize; 6] {
        [1, 2, 2, self.knots, 2 * self.knots, 2]
    }
}

/// Optimizer group: `A` = extractor and point head, `B` = 3-D head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

const BRANCHES: [&str; 6] = ["cp_heat", "cp_shape", "cp_offset", "kp_heat", "kp_dist", "kp_offset"];

/// Shape branch outputs are scaled by the stride so that pixel-sized
/// targets are reachable at the head's learning rate.
fn branch_scale(branch: usize, stride: usize) -> f64 {
    if branch == 1 {
        stride as f64
    } else {
        1.0
    }
}

impl Parameters {
    fn from_list(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut list = Vec::new();
        let mut add = |name: String, shape: &[usize], fan_in: usize, group: Group, bias: Option<f64>| -> Result<()> {
            let value = match bias {
                Some(b) => Tensor::full(shape, b)?,
                None => {
                    let a = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.random_range(-a..a))?
                }
            };
            list.push(Param { name, value, group });
            Ok(())
        };
        let [k1, k2] = cfg.kernels;
        let (c0, c1, c) = (3, cfg.stem_channels, cfg.channels);
        add("ext.conv1.w".into(), &[c1, c0, k1, k1], c0 * k1 * k1, Group::A, None)?;
        add("ext.conv1.b".into(), &[c1], c0 * k1 * k1, Group::A, None)?;
        add("ext.conv2.w".into(), &[c, c1, k2, k2], c1 * k2 * k2, Group::A, None)?;
        add("ext.conv2.b".into(), &[c], c1 * k2 * k2, Group::A, None)?;
        let h = cfg.head_channels;
        for (i, (name, out)) in BRANCHES.iter().zip(cfg.branch_channels()).enumerate() {
            add(format!("head.{name}.conv.w"), &[h, c, 3, 3], c * 9, Group::A, None)?;
            add(format!("head.{name}.conv.b"), &[h], c * 9, Group::A, None)?;
            add(format!("head.{name}.out.w"), &[out, h, 1, 1], h, Group::A, None)?;
            let bias = match i {
                0 | 3 => Some(HEATMAP_PRIOR_BIAS),
                _ => None,
            };
            add(format!("head.{name}.out.b"), &[out], h, Group::A, bias)?;
        }
        let (ci, c3) = (cfg.head3d_in_channels(), cfg.head3d_channels);
        add("h3d.conv1.w".into(), &[c3, ci, 3, 3, 3], ci * 27, Group::B, None)?;
        add("h3d.conv1.b".into(), &[c3], ci * 27, Group::B, None)?;
        add("h3d.conv2.w".into(), &[c3, c3, 3, 3, 3], c3 * 27, Group::B, None)?;
        add("h3d.conv2.b".into(), &[c3], c3 * 27, Group::B, None)?;
        for name in ["pw1", "pw2"] {
            add(format!("h3d.{name}.w"), &[c3, c3], c3, Group::B, None)?;
            add(format!("h3d.{name}.b"), &[c3], c3, Group::B, None)?;
        }
        add("h3d.fc.w".into(), &[c3, cfg.num_classes], c3, Group::B, None)?;
        add("h3d.fc.b".into(), &[cfg.num_classes], c3, Group::B, None)?;
        Ok(Self::from_list(list))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on the tape, as leaves (trainable) or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Directory of `PTK1` tensors plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for p in &self.params {
            ptk::write_file(dir.join(format!("{}.ptk", p.name)), &p.value)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Data(format!("cannot read checkpoint manifest in {}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let expected = Parameters::init(&manifest.config)?;
        let mut list = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let value = ptk::read_file(dir.join(format!("{}.ptk", entry.name)))?;
            if value.shape() != entry.shape.as_slice() || expected.get(&entry.name).map(Tensor::shape) != Some(value.shape()) {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} has shape {:?}, manifest or config disagrees",
                    entry.name,
                    value.shape()
                )));
            }
            list.push(Param {
                name: entry.name.clone(),
                value,
                group: entry.group,
            });
        }
        if list.len() != expected.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, config needs {}",
                list.len(),
                expected.len()
            )));
        }
        Ok((Self::from_list(list), manifest))
    }

    pub fn manifest(&self, cfg: &ModelConfig, step: usize) -> Manifest {
        Manifest {
            step,
            config: cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

/// Parameters placed on a tape, index-aligned with [`Parameters::params`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Everything the forward pass produces for one clip window.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Var,
    pub cp: CpOutputs<Var>,
    pub kp: KpOutputs<Var>,
    pub attention: Option<Var>,
    pub logits: Var,
}

fn conv_bias_relu(tape: &Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize, relu: bool) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.bias_add(y, b, 1)?;
    Ok(if relu { tape.relu(y) } else { y })
}

/// `T×3×H×W` → `T×C×H/R×W/R`.
pub fn extract_features(tape: &Tape, cfg: &ModelConfig, p: &Bound, clip: Var) -> Result<Var> {
    let shape = tape.shape(clip);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.size || shape[3] != cfg.size {
        return Err(Error::dim(
            "extract_features",
            format!("clip {shape:?} should be T×3×{0}×{0}", cfg.size),
        ));
    }
    let [k1, k2] = cfg.kernels;
    let x = conv_bias_relu(tape, clip, p.get("ext.conv1.w"), p.get("ext.conv1.b"), 2, k1 / 2, true)?;
    conv_bias_relu(tape, x, p.get("ext.conv2.w"), p.get("ext.conv2.b"), 2, k2 / 2, true)
}

/// Six branches of 3×3 conv + ReLU + 1×1 conv on `T×C×h×w` features.
pub fn point_head_forward(tape: &Tape, cfg: &ModelConfig, p: &Bound, features: Var) -> Result<(CpOutputs<Var>, KpOutputs<Var>)> {
    let h = cfg.head_channels;
    // The branches' 3×3 convolutions share their input, so run them as one.
    let wcat: Vec<Var> = BRANCHES.iter().map(|n| p.get(&format!("head.{n}.conv.w"))).collect();
    let bcat: Vec<Var> = BRANCHES.iter().map(|n| p.get(&format!("head.{n}.conv.b"))).collect();
    let w = tape.concat(&wcat, 0)?;
    let b = tape.concat(&bcat, 0)?;
    let hidden = conv_bias_relu(tape, features, w, b, 1, 1, true)?;
    let mut outs = Vec::with_capacity(6);
    for (i, name) in BRANCHES.iter().enumerate() {
        let x = tape.slice(hidden, 1, i * h, h)?;
        let mut y = conv_bias_relu(
            tape,
            x,
            p.get(&format!("head.{name}.out.w")),
            p.get(&format!("head.{name}.out.b")),
            1,
            0,
            false,
        )?;
        let scale = branch_scale(i, cfg.stride);
        if scale != 1.0 {
            y = tape.scale(y, scale);
        }
        if i == 0 || i == 3 {
            y = tape.sigmoid(y);
        }
        outs.push(y);
    }
    Ok((
        CpOutputs {
            heatmap: outs[0],
            shape: outs[1],
            offset: outs[2],
        },
        KpOutputs {
            heatmap: outs[3],
            distance: outs[4],
            offset: outs[5],
        },
    ))
}

/// Average-pool `T×3×H×W` by `stride` in both spatial axes.
pub fn pool_clip(clip: &Tensor, stride: usize) -> Result<Tensor> {
    let &[t, c, h, w] = clip.shape() else {
        return Err(Error::dim("pool_clip", format!("expected T×C×H×W, got {:?}", clip.shape())));
    };
    let (oh, ow) = (h / stride, w / stride);
    let norm = (stride * stride) as f64;
    let src = clip.data();
    let mut out = vec![0.0; t * c * oh * ow];
    for plane in 0..t * c {
        for y in 0..oh * stride {
            for x in 0..ow * stride {
                out[(plane * oh + y / stride) * ow + x / stride] += src[(plane * h + y) * w + x] / norm;
            }
        }
    }
    Tensor::new(&[t, c, oh, ow], out)
}

/// Clip logits from the selected `T×C'×h×w` inputs.
pub fn head3d_forward(tape: &Tape, cfg: &ModelConfig, p: &Bound, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Config("model: head3d_inputs must name at least one input".into()));
    }
    let x = if inputs.len() == 1 { inputs[0] } else { tape.concat(inputs, 1)? };
    let x = tape.swap01(x)?;
    let mut y = x;
    for name in ["conv1", "conv2"] {
        y = tape.conv3d(y, p.get(&format!("h3d.{name}.w")), [2, 2, 2], [1, 1, 1])?;
        y = tape.bias_add(y, p.get(&format!("h3d.{name}.b")), 0)?;
        y = tape.relu(y);
    }
    let pooled = tape.mean_trailing(y, 1)?;
    let c3 = cfg.head3d_channels;
    let mut v = tape.reshape(pooled, &[1, c3])?;
    for name in ["pw1", "pw2"] {
        v = tape.matmul(v, p.get(&format!("h3d.{name}.w")))?;
        v = tape.bias_add(v, p.get(&format!("h3d.{name}.b")), 1)?;
        v = tape.relu(v);
    }
    let logits = tape.matmul(v, p.get("h3d.fc.w"))?;
    let logits = tape.bias_add(logits, p.get("h3d.fc.b"), 1)?;
    tape.reshape(logits, &[cfg.num_classes])
}

/// Full forward pass of one clip window.
pub fn forward(tape: &Tape, cfg: &ModelConfig, p: &Bound, clip: &Tensor) -> Result<Forward> {
    let clip_var = tape.constant(clip.clone());
    let features = extract_features(tape, cfg, p, clip_var)?;
    let (cp, kp) = point_head_forward(tape, cfg, p, features)?;
    let (f3d, attention) = if cfg.twa.enabled {
        let out = twa(tape, features, cfg.twa.use_raw_gram)?;
        (out.y, Some(out.attention))
    } else {
        (features, None)
    };
    let mut kinds = cfg.head3d_inputs.clone();
    kinds.sort();
    kinds.dedup();
    let mut inputs = Vec::with_capacity(kinds.len());
    for kind in kinds {
        inputs.push(match kind {
            Head3dInput::FeaturesTwa => f3d,
            Head3dInput::RawClip => tape.constant(pool_clip(clip, cfg.stride)?),
            Head3dInput::Heatmaps => tape.concat(&[cp.heatmap, kp.heatmap], 1)?,
        });
    }
    let logits = head3d_forward(tape, cfg, p, &inputs)?;
    Ok(Forward {
        features,
        cp,
        kp,
        attention,
        logits,
    })
}

/// Inference result for one clip window.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub cp: CpOutputs,
    pub kp: KpOutputs,
    pub logits: Tensor,
    pub attention: Option<Tensor>,
}

impl Prediction {
    pub fn class_id(&self) -> usize {
        let l = self.logits.data();
        (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best })
    }
}

pub fn predict(cfg: &ModelConfig, params: &Parameters, clip: &Tensor) -> Result<Prediction> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let out = forward(&tape, cfg, &bound, clip)?;
    let logits = tape.value(out.logits).clone();
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits during inference".into()));
    }
    Ok(Prediction {
        cp: out.cp.values(&tape),
        kp: out.kp.values(&tape),
        attention: out.attention.map(|a| tape.value(a).clone()),
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            size: 16,
            channels: 4,
            stem_channels: 3,
            head_channels: 2,
            head3d_channels: 3,
            frames: 2,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig {
            frames: 8,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg).unwrap();
        let clip = Tensor::zeros(&[8, 3, 64, 64]).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let out = forward(&tape, &cfg, &b, &clip).unwrap();
        assert_eq!(tape.shape(out.features), vec![8, 32, 16, 16]);
        let shapes: Vec<usize> = [out.cp.heatmap, out.cp.shape, out.cp.offset, out.kp.heatmap, out.kp.distance, out.kp.offset]
            .iter()
            .map(|&v| tape.shape(v)[1])
            .collect();
        assert_eq!(shapes, vec![1, 2, 2, 4, 8, 2]);
        assert_eq!(tape.shape(out.logits), vec![4]);
        let heat = tape.value(out.cp.heatmap);
        assert!(heat.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let cfg = tiny();
        let p = Parameters::init(&cfg).unwrap();
        let frame = Tensor::from_fn(&[3, 16, 16], |i| ((i * 13) % 7) as f64 / 7.0).unwrap();
        let clip = Tensor::stack(&[frame.clone(), frame]).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let f = extract_features(&tape, &cfg, &b, tape.constant(clip)).unwrap();
        let v = tape.value(f);
        let half = v.len() / 2;
        assert_eq!(v.data()[..half], v.data()[half..]);
    }

    #[test]
    fn init_is_deterministic_and_grouped() {
        let cfg = tiny();
        assert_eq!(Parameters::init(&cfg).unwrap(), Parameters::init(&cfg).unwrap());
        let other = Parameters::init(&ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(Parameters::init(&cfg).unwrap(), other);
        let p = Parameters::init(&cfg).unwrap();
        for param in &p.params {
            let expect = if param.name.starts_with("h3d.") { Group::B } else { Group::A };
            assert_eq!(param.group, expect, "{}", param.name);
        }
        assert_eq!(p.get("head.cp_heat.out.b").unwrap().data(), &[HEATMAP_PRIOR_BIAS]);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            ModelConfig { size: 30, ..tiny() },
            ModelConfig { frames: 0, ..tiny() },
            ModelConfig {
                head3d_inputs: vec![],
                ..tiny()
            },
            ModelConfig { stride: 2, ..tiny() },
        ] {
            assert!(matches!(Parameters::init(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pool_clip_averages_blocks() {
        let clip = Tensor::from_fn(&[1, 3, 4, 4], |i| (i % 16) as f64).unwrap();
        let p = pool_clip(&clip, 2).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 2]);
        assert_eq!(&p.data()[..4], &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let p = Parameters::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), &p.manifest(&cfg, 7)).unwrap();
        let (q, m) = Parameters::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.step, 7);
    }
}
