//! Optimizers, the training step and the training loop.
//!
//! Group A (extractor and point head) is updated with Adam, group B (3-D
//! head) with plain SGD.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cls_loss, cp_loss, kp_loss, overall_loss_from_sum, LossBreakdown, LossWeights};
use crate::model::{forward, Group, ModelConfig, Parameters};
use crate::numerics::{Tape, Tensor};
use crate::targets::ClipTargets;

/// Update rule for the 3-D head parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clip windows per step; their losses are averaged.
    pub batch: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub optimizer_b: GroupBOptimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Anneal both learning rates to zero over `steps` on a half cosine.
    pub cosine_decay: bool,
    /// Stop early once this many seconds have elapsed (0 = no limit).
    pub time_budget_secs: f64,
    pub seed: u64,
    pub log_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 2,
            lr_a: 5e-4,
            lr_b: 5e-4,
            optimizer_b: GroupBOptimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cosine_decay: true,
            time_budget_secs: 870.0,
            seed: 0,
            log_every: 50,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train: batch must be at least 1".into()));
        }
        let rates = [self.lr_a, self.lr_b, self.adam_eps, self.time_budget_secs];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return Err(Error::Config(format!("train: invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning-rate multiplier for the 1-based `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let f = (step.saturating_sub(1) as f64 / self.steps as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * f).cos())
        } else {
            1.0
        }
    }
}

/// Adam moments for every tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
}

impl Optimizer {
    pub fn new(params: &Parameters) -> Self {
        let moments = || {
            params
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()).expect("parameter shapes are valid"))
                .collect()
        };
        Self {
            m: moments(),
            v: moments(),
            step: 0,
        }
    }

    /// Apply one update from gradients index-aligned with the parameters.
    pub fn apply(&mut self, params: &mut Parameters, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let scale = cfg.lr_scale(self.step);
        for (i, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
            let (lr, adam) = match p.group {
                Group::A => (cfg.lr_a * scale, true),
                Group::B => (cfg.lr_b * scale, cfg.optimizer_b == GroupBOptimizer::Adam),
            };
            if adam {
                let m = self.m[i].data_mut();
                let v = self.v[i].data_mut();
                for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                }
            } else {
                for (w, &g) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * g;
                }
            }
        }
    }
}

/// One training example: a clip window, its targets and its label.
#[derive(Clone, Debug)]
pub struct Example {
    pub clip: Tensor,
    pub targets: ClipTargets,
    pub label: usize,
}

/// Loss of a batch on a fresh tape plus the gradient of every parameter.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &[Example],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let mut terms = Vec::with_capacity(batch.len());
    let mut parts = [0.0; 5];
    let n = batch.len() as f64;
    for ex in batch {
        let out = forward(&tape, cfg, &bound, &ex.clip)?;
        let cp = cp_loss(&tape, &out.cp, &ex.targets, weights)?;
        let kp = kp_loss(&tape, &out.kp, &ex.targets, weights, cfg.knots)?;
        let cls = cls_loss(&tape, out.logits, ex.label)?;
        let loc = tape.add(cp.total, kp.total)?;
        let total = overall_loss_from_sum(&tape, loc, ex.targets.frames(), cls, weights)?;
        let frames = ex.targets.frames() as f64;
        for (acc, v) in parts.iter_mut().zip([cp.heatmap, cp.shape, cp.offset, kp.total]) {
            *acc += tape.scalar(v) / frames / n;
        }
        parts[4] += tape.scalar(cls) / n;
        terms.push((1.0 / n, total));
    }
    let loss = tape.weighted_sum(&terms)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(nan_diagnostic(params, value, &parts));
    }
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    if let Some((p, _)) = params.params.iter().zip(&grads).find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
    }
    let breakdown = LossBreakdown {
        step: 0,
        l_cp_h: parts[0],
        l_cp_s: parts[1],
        l_cp_o: parts[2],
        l_kp: parts[3],
        l_cls: parts[4],
        l_overall: value,
    };
    Ok((breakdown, grads))
}

fn nan_diagnostic(params: &Parameters, value: f64, parts: &[f64; 5]) -> Error {
    let bad: Vec<String> = params
        .params
        .iter()
        .filter(|p| !p.value.is_finite())
        .map(|p| p.name.clone())
        .collect();
    let max_abs = params
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    Error::Numeric(format!(
        "loss is {value}; terms [cp_h, cp_s, cp_o, kp, cls] = {parts:?}; non-finite parameters {bad:?}; largest |weight| {max_abs:?}"
    ))
}

/// Forward, loss, backward and one optimizer update.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut Parameters,
    opt: &mut Optimizer,
    batch: &[Example],
    train: &TrainConfig,
) -> Result<LossBreakdown> {
    let (mut breakdown, grads) = loss_and_grads(cfg, params, batch, &train.loss)?;
    opt.apply(params, &grads, train);
    breakdown.step = opt.step;
    Ok(breakdown)
}

/// Windows of `frames` consecutive frames covering a clip of `len` frames;
/// the last window is aligned to the clip end.
pub fn windows(len: usize, frames: usize) -> Vec<usize> {
    if len <= frames {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=len - frames).step_by(frames).collect();
    if starts.last() != Some(&(len - frames)) {
        starts.push(len - frames);
    }
    starts
}

/// Slice frames `start..start + len` of a `T×…` tensor.
pub fn frames_of(clip: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let t = clip.shape()[0];
    if start + len > t {
        return Err(Error::dim("frames_of", format!("frames {start}..{} of a {t}-frame clip", start + len)));
    }
    let per = clip.len() / t;
    let mut shape = clip.shape().to_vec();
    shape[0] = len;
    Tensor::new(&shape, clip.data()[start * per..(start + len) * per].to_vec())
}

/// Every training window of the dataset, targets rendered once up front.
pub fn build_examples(ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (clip, ann) in ds.clips.iter().zip(&ds.annotations.clips) {
        let len = clip.shape()[0];
        let frames = cfg.frames.min(len);
        for start in windows(len, frames) {
            let targets = ann.targets(start, frames, cfg.knots, [cfg.size, cfg.size], cfg.stride)?;
            out.push(Example {
                clip: frames_of(clip, start, frames)?,
                targets,
                label: ann.label,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub trace: Vec<LossBreakdown>,
    pub steps: usize,
    pub seconds: f64,
}

/// Train from the model's seeded initialization. `on_step` sees every
/// breakdown (for logging or JSON lines).
pub fn train(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    examples: &[Example],
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.label >= cfg.num_classes) {
        return Err(Error::Data(format!(
            "label {} outside {} classes",
            ex.label, cfg.num_classes
        )));
    }
    let mut params = Parameters::init(cfg)?;
    let mut opt = Optimizer::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let started = Instant::now();
    let mut trace = Vec::with_capacity(train_cfg.steps);
    for _ in 0..train_cfg.steps {
        if train_cfg.time_budget_secs > 0.0 && started.elapsed().as_secs_f64() > train_cfg.time_budget_secs {
            log::info!("time budget reached after {} steps", opt.step);
            break;
        }
        let mut batch = Vec::with_capacity(train_cfg.batch);
        while batch.len() < train_cfg.batch.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let b = train_step(cfg, &mut params, &mut opt, &batch, train_cfg)?;
        if train_cfg.log_every > 0 && b.step % train_cfg.log_every == 0 {
            log::info!(
                "step {} loss {:.4} (cp_h {:.4} cp_s {:.3} cp_o {:.3} kp {:.4} cls {:.4})",
                b.step,
                b.l_overall,
                b.l_cp_h,
                b.l_cp_s,
                b.l_cp_o,
                b.l_kp,
                b.l_cls
            );
        }
        on_step(&b);
        trace.push(b);
    }
    Ok(TrainOutcome {
        params,
        steps: opt.step,
        trace,
        seconds: started.elapsed().as_secs_f64(),
    })
}
