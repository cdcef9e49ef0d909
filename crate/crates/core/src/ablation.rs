//! Config sweeps that retrain the detector under equal budgets and compare
//! frame-mAP.

use serde::Serialize;

use crate::config::{RunConfig, Sweep};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::Head3dInput;
use crate::pipeline::{evaluate_dataset, run_inference};
use crate::train::{build_examples, train};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub frame_map: f64,
    pub video_map_05: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// One configuration of a sweep; `eval_only` arms reuse the model trained
/// for the arm they name and change only post-processing.
struct Arm {
    name: String,
    cfg: RunConfig,
    reuse: Option<usize>,
}

fn arms(base: &RunConfig, sweep: Sweep) -> Vec<Arm> {
    let arm = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm {
            name: name.to_string(),
            cfg,
            reuse: None,
        }
    };
    match sweep {
        Sweep::Temporal => vec![
            arm("t1", &|c| c.model.frames = 1),
            arm(&format!("t{}", base.model.frames), &|_| {}),
        ],
        Sweep::Components => {
            let mut v = vec![
                arm("full", &|c| {
                    c.model.twa.enabled = true;
                    c.decode.use_knots = true;
                }),
                arm("no_twa", &|c| {
                    c.model.twa.enabled = false;
                    c.decode.use_knots = true;
                }),
                arm("no_knots", &|c| {
                    c.model.twa.enabled = true;
                    c.decode.use_knots = false;
                }),
            ];
            v[2].reuse = Some(0);
            v
        }
        Sweep::Head3dInputs => {
            use Head3dInput::*;
            [
                ("features_twa", vec![FeaturesTwa]),
                ("raw_clip", vec![RawClip]),
                ("heatmaps", vec![Heatmaps]),
                ("features_twa+heatmaps", vec![FeaturesTwa, Heatmaps]),
            ]
            .into_iter()
            .map(|(n, inputs)| arm(n, &|c| c.model.head3d_inputs = inputs.clone()))
            .collect()
        }
        Sweep::LossWeights => [(1.0, 1.0), (5.0, 1.0), (10.0, 1.0), (20.0, 1.0)]
            .into_iter()
            .map(|(loc, cls)| {
                arm(&format!("loc{loc}_cls{cls}"), &|c| {
                    c.train.loss.loc = loc;
                    c.train.loss.cls = cls;
                })
            })
            .collect(),
    }
}

/// Train and evaluate every arm for every seed in `base.ablate.seeds`.
pub fn run_sweep(
    base: &RunConfig,
    sweep: Sweep,
    train_set: &Dataset,
    eval_set: &Dataset,
    threads: usize,
    mut on_result: impl FnMut(&ArmResult),
) -> Result<Vec<ArmResult>> {
    let arms = arms(base, sweep);
    let mut out = Vec::new();
    for &seed in &base.ablate.seeds {
        let mut trained = Vec::with_capacity(arms.len());
        for arm in &arms {
            let mut cfg = arm.cfg.clone();
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.train.steps = base.ablate.steps;
            let (params, steps, seconds) = match arm.reuse {
                Some(i) => {
                    let (p, s, _): &(crate::model::Parameters, usize, f64) = &trained[i];
                    (p.clone(), *s, 0.0)
                }
                None => {
                    let examples = build_examples(train_set, &cfg.model)?;
                    let o = train(&cfg.model, &cfg.train, &examples, |_| {})?;
                    (o.params, o.steps, o.seconds)
                }
            };
            let inf = run_inference(&cfg.model, &params, eval_set, &cfg.decode, &cfg.link, threads)?;
            let report = evaluate_dataset(&inf, eval_set, cfg.eval.iou_threshold);
            let r = ArmResult {
                arm: arm.name.clone(),
                seed,
                frame_map: report.frame_map,
                video_map_05: report.video_map.at_0_5,
                steps,
                seconds,
            };
            on_result(&r);
            out.push(r);
            trained.push((params, steps, seconds));
        }
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median frame-mAP per arm, in first-seen arm order.
pub fn medians(results: &[ArmResult]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.arm.as_str()) {
            names.push(&r.arm);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let mut v: Vec<f64> = results.iter().filter(|r| r.arm == n).map(|r| r.frame_map).collect();
            (n.to_string(), median(&mut v))
        })
        .collect()
}

pub fn to_csv(results: &[ArmResult]) -> String {
    let mut s = String::from("arm,seed,frame_map,video_map_05,steps,seconds\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.1}\n",
            r.arm, r.seed, r.frame_map, r.video_map_05, r.steps, r.seconds
        ));
    }
    for (arm, m) in medians(results) {
        s.push_str(&format!("{arm},median,{m:.6},,,\n"));
    }
    s
}
