//! Train the toy detector on the default generated clips and report
//! frame/video mAP. With no arguments this is the full default run.
//!
//! cargo run --release --example train_synthetic -- [steps] [seconds]

use point3d::decode::DecodeConfig;
use point3d::linking::LinkConfig;
use point3d::model::ModelConfig;
use point3d::pipeline::{evaluate_dataset, run_inference};
use point3d::synth::{generate_splits, SynthConfig};
use point3d::train::{build_examples, train, TrainConfig};

fn main() -> point3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let defaults = TrainConfig::default();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(defaults.steps);
    let seconds = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(defaults.time_budget_secs);

    let synth = SynthConfig::default();
    let (train_set, eval_set) = generate_splits(&synth)?;
    let model = ModelConfig::default();
    let examples = build_examples(&train_set, &model)?;
    let tc = TrainConfig {
        steps,
        time_budget_secs: seconds,
        ..defaults
    };
    let out = train(&model, &tc, &examples, |_| {})?;
    println!("trained {} steps in {:.1} s", out.steps, out.seconds);

    let inf = run_inference(&model, &out.params, &eval_set, &DecodeConfig::default(), &LinkConfig::default(), 1)?;
    let report = evaluate_dataset(&inf, &eval_set, 0.5);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
