//! Retrain under one sweep (temporal, components, head3d_inputs or
//! loss_weights) on equal step budgets and print the comparison table.
//!
//! cargo run --release --example ablation_sweep -- [sweep] [steps] [seeds]

use point3d::ablation::{run_sweep, to_csv};
use point3d::config::{RunConfig, Sweep};
use point3d::synth::generate_splits;

fn main() -> point3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let sweep: Sweep = toml::Value::String(args.get(1).cloned().unwrap_or_else(|| "components".into()))
        .try_into()
        .map_err(|e| point3d::Error::Config(format!("unknown sweep: {e}")))?;
    let mut cfg = RunConfig::default();
    cfg.ablate.steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    cfg.ablate.seeds = (0..seeds).collect();
    let (train, eval) = generate_splits(&cfg.synth)?;
    let results = run_sweep(&cfg, sweep, &train, &eval, 1, |r| {
        log::info!("{} seed {}: frame-mAP {:.4}", r.arm, r.seed, r.frame_map)
    })?;
    print!("{}", to_csv(&results));
    Ok(())
}
