//! Time-wise attention on the features of a synthetic clip: prints the
//! row-stochastic frame-mixing matrix.
//!
//! cargo run --release --example twa_attention

use point3d::model::{predict, ModelConfig, Parameters};
use point3d::synth::{generate_dataset, SynthConfig};

fn main() -> point3d::Result<()> {
    let ds = generate_dataset(&SynthConfig {
        num_clips: 1,
        ..SynthConfig::default()
    })?;
    let cfg = ModelConfig::default();
    let params = Parameters::init(&cfg)?;
    let pred = predict(&cfg, &params, &ds.clips[0])?;
    let m = pred.attention.expect("attention is enabled by default");
    let t = m.shape()[0];
    println!("attention over {t} frames of {} (untrained weights):", ds.annotations.clips[0].id);
    for row in m.data().chunks(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}   sum {:.12}", cells.join(" "), row.iter().sum::<f64>());
    }
    Ok(())
}
