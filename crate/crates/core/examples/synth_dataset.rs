//! Generate the default synthetic train/eval splits, save them and print
//! the label balance and a few motion statistics.
//!
//! cargo run --release --example synth_dataset -- [out_dir]

use point3d::synth::{generate_splits, motion_features, SynthConfig};

fn main() -> point3d::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    let cfg = SynthConfig::default();
    let (train, eval) = generate_splits(&cfg)?;
    train.save(format!("{out}/train"))?;
    eval.save(format!("{out}/eval"))?;

    let mut counts = vec![0usize; cfg.num_classes];
    for c in &train.annotations.clips {
        counts[c.label] += 1;
    }
    println!("{} train / {} eval clips in {out}; labels per class {counts:?}", train.len(), eval.len());
    for c in train.annotations.clips.iter().take(4) {
        let boxes: Vec<_> = c.frames.iter().map(|f| f.actors[0].bbox).collect();
        let [vx, vy, acc, ds] = motion_features(&boxes);
        println!("{} class {}: |vx| {vx:.2} |vy| {vy:.2} |accel| {acc:.2} |dsize| {ds:.2}", c.id, c.label);
    }
    Ok(())
}
