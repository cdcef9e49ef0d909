//! Frame-mAP, video-mAP and the error breakdown for perturbed versions of
//! the ground truth of a few synthetic clips.
//!
//! cargo run --release --example evaluate_metrics

use point3d::decode::Detection;
use point3d::eval::evaluate;
use point3d::linking::Tube;
use point3d::synth::{generate_dataset, SynthConfig};

fn main() -> point3d::Result<()> {
    let ds = generate_dataset(&SynthConfig {
        num_clips: 12,
        ..SynthConfig::default()
    })?;
    let gts = ds.annotations.ground_truths();
    let gt_tubes = ds.annotations.gt_tubes();
    let mut dets = Vec::new();
    let mut tubes = Vec::new();
    for (i, g) in gt_tubes.iter().enumerate() {
        // Every third tube gets the wrong class, every fourth a shifted box.
        let class_id = if i % 3 == 2 { (g.class_id + 1) % 4 } else { g.class_id };
        let shift = if i % 4 == 3 { 6.0 } else { 0.5 };
        let tube_dets: Vec<Detection> = g
            .boxes
            .iter()
            .map(|&(frame, b)| Detection {
                clip: g.clip.clone(),
                frame,
                bbox: b.translate(shift, 0.0),
                score: 0.9 - 0.01 * i as f64,
                class_id,
                knots: None,
                cell: None,
            })
            .collect();
        dets.extend(tube_dets.clone());
        let mut t = Tube::new(tube_dets)?;
        t.class_id = class_id;
        tubes.push(t);
    }
    let report = evaluate(&dets, &gts, &tubes, &gt_tubes, 0.5);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
