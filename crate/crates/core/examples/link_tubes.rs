//! Link noisy per-frame detections of two moving actors into tubes.
//!
//! cargo run --release --example link_tubes

use point3d::decode::Detection;
use point3d::linking::viterbi_link;
use point3d::targets::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> point3d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames: Vec<Vec<Detection>> = (0..8)
        .map(|t| {
            let tracks = [BBox::new(2.0, 10.0, 14.0, 24.0).translate(3.0 * t as f64, 0.0), BBox::new(40.0, 2.0, 52.0, 14.0).translate(0.0, 4.0 * t as f64)];
            let mut dets: Vec<Detection> = tracks
                .iter()
                .map(|b| Detection {
                    clip: "demo".into(),
                    frame: t,
                    bbox: b.translate(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    score: rng.random_range(0.5..0.95),
                    class_id: 0,
                    knots: None,
                    cell: None,
                })
                .collect();
            // A low-scoring clutter box per frame.
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            dets.push(Detection {
                bbox: BBox::new(x, y, x + 8.0, y + 8.0),
                score: rng.random_range(0.05..0.3),
                ..dets[0].clone()
            });
            dets
        })
        .collect();
    for (i, tube) in viterbi_link(&frames, 3, 1.0)?.iter().enumerate() {
        let centres: Vec<String> = tube
            .detections
            .iter()
            .map(|d| format!("({:.0},{:.0})", d.bbox.center().0, d.bbox.center().1))
            .collect();
        println!("tube {i}: frames {}..={} score {:.3} centres {}", tube.start(), tube.end(), tube.score, centres.join(" "));
    }
    Ok(())
}
