//! Render the training targets of one annotated frame, then decode those
//! perfect maps back into boxes and knots.
//!
//! cargo run --release --example targets_roundtrip

use point3d::decode::{decode_frame, DecodeConfig};
use point3d::outputs::{CpOutputs, KpOutputs};
use point3d::synth::knots_for;
use point3d::targets::{render_targets, ActorAnnotation, BBox};

fn main() -> point3d::Result<()> {
    let actors: Vec<ActorAnnotation> = [BBox::new(5.0, 9.0, 21.0, 27.0), BBox::new(38.5, 30.0, 52.0, 47.5)]
        .into_iter()
        .enumerate()
        .map(|(i, b)| ActorAnnotation {
            bbox: b,
            knots: knots_for(&b, 4),
            class_id: 0,
            actor_id: i as u32,
        })
        .collect();
    let t = render_targets(&actors, 4, 64, 64, 4)?;
    let cp = CpOutputs {
        heatmap: t.cp.heatmap,
        shape: t.cp.shape,
        offset: t.cp.offset,
    };
    let kp = KpOutputs {
        heatmap: t.kp.heatmap,
        distance: t.kp.distance,
        offset: t.kp.offset,
    };
    for d in decode_frame(&cp, Some(&kp), 0, 4, &DecodeConfig::default())? {
        println!("score {:.2} box {:?} knots {:?}", d.score, d.bbox.as_array(), d.knots.unwrap_or_default());
    }
    for a in &actors {
        println!("annotated box {:?}", a.bbox.as_array());
    }
    Ok(())
}
