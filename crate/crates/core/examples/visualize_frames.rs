//! Draw ground-truth boxes and knots of one synthetic clip as SVG and PPM
//! frames.
//!
//! cargo run --release --example visualize_frames -- [out_dir]

use point3d::synth::{generate_dataset, SynthConfig};
use point3d::visualize::{frame_overlays, render, ImageFormat};

fn main() -> point3d::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "frames".into());
    std::fs::create_dir_all(&out)?;
    let ds = generate_dataset(&SynthConfig {
        num_clips: 1,
        ..SynthConfig::default()
    })?;
    let (clip, ann) = (&ds.clips[0], &ds.annotations.clips[0]);
    for t in 0..clip.shape()[0] {
        let overlays = frame_overlays(&[], ann.active_actors(t), true);
        for format in [ImageFormat::Svg, ImageFormat::Ppm] {
            let path = format!("{out}/{}_f{t:03}.{}", ann.id, format.extension());
            std::fs::write(path, render(&clip.index0(t)?, &overlays, 4, format)?)?;
        }
    }
    println!("wrote {} frames of {} to {out}", clip.shape()[0], ann.id);
    Ok(())
}
