//! Time-wise attention over stacked per-frame features.
//!
//! Frames are flattened to rows of `F̃ ∈ R^{T×D}`; the row-softmaxed Gram
//! matrix `M = softmax(F̃ F̃ᵀ)` mixes frames and the result is added back to
//! the input: `Y = F + reshape(M F̃)`.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Var};

/// Output of [`twa`]: attended features and the `T×T` attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct TwaOutput {
    pub y: Var,
    pub attention: Var,
}

/// Time-wise attention on the tape. With `use_raw_gram` the unnormalised
/// Gram matrix mixes the frames instead of its softmax; `attention` is the
/// softmaxed matrix either way.
pub fn twa(tape: &Tape, features: Var, use_raw_gram: bool) -> Result<TwaOutput> {
    let shape = tape.shape(features);
    if shape.len() < 2 {
        return Err(Error::dim("twa", format!("expected T×…, got {shape:?}")));
    }
    let t = shape[0];
    let d: usize = shape[1..].iter().product();
    let flat = tape.reshape(features, &[t, d])?;
    let flat_t = tape.transpose(flat)?;
    let gram = tape.matmul(flat, flat_t)?;
    let attention = tape.softmax_rows(gram)?;
    let mix = if use_raw_gram { gram } else { attention };
    let mixed = tape.matmul(mix, flat)?;
    let mixed = tape.reshape(mixed, &shape)?;
    let y = tape.add(features, mixed)?;
    Ok(TwaOutput { y, attention })
}

/// Tape-free forward pass returning `(Y, M)`.
pub fn twa_forward(features: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = features.shape();
    if shape.len() < 2 {
        return Err(Error::dim("twa_forward", format!("expected T×…, got {shape:?}")));
    }
    let t = shape[0];
    let d = features.len() / t;
    let flat = features.reshape(&[t, d])?;
    let gram = kernels::matmul(&flat, &kernels::transpose(&flat)?)?;
    let m = kernels::softmax_rows(&gram)?;
    let s = kernels::matmul(&m, &flat)?.reshape(shape)?;
    let y = features.zip_map(&s, "twa_forward", |a, b| a + b)?;
    Ok((y, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_doubles() {
        let f = Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let (y, m) = twa_forward(&f).unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert_eq!(y, f.map(|v| 2.0 * v));
    }

    #[test]
    fn two_frame_hand_case() {
        let f = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let (y, m) = twa_forward(&f).unwrap();
        let expect_m = [0.26894, 0.73106, 0.11920, 0.88080];
        for (a, b) in m.data().iter().zip(expect_m) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((y.data()[0] - 2.73106).abs() < 1e-5);
        assert!((y.data()[1] - 3.88080).abs() < 1e-5);
    }

    #[test]
    fn identical_frames_attend_uniformly() {
        let frame = Tensor::from_fn(&[3, 2, 2], |i| 0.1 * i as f64).unwrap();
        let f = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone(), frame]).unwrap();
        let (y, m) = twa_forward(&f).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(y.max_abs_diff(&f.map(|v| 2.0 * v)) < 1e-12);
    }

    #[test]
    fn tape_matches_forward() {
        let f = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 7 % 5) as f64 - 2.0) * 0.1).unwrap();
        let tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let out = twa(&tape, fv, false).unwrap();
        let (y, m) = twa_forward(&f).unwrap();
        assert_eq!(*tape.value(out.y), y);
        assert_eq!(*tape.value(out.attention), m);
    }

    #[test]
    fn raw_gram_variant_mixes_with_gram() {
        let f = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let fv = tape.leaf(f);
        let out = twa(&tape, fv, true).unwrap();
        // G = [[1,2],[2,4]], G F̃ = [5, 10]
        assert_eq!(tape.value(out.y).data(), &[6.0, 12.0]);
    }
}
