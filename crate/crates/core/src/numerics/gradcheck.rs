//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates, chosen at random.
    pub max_coords: Option<usize>,
    /// How many times a kink-straddling coordinate may be nudged before giving up.
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: None,
            max_resamples: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub resamples: usize,
}

/// Compare the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        eps,
        ..Default::default()
    };
    grad_check_with(f, x, &cfg).map(|r| r.max_rel_error)
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

fn analytic<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    Ok(grads.get_or_zeros(xv))
}

pub fn grad_check_with<F>(f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = x.clone();
    let coords: Vec<usize> = match cfg.max_coords {
        Some(k) if k < x.len() => {
            let mut c = sample(&mut rng, x.len(), k).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..x.len()).collect(),
    };
    let eps = cfg.eps;
    let mut resamples = 0;

    'restart: loop {
        let g_ad = analytic(&f, &x)?;
        let f0 = evaluate(&f, &x)?;
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let fp = evaluate(&f, &x)?;
            x.data_mut()[i] = orig - eps;
            let fm = evaluate(&f, &x)?;
            x.data_mut()[i] = orig;

            let fd = (fp - fm) / (2.0 * eps);
            let ad = g_ad.data()[i];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1.0);
            if err > 1e-6 || ad.abs() < 1e-8 {
                // One-sided slopes disagree: the stencil straddles a kink.
                let right = (fp - f0) / eps;
                let left = (f0 - fm) / eps;
                let jump = (right - left).abs() / (right.abs() + left.abs()).max(1.0);
                if jump > 1e-3 && resamples < cfg.max_resamples {
                    resamples += 1;
                    let nudge = rng.random_range(2.0..5.0) * eps;
                    x.data_mut()[i] = orig + if rng.random::<bool>() { nudge } else { -nudge };
                    continue 'restart;
                }
            }
            worst = worst.max(err);
        }
        return Ok(GradCheckReport {
            max_rel_error: worst,
            coords_checked: coords.len(),
            resamples,
        });
    }
}
