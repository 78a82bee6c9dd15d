use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central-difference gradient verification: (f(θ+h) − f(θ−h)) / 2h per
/// sampled coordinate against the tape's analytic grad. Meant to run in
/// f64; f32 has too little headroom at h=1e-5.
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Coordinates checked per parameter; larger parameters are subsampled
    /// deterministically from `seed`.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckEntry {
    pub path: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a floor so that near-zero grad pairs do not blow up
/// the ratio. At f64/h=1e-5 the FD truncation error sits far below the floor.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

impl GradCheck {
    /// `f` rebuilds the loss from scratch on the given tape each call; it
    /// must be deterministic (no unseeded randomness, dropout off).
    pub fn run<T, F>(&self, mut f: F, params: &[(String, Tensor<T>)]) -> Result<GradCheckReport>
    where
        T: Scalar,
        F: FnMut(&mut Tape<T>) -> Result<Tensor<T>>,
    {
        for (_, p) in params {
            p.zero_grad();
        }
        let mut tape = Tape::new();
        let loss = f(&mut tape)?;
        if !loss.item().as_f64().is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        tape.backward(&loss)?;

        let h = T::from_f64(self.step);
        let two_h = 2.0 * self.step;
        let mut entries = Vec::with_capacity(params.len());
        let mut worst = 0.0f64;
        for (path, p) in params {
            let analytic = p.grad_or_zeros();
            let coords = self.pick_coords(path, p.numel());
            let mut max_rel = 0.0f64;
            for &c in &coords {
                p.nudge(c, h);
                let up = eval_loss(&mut f)?;
                p.nudge(c, -(h + h));
                let down = eval_loss(&mut f)?;
                p.nudge(c, h);
                let numeric = (up - down) / two_h;
                let e = rel_err(analytic[c].as_f64(), numeric);
                if e > max_rel {
                    max_rel = e;
                }
            }
            if max_rel > worst {
                worst = max_rel;
            }
            entries.push(GradCheckEntry {
                path: path.clone(),
                checked: coords.len(),
                max_rel_err: max_rel,
            });
        }
        Ok(GradCheckReport {
            entries,
            max_rel_err: worst,
            tol: self.tol,
        })
    }

    fn pick_coords(&self, path: &str, numel: usize) -> Vec<usize> {
        if numel <= self.max_coords {
            return (0..numel).collect();
        }
        // Per-path stream so adding parameters does not shift others' picks.
        let mut s = self.seed;
        for b in path.bytes() {
            s = s.wrapping_mul(0x100000001b3).wrapping_add(b as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut picks = std::collections::BTreeSet::new();
        while picks.len() < self.max_coords {
            picks.insert(rng.gen_range(0..numel));
        }
        picks.into_iter().collect()
    }
}

fn eval_loss<T, F>(f: &mut F) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>) -> Result<Tensor<T>>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    let v = loss.item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(v)
}
