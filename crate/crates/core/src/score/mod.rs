//! Score sources: `(x, σ) -> ∇_x log p_σ(x)` for the data density perturbed by `N(0, σ²I)`.

mod kernel;
mod learned;
mod mixture;

pub use kernel::{kernel_score, KernelScore};
pub use learned::{dsm_objective, LearnedScore, ScorePhase};
pub use mixture::{mixture_score, GaussianMixture};

use crate::diffcore::Tensor;
use crate::error::Result;
use crate::schedule::NoiseSchedule;

/// Anything that can evaluate a (perturbed) score on a batch of points.
pub trait ScoreSource: Send + Sync {
    /// Data dimension `d`.
    fn dim(&self) -> usize;

    /// Score at each row of `x` (`[B, d]`) for noise level `sigma`.
    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Evaluates a source at grid index `n`, i.e. at `σ(t_n)`.
pub fn score_at(src: &dyn ScoreSource, sched: &NoiseSchedule, x: &Tensor, n: usize) -> Result<Tensor> {
    src.score(x, sched.sigma_at(n)?)
}

/// The zero vector field. Makes every PF-ODE trajectory constant.
#[derive(Clone, Copy, Debug)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreSource for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &Tensor, _sigma: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

impl<T: ScoreSource + ?Sized> ScoreSource for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        (**self).score(x, sigma)
    }
}

impl<T: ScoreSource + ?Sized> ScoreSource for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        (**self).score(x, sigma)
    }
}
