use rand::Rng;
use rand_distr::StandardNormal;

use super::ScoreSource;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Mixture of isotropic Gaussians `Σ_k π_k N(μ_k, s_k² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/stds, got {}/{}/{}",
                k,
                means.len(),
                stds.len()
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("mixture means must share a non-zero dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        if stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        Ok(GaussianMixture { weights, means, stds })
    }

    /// Single isotropic Gaussian.
    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Overall mean `Σ π_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.iter_mut().zip(mu).for_each(|(a, b)| *a += w * b);
        }
        m
    }

    /// Per-dimension variance of the mixture.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = vec![0.0; self.dim()];
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            for ((acc, m), c) in v.iter_mut().zip(mu).zip(&mean) {
                *acc += w * (s * s + (m - c) * (m - c));
            }
        }
        v
    }

    /// Image under `x -> (x - shift) / scale` (same scale on every axis).
    pub fn affine(&self, shift: &[f64], scale: f64) -> Result<Self> {
        let means = self
            .means
            .iter()
            .map(|m| m.iter().zip(shift).map(|(a, b)| (a - b) / scale).collect())
            .collect();
        let stds = self.stds.iter().map(|s| s / scale).collect();
        GaussianMixture::new(self.weights.clone(), means, stds)
    }

    /// `log Σ π_k N(x; μ_k, (s_k² + σ²) I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        let d = self.dim() as f64;
        let mut terms = Vec::with_capacity(self.weights.len());
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            let var = s * s + sigma * sigma;
            if var <= 0.0 {
                return Err(Error::DegenerateDensity("zero total variance".into()));
            }
            if *w == 0.0 {
                continue;
            }
            let r2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            terms.push(w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r2 / var);
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut values = Vec::with_capacity(m * d);
        for _ in 0..m {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                values.push(self.means[k][j] + self.stds[k] * e);
            }
        }
        Tensor::new(vec![m, d], values).expect("shape")
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|a| (a - mx).exp()).sum::<f64>().ln()
}

/// Exact score of the mixture convolved with `N(0, σ²I)`:
/// `Σ_k w_k(x) (μ_k - x) / (s_k² + σ²)` with log-space responsibilities `w_k`.
pub fn mixture_score(gm: &GaussianMixture, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Range { value: sigma, lo: 0.0, hi: f64::INFINITY });
    }
    let d = gm.dim();
    if x.len() != d {
        return Err(Error::dim(&[d], &[x.len()]));
    }
    let k = gm.weights.len();
    let mut logits = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    for ((w, mu), s) in gm.weights.iter().zip(&gm.means).zip(&gm.stds) {
        let var = s * s + sigma * sigma;
        if var <= 0.0 {
            return Err(Error::DegenerateDensity("zero total variance".into()));
        }
        let r2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        let l = if *w > 0.0 { w.ln() - 0.5 * d as f64 * var.ln() - 0.5 * r2 / var } else { f64::NEG_INFINITY };
        logits.push(l);
        vars.push(var);
    }
    let lse = log_sum_exp(&logits);
    let mut out = vec![0.0; d];
    for ((l, mu), var) in logits.iter().zip(&gm.means).zip(&vars) {
        let r = (l - lse).exp();
        if r == 0.0 {
            continue;
        }
        for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
            *o += r * (m - xi) / var;
        }
    }
    Ok(out)
}

impl ScoreSource for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::dim(&[x.rows(), d], x.shape()));
        }
        let mut values = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            values.extend(mixture_score(self, x.row(i), sigma)?);
        }
        Tensor::new(x.shape().to_vec(), values)
    }
}
