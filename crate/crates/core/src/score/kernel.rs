use super::ScoreSource;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Score of the empirical data distribution smoothed by `N(0, σ²I)`:
/// `Σ_i w_i (x_i - x) / σ²` with `w = softmax(-‖x - x_i‖² / 2σ²)`.
pub fn kernel_score(dataset: &Tensor, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Range { value: sigma, lo: 0.0, hi: f64::INFINITY });
    }
    let d = dataset.cols();
    if dataset.rows() == 0 || dataset.is_empty() {
        return Err(Error::Config("kernel score needs at least one data point".into()));
    }
    if x.len() != d {
        return Err(Error::dim(&[d], &[x.len()]));
    }
    let mut out = vec![0.0; d];
    kernel_score_into(dataset, x, sigma, &mut Vec::new(), &mut out);
    Ok(out)
}

fn kernel_score_into(dataset: &Tensor, x: &[f64], sigma: f64, logits: &mut Vec<f64>, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    logits.clear();
    logits.extend((0..dataset.rows()).map(|i| {
        let r2: f64 = dataset.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        -r2 * inv
    }));
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (i, l) in logits.iter().enumerate() {
        let w = (l - mx).exp();
        if w == 0.0 {
            continue;
        }
        z += w;
        for (o, xi) in out.iter_mut().zip(dataset.row(i)) {
            *o += w * xi;
        }
    }
    // Σ w_i (x_i - x) / σ² = (weighted mean - x) / σ²
    let s2 = sigma * sigma;
    for (o, xv) in out.iter_mut().zip(x) {
        *o = (*o / z - xv) / s2;
    }
}

/// Empirical-kernel score over a fixed dataset, with a lower bound on σ.
#[derive(Clone, Debug)]
pub struct KernelScore {
    data: Tensor,
    sigma_floor: f64,
}

impl KernelScore {
    pub fn new(data: Tensor, sigma_floor: f64) -> Result<Self> {
        if data.rows() == 0 || data.shape().len() != 2 {
            return Err(Error::Config("kernel score needs a non-empty [M, d] dataset".into()));
        }
        if !(sigma_floor >= 0.0) {
            return Err(Error::Config("kernel.sigma_floor must be non-negative".into()));
        }
        Ok(KernelScore { data, sigma_floor })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

impl ScoreSource for KernelScore {
    fn dim(&self) -> usize {
        self.data.cols()
    }

    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::dim(&[x.rows(), d], x.shape()));
        }
        let sigma = sigma.max(self.sigma_floor);
        if !(sigma > 0.0) {
            return Err(Error::Range { value: sigma, lo: 0.0, hi: f64::INFINITY });
        }
        let mut out = Tensor::zeros(x.shape());
        let mut scratch = Vec::with_capacity(self.data.rows());
        for i in 0..x.rows() {
            kernel_score_into(&self.data, x.row(i), sigma, &mut scratch, out.row_mut(i));
        }
        Ok(out)
    }
}
