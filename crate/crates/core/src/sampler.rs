//! Inference: one-step generation, recursive refinement and masked multistep editing.

use rand::Rng;

use crate::diffcore::{MlpNet, Tensor};
use crate::error::{Error, Result};

/// `f_θ(z)`.
pub fn sample_single(net: &MlpNet, z: &Tensor) -> Result<Tensor> {
    net.forward_values(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveResult {
    pub samples: Tensor,
    /// Applications of `f` per row, counting the one that detected convergence.
    pub row_iterations: Vec<usize>,
    /// `max(row_iterations)`; equals `max_iters` when some row did not converge.
    pub iterations: usize,
    /// Mean `‖x_{k+1} - x_k‖₂` over still-active rows after each application `k ≥ 2`.
    pub drift_trace: Vec<f64>,
}

/// Repeats `x ← f(x)` from `x = f(z)` until a row moves less than `tol` in
/// sup-norm, or `max_iters` applications have been made.
pub fn sample_recursive(net: &MlpNet, z: &Tensor, max_iters: usize, tol: f64) -> Result<RecursiveResult> {
    if max_iters == 0 {
        return Err(Error::Config("sampler.max_iters must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("sampler.tol must be > 0, got {tol}")));
    }
    let mut x = net.forward_values(z)?;
    let rows = x.rows();
    let mut iters = vec![1usize; rows];
    let mut active: Vec<usize> = (0..rows).collect();
    let mut drift_trace = Vec::new();
    for k in 2..=max_iters {
        if active.is_empty() {
            break;
        }
        let cur = x.gather_rows(&active);
        let next = net.forward_values(&cur)?;
        let mut still = Vec::with_capacity(active.len());
        let mut drift = 0.0;
        for (j, &i) in active.iter().enumerate() {
            let (a, b) = (cur.row(j), next.row(j));
            let sup = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            drift += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            x.row_mut(i).copy_from_slice(b);
            iters[i] = k;
            if !(sup < tol) {
                still.push(i);
            }
        }
        drift_trace.push(drift / active.len() as f64);
        active = still;
    }
    let iterations = iters.iter().copied().max().unwrap_or(1);
    Ok(RecursiveResult { samples: x, row_iterations: iters, iterations, drift_trace })
}

/// Injection levels `σ_1 > σ_2 > … > σ_N > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSchedule {
    sigmas: Vec<f64>,
}

impl EditSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("edit noise levels must be finite and > 0: {sigmas:?}")));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("edit noise levels must strictly decrease: {sigmas:?}")));
        }
        Ok(EditSchedule { sigmas })
    }

    /// `steps` levels spaced geometrically from `hi` down to `lo`.
    pub fn geometric(steps: usize, hi: f64, lo: f64) -> Result<Self> {
        if steps == 0 {
            return EditSchedule::new(Vec::new());
        }
        if steps == 1 {
            return EditSchedule::new(vec![hi]);
        }
        let r = (lo / hi).powf(1.0 / (steps - 1) as f64);
        let mut s: Vec<f64> = (0..steps).map(|i| hi * r.powi(i as i32)).collect();
        s[steps - 1] = lo;
        EditSchedule::new(s)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Regeneration weights: 1 regenerates a coordinate, 0 keeps the input.
/// Either one row `[d]` shared by the batch or a full `[B, d]` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    values: Tensor,
}

impl Mask {
    pub fn new(values: Tensor) -> Result<Self> {
        if let Some(v) = values.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("mask values must lie in [0, 1], found {v}")));
        }
        let values = if values.shape().len() == 1 {
            let d = values.len();
            Tensor::new(vec![1, d], values.into_values())?
        } else {
            values
        };
        Ok(Mask { values })
    }

    pub fn ones(d: usize) -> Self {
        Mask { values: Tensor::new(vec![1, d], vec![1.0; d]).expect("shape") }
    }

    pub fn zeros(d: usize) -> Self {
        Mask { values: Tensor::zeros(&[1, d]) }
    }

    /// Alternating `block × block` squares over an `h × w` image, top-left regenerated.
    pub fn checkerboard(h: usize, w: usize, block: usize) -> Self {
        let b = block.max(1);
        let v = (0..h * w).map(|i| if ((i / w) / b + (i % w) / b) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        Mask { values: Tensor::new(vec![1, h * w], v).expect("shape") }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn row(&self, i: usize) -> &[f64] {
        if self.values.rows() == 1 {
            self.values.row(0)
        } else {
            self.values.row(i)
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let ok = self.values.cols() == x.cols() && (self.values.rows() == 1 || self.values.rows() == x.rows());
        if ok {
            Ok(())
        } else {
            Err(Error::dim(x.shape(), self.values.shape()))
        }
    }

    /// `f ⊙ M + x ⊙ (1 - M)`; where `M` is exactly 0 or 1 the chosen side is copied bitwise.
    pub fn blend(&self, f: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let m = self.row(i);
            let fr = f.row(i);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = match m[k] {
                    1.0 => fr[k],
                    0.0 => *o,
                    w => fr[k] * w + *o * (1.0 - w),
                };
            }
        }
        Ok(out)
    }
}

/// Masked editing: `x ← f(x′)⊙M + x′⊙(1−M)`, then for each `σ_i`,
/// `x ← f(x + σ_i ε)⊙M + x⊙(1−M)`. An all-ones mask gives unconditional
/// multistep generation.
pub fn sample_multistep_edit<R: Rng + ?Sized>(
    net: &MlpNet,
    x_prime: &Tensor,
    mask: &Mask,
    edit: &EditSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    mask.check(x_prime)?;
    let mut x = mask.blend(&net.forward_values(x_prime)?, x_prime)?;
    for &sigma in edit.sigmas() {
        let eps = Tensor::randn(x.shape(), 1.0, rng);
        let tau = x.zip_with(&eps, |a, e| a + sigma * e)?;
        x = mask.blend(&net.forward_values(&tau)?, &x)?;
    }
    Ok(x)
}
