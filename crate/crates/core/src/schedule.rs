//! Noise level as a function of time, its discretization grid, and the noising operator.

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `σ(t) = t`.
    Identity,
    /// Affine map from `[ε, T]` onto `[σ_min, σ_max]`.
    Linear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(ScheduleKind::Identity),
            "linear" => Some(ScheduleKind::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Identity => "identity",
            ScheduleKind::Linear => "linear",
        }
    }
}

/// Builder-style parameters; see [`NoiseSchedule::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub eps: f64,
    pub t_max: f64,
    pub intervals: usize,
    pub rho: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            kind: ScheduleKind::Identity,
            sigma_min: 0.002,
            sigma_max: 1.0,
            eps: 0.002,
            t_max: 1.0,
            intervals: 18,
            rho: 7.0,
        }
    }
}

/// A strictly increasing noise schedule on `[ε, T]` with a warped `N`-interval grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    grid: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(mut params: ScheduleParams) -> Result<Self> {
        let p = &mut params;
        if !(p.eps > 0.0 && p.t_max > p.eps && p.t_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < eps < T, got eps={} T={}", p.eps, p.t_max)));
        }
        if p.intervals < 1 {
            return Err(Error::Config("schedule.N must be at least 1".into()));
        }
        if !(p.rho > 0.0 && p.rho.is_finite()) {
            return Err(Error::Config(format!("schedule.rho must be positive, got {}", p.rho)));
        }
        match p.kind {
            ScheduleKind::Identity => {
                p.sigma_min = p.eps;
                p.sigma_max = p.t_max;
            }
            ScheduleKind::Linear => {
                if !(p.sigma_min > 0.0 && p.sigma_max > p.sigma_min && p.sigma_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "linear schedule needs 0 < sigma_min < sigma_max, got {} and {}",
                        p.sigma_min, p.sigma_max
                    )));
                }
            }
        }
        let grid = warped_grid(p.eps, p.t_max, p.intervals, p.rho);
        Ok(NoiseSchedule { params, grid })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    /// Number of grid intervals `N`.
    pub fn intervals(&self) -> usize {
        self.params.intervals
    }

    pub fn eps(&self) -> f64 {
        self.params.eps
    }

    pub fn t_max(&self) -> f64 {
        self.params.t_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.params.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.params.sigma_max
    }

    /// Same schedule with a different number of intervals.
    pub fn with_intervals(&self, n: usize) -> Result<Self> {
        NoiseSchedule::new(ScheduleParams { intervals: n, ..self.params })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = (self.params.eps, self.params.t_max);
        let slack = 1e-12 * hi;
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::Range { value: t, lo, hi });
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let p = &self.params;
        Ok(match p.kind {
            ScheduleKind::Identity => t,
            ScheduleKind::Linear => p.sigma_min + (p.sigma_max - p.sigma_min) * (t - p.eps) / (p.t_max - p.eps),
        })
    }

    pub fn sigma_dot(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let p = &self.params;
        Ok(match p.kind {
            ScheduleKind::Identity => 1.0,
            ScheduleKind::Linear => (p.sigma_max - p.sigma_min) / (p.t_max - p.eps),
        })
    }

    /// Grid times `t_0 = ε < ... < t_N = T`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn time_at(&self, n: usize) -> Result<f64> {
        self.grid.get(n).copied().ok_or_else(|| Error::Range {
            value: n as f64,
            lo: 0.0,
            hi: self.params.intervals as f64,
        })
    }

    /// `σ(t_n)`.
    pub fn sigma_at(&self, n: usize) -> Result<f64> {
        self.sigma(self.time_at(n)?)
    }

    /// `O(x, t_n) = x + σ(t_n)·ε`, `ε ~ N(0, I)`. The result is a plain constant.
    pub fn noise<R: Rng + ?Sized>(&self, x: &Tensor, n: usize, rng: &mut R) -> Result<Tensor> {
        let sigma = self.sigma_at(n)?;
        let eps = Tensor::randn(x.shape(), 1.0, rng);
        Ok(add_scaled(x, sigma, &eps))
    }

    /// Noising where row `i` uses grid index `levels[i]`.
    pub fn noise_levels<R: Rng + ?Sized>(&self, x: &Tensor, levels: &[usize], rng: &mut R) -> Result<Tensor> {
        let eps = Tensor::randn(x.shape(), 1.0, rng);
        self.noise_levels_with(x, levels, &eps)
    }

    pub fn noise_levels_with(&self, x: &Tensor, levels: &[usize], eps: &Tensor) -> Result<Tensor> {
        if levels.len() != x.rows() {
            return Err(Error::dim(&[x.rows()], &[levels.len()]));
        }
        if x.shape() != eps.shape() {
            return Err(Error::dim(x.shape(), eps.shape()));
        }
        let mut out = x.clone();
        for (i, &n) in levels.iter().enumerate() {
            let sigma = self.sigma_at(n)?;
            for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
                *o += sigma * e;
            }
        }
        Ok(out)
    }

    /// Noising with a caller-supplied standard normal draw.
    pub fn noise_with(&self, x: &Tensor, n: usize, eps: &Tensor) -> Result<Tensor> {
        if x.shape() != eps.shape() {
            return Err(Error::dim(x.shape(), eps.shape()));
        }
        Ok(add_scaled(x, self.sigma_at(n)?, eps))
    }
}

fn add_scaled(x: &Tensor, c: f64, e: &Tensor) -> Tensor {
    let v = x.values().iter().zip(e.values()).map(|(a, b)| a + c * b).collect();
    Tensor::new(x.shape().to_vec(), v).expect("same shape")
}

/// `t_i = (ε^{1/ρ} + (i/N)(T^{1/ρ} - ε^{1/ρ}))^ρ` with exact endpoints.
pub fn warped_grid(eps: f64, t_max: f64, n: usize, rho: f64) -> Vec<f64> {
    let (a, b) = (eps.powf(1.0 / rho), t_max.powf(1.0 / rho));
    let mut g: Vec<f64> = (0..=n).map(|i| (a + (i as f64 / n as f64) * (b - a)).powf(rho)).collect();
    g[0] = eps;
    g[n] = t_max;
    g
}
