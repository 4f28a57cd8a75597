use rand::Rng;

use super::ScoreSource;
use crate::diffcore::{adam_step, Activation, AdamState, Graph, Init, MlpNet, Tensor};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Whether a learned source may be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorePhase {
    ReadOnly,
    /// Mid-update, or left behind by a failed update.
    Updating,
}

/// Score network trained by denoising score matching.
///
/// The net `F` is wrapped in a preconditioned denoiser
/// `D(y, σ) = c_skip·y + c_out·F(c_in·y, ln σ / 4)` with
/// `c_skip = s²/(σ²+s²)`, `c_out = σs/√(σ²+s²)`, `c_in = 1/√(σ²+s²)` for a data
/// scale `s`, and the score is `(D - y)/σ²`. For `N(0, s²I)` data the exact
/// score corresponds to `F ≡ 0`. Training regresses `F` on its noisy target,
/// which is the DSM objective reweighted per noise level.
#[derive(Clone, Debug)]
pub struct LearnedScore {
    net: MlpNet,
    adam: AdamState,
    lr: f64,
    data_scale: f64,
    phase: ScorePhase,
}

struct Precond {
    skip: f64,
    out: f64,
    inp: f64,
}

impl Precond {
    fn new(sigma: f64, s: f64) -> Self {
        let r = (sigma * sigma + s * s).sqrt();
        Precond { skip: s * s / (r * r), out: sigma * s / r, inp: 1.0 / r }
    }
}

impl LearnedScore {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: &[usize], lr: f64, rng: &mut R) -> Result<Self> {
        let mut widths = vec![d + 1];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let net = MlpNet::new(&widths, Activation::Silu, false, Init::Uniform, rng)?;
        Ok(Self::from_net(net, lr))
    }

    pub fn from_net(net: MlpNet, lr: f64) -> Self {
        let adam = AdamState::new(net.params(), 0.9, 0.999, 1e-8);
        LearnedScore { net, adam, lr, data_scale: 1.0, phase: ScorePhase::ReadOnly }
    }

    /// Data scale used by the preconditioner (default 1, matching standardized data).
    pub fn with_data_scale(mut self, s: f64) -> Self {
        self.data_scale = s;
        self
    }

    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut AdamState {
        &mut self.adam
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn phase(&self) -> ScorePhase {
        self.phase
    }

    fn conditioned_input(&self, y: &Tensor, sigmas: &[f64]) -> Tensor {
        let (b, d) = (y.rows(), y.cols());
        let mut v = Vec::with_capacity(b * (d + 1));
        for i in 0..b {
            let c = Precond::new(sigmas[i], self.data_scale);
            v.extend(y.row(i).iter().map(|a| a * c.inp));
            v.push(sigmas[i].ln() / 4.0);
        }
        Tensor::new(vec![b, d + 1], v).expect("shape")
    }

    /// Runs `steps` DSM updates on batches drawn from `sample`, with per-row
    /// noise levels drawn uniformly from the schedule grid. Returns the last loss.
    pub fn train<R, F>(&mut self, sched: &NoiseSchedule, steps: usize, mut sample: F, rng: &mut R) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: FnMut(&mut R) -> Result<Tensor>,
    {
        self.phase = ScorePhase::Updating;
        let mut last = f64::NAN;
        for step in 0..steps {
            let x = sample(rng)?;
            let (b, d) = (x.rows(), x.cols());
            let sigmas: Vec<f64> = (0..b)
                .map(|_| sched.sigma_at(rng.random_range(0..=sched.intervals())))
                .collect::<Result<_>>()?;
            let eps = Tensor::randn(x.shape(), 1.0, rng);
            let mut noised = x.clone();
            let mut target = Tensor::zeros(x.shape());
            for i in 0..b {
                let c = Precond::new(sigmas[i], self.data_scale);
                for j in 0..d {
                    let y = x.row(i)[j] + sigmas[i] * eps.row(i)[j];
                    noised.row_mut(i)[j] = y;
                    target.row_mut(i)[j] = (x.row(i)[j] - c.skip * y) / c.out;
                }
            }
            let input = self.conditioned_input(&noised, &sigmas);
            let mut g = Graph::new();
            let bound = self.net.bind(&mut g, true);
            let xin = g.constant(&input);
            let out = self.net.forward(&mut g, &bound, xin)?;
            let t = g.constant(&target);
            let r = g.sub(out, t)?;
            let ss = g.sum_squares(r);
            let loss = g.scale(ss, 1.0 / b as f64);
            last = g.scalar(loss);
            if !last.is_finite() {
                return Err(Error::Divergence { step, detail: "non-finite denoising score-matching loss".into() });
            }
            g.backward(loss)?;
            self.net.zero_grad();
            self.net.accumulate_grads(&g, &bound)?;
            adam_step(self.net.params_mut(), &mut self.adam, self.lr)
                .map_err(|_| Error::Divergence { step, detail: "non-finite score-network gradient".into() })?;
        }
        self.phase = ScorePhase::ReadOnly;
        Ok(last)
    }
}

impl ScoreSource for LearnedScore {
    fn dim(&self) -> usize {
        self.net.out_width()
    }

    fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        if self.phase != ScorePhase::ReadOnly {
            return Err(Error::Contract("learned score evaluated while not in read-only phase".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::Range { value: sigma, lo: 0.0, hi: f64::INFINITY });
        }
        if x.cols() != self.dim() {
            return Err(Error::dim(&[x.rows(), self.dim()], x.shape()));
        }
        let input = self.conditioned_input(x, &vec![sigma; x.rows()]);
        let f = self.net.forward_values(&input)?;
        let c = Precond::new(sigma, self.data_scale);
        let s2 = sigma * sigma;
        x.zip_with(&f, |y, fv| (c.skip * y + c.out * fv - y) / s2)
    }
}

/// `mean_rows ‖σ·s(x + σε, σ) + ε‖²` for any score source, with the noise supplied.
pub fn dsm_objective(src: &dyn ScoreSource, x: &Tensor, sigma: f64, eps: &Tensor) -> Result<f64> {
    if x.shape() != eps.shape() {
        return Err(Error::dim(x.shape(), eps.shape()));
    }
    let noised = x.zip_with(eps, |a, e| a + sigma * e)?;
    let s = src.score(&noised, sigma)?;
    let total: f64 = s.values().iter().zip(eps.values()).map(|(si, e)| (sigma * si + e).powi(2)).sum();
    Ok(total / x.rows() as f64)
}
