//! SIGN and baseline IGN training loops.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{rng_from_blob, rng_to_blob, Checkpoint, ScoreNetState};
use super::config::{FreezeMode, Mode, RunConfig};
use super::pairs::PairStore;
use crate::diffcore::{adam_step, clip_grad_norm, grad_norm, AdamState, Graph, MlpNet, Tensor};
use crate::error::{Error, Result};
use crate::losses::{auto_balance, ign_total, sign_total, LossReport, LossWeights, Models, SignBatch, Sources};
use crate::schedule::NoiseSchedule;
use crate::score::{LearnedScore, ScoreSource};

pub const METRICS_HEADER: &str =
    "step,l_recon,l_idem,l_tight,l_flow,l_dmd_surrogate,l_denoise,l_reg,total,grad_norm,wall_ms";

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub report: LossReport,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.3}",
            self.step,
            r.recon,
            r.idem,
            r.tight,
            r.flow,
            r.dmd_surrogate,
            r.denoise,
            r.reg,
            r.total,
            r.grad_norm,
            self.wall_ms
        )
    }
}

/// Running counts used for the stability comparison between SIGN and IGN.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StabilityStats {
    pub steps: usize,
    pub non_finite: usize,
    /// Steps with `|total|` above ten times the median of all earlier `|total|`.
    pub overshoots: usize,
    /// Steps where a bounded SIGN term was negative or non-finite.
    pub negative_terms: usize,
    pub max_abs_total: f64,
    history: Vec<f64>,
}

impl StabilityStats {
    pub fn observe(&mut self, report: &LossReport, check_sign_terms: bool) {
        self.steps += 1;
        let t = report.total;
        if check_sign_terms && report.check_sign_terms().is_err() {
            self.negative_terms += 1;
        }
        if !t.is_finite() {
            self.non_finite += 1;
            return;
        }
        let a = t.abs();
        if !self.history.is_empty() {
            let n = self.history.len();
            let median = if n % 2 == 1 {
                self.history[n / 2]
            } else {
                0.5 * (self.history[n / 2 - 1] + self.history[n / 2])
            };
            if a > 10.0 * median {
                self.overshoots += 1;
            }
        }
        self.max_abs_total = self.max_abs_total.max(a);
        let pos = self.history.partition_point(|v| *v < a);
        self.history.insert(pos, a);
    }
}

/// A step at which training could not continue.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub detail: String,
    pub last_report: Option<LossReport>,
}

/// Final state of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MlpNet,
    pub steps_done: usize,
    pub last_report: Option<LossReport>,
    pub stats: StabilityStats,
    pub divergence: Option<Divergence>,
    pub weights: LossWeights,
}

/// Receives per-step rows and periodic checkpoints.
pub trait TrainObserver {
    fn row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Observer that keeps every row in memory.
#[derive(Default)]
pub struct CollectRows {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainObserver for CollectRows {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(*row);
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }
}

impl TrainObserver for () {}

const EXTRA_CLIP: &str = "clip_reference";
const WEIGHT_KEYS: [&str; 4] = ["lambda_f", "lambda_d", "lambda_r", "lambda_n"];

/// Mutable training state. Everything needed to resume lives here.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a Tensor,
    teacher: &'a dyn ScoreSource,
    pairs: Option<&'a PairStore>,
    sched: NoiseSchedule,
    net: MlpNet,
    frozen: MlpNet,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    clip_reference: Option<f64>,
    weights: LossWeights,
    balanced: bool,
    learned: Option<LearnedScore>,
    last_report: Option<LossReport>,
}

impl<'a> Trainer<'a> {
    /// Fresh run: the generator (and learned score, when DMD is active) are
    /// initialized from `cfg.seed`, which also seeds every later draw.
    pub fn new(
        cfg: &'a RunConfig,
        data: &'a Tensor,
        teacher: &'a dyn ScoreSource,
        pairs: Option<&'a PairStore>,
    ) -> Result<Self> {
        let d = data.cols();
        if data.rows() == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        if teacher.dim() != d && cfg.mode == Mode::Sign {
            return Err(Error::dim(&[d], &[teacher.dim()]));
        }
        let sched = NoiseSchedule::new(cfg.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = MlpNet::generator(d, &cfg.net_hidden, cfg.activation, cfg.identity_init, &mut rng)?;
        let learned = if cfg.mode == Mode::Sign && cfg.weights.lambda_d > 0.0 {
            let scale = data_scale(data);
            Some(LearnedScore::new(d, &cfg.dmd.score_hidden, cfg.dmd.score_lr, &mut rng)?.with_data_scale(scale))
        } else {
            None
        };
        let t = &cfg.train;
        let adam = AdamState::new(net.params(), t.beta1, t.beta2, t.adam_eps);
        Ok(Trainer {
            cfg,
            data,
            teacher,
            pairs,
            sched,
            frozen: net.clone(),
            net,
            adam,
            rng,
            step: 0,
            clip_reference: None,
            weights: cfg.weights,
            balanced: !cfg.auto_balance,
            learned,
            last_report: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        cfg: &'a RunConfig,
        data: &'a Tensor,
        teacher: &'a dyn ScoreSource,
        pairs: Option<&'a PairStore>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut tr = Trainer::new(cfg, data, teacher, pairs)?;
        ckpt.expect_architecture(&tr.net.descriptor())?;
        if ckpt.config_hash != cfg.training_hash() {
            return Err(Error::Config("checkpoint was written under a different training configuration".into()));
        }
        tr.net = ckpt.net.clone();
        tr.adam = ckpt.optimizer.clone().ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        tr.frozen = tr.net.clone();
        if let Some(f) = &ckpt.frozen {
            tr.frozen.set_flat_params(f)?;
        }
        tr.rng = rng_from_blob(&ckpt.rng_state)?;
        tr.step = ckpt.step as usize;
        tr.clip_reference = ckpt.extra(EXTRA_CLIP);
        if tr.step > 0 {
            tr.balanced = true;
        }
        let mut w = tr.weights;
        for (k, slot) in WEIGHT_KEYS.iter().zip([&mut w.lambda_f, &mut w.lambda_d, &mut w.lambda_r, &mut w.lambda_n]) {
            if let Some(v) = ckpt.extra(k) {
                *slot = v;
            }
        }
        tr.weights = w;
        if let (Some(l), Some(s)) = (tr.learned.as_mut(), &ckpt.score) {
            let mut restored = LearnedScore::from_net(s.net.clone(), cfg.dmd.score_lr).with_data_scale(s.data_scale);
            *restored.adam_mut() = s.adam.clone();
            *l = restored;
        }
        Ok(tr)
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extras = Vec::new();
        if let Some(c) = self.clip_reference {
            extras.push((EXTRA_CLIP.to_string(), c));
        }
        let w = self.weights;
        for (k, v) in WEIGHT_KEYS.iter().zip([w.lambda_f, w.lambda_d, w.lambda_r, w.lambda_n]) {
            extras.push((k.to_string(), v));
        }
        Checkpoint {
            step: self.step as u64,
            seed: self.cfg.seed,
            rng_state: rng_to_blob(&self.rng),
            net: self.net.clone(),
            config_hash: self.cfg.training_hash(),
            extras,
            optimizer: Some(self.adam.clone()),
            frozen: Some(self.frozen.flat_params()),
            score: self.learned.as_ref().map(|l| ScoreNetState {
                net: l.net().clone(),
                adam: l.adam().clone(),
                data_scale: l.data_scale(),
            }),
        }
    }

    fn minibatch(&mut self) -> Tensor {
        let b = self.cfg.train.batch;
        let m = self.data.rows();
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..m)).collect();
        self.data.gather_rows(&idx)
    }

    /// One optimizer step. Non-finite losses or gradients return `Divergence`.
    pub fn step(&mut self) -> Result<LossReport> {
        match self.cfg.mode {
            Mode::Sign => self.sign_step(),
            Mode::Ign => self.ign_step(),
        }
    }

    fn sign_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        if self.cfg.train.freeze == FreezeMode::Copy {
            self.frozen.set_flat_params(&self.net.flat_params())?;
        }
        let (b, d) = (self.cfg.train.batch, self.data.cols());
        let x = self.minibatch();
        let z = Tensor::randn(&[b, d], self.sched.sigma_max(), &mut self.rng);
        let n_max = self.sched.intervals();
        let levels: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=n_max)).collect();
        let pairs = match self.pairs {
            Some(p) if self.weights.lambda_r > 0.0 => Some(p.minibatch(b, &mut self.rng)?),
            _ => None,
        };

        if let Some(learned) = self.learned.as_mut() {
            let net = &self.net;
            let sigma_max = self.sched.sigma_max();
            learned.train(
                &self.sched,
                self.cfg.dmd.score_steps,
                |r: &mut ChaCha8Rng| net.forward_values(&Tensor::randn(&[b, d], sigma_max, r)),
                &mut self.rng,
            )?;
        }

        let opts = self.cfg.loss;
        let sources = Sources { teacher: self.teacher, learned: self.learned.as_ref().map(|l| l as &dyn ScoreSource) };
        let batch =
            SignBatch::prepare(x, z, levels, &self.net, &self.weights, sources, &self.sched, &opts, pairs, &mut self.rng)?;

        if !self.balanced {
            let mut g = Graph::new();
            let live = self.net.bind(&mut g, false);
            let m = Models::new(&mut g, &self.net, &live, &self.frozen);
            let probe = sign_total(&mut g, &m, &batch, &self.weights, &opts)?;
            self.weights = auto_balance(&self.weights, &probe.report);
            self.balanced = true;
        }

        let mut g = Graph::new();
        let live = self.net.bind(&mut g, true);
        let m = Models::new(&mut g, &self.net, &live, &self.frozen);
        let sg = sign_total(&mut g, &m, &batch, &self.weights, &opts)?;
        let mut report = sg.report;
        self.last_report = Some(report);
        if !report.total.is_finite() || !g.scalar(sg.objective).is_finite() {
            return Err(Error::Divergence { step, detail: "non-finite SIGN objective".into() });
        }
        g.backward(sg.objective)?;
        self.net.zero_grad();
        self.net.accumulate_grads(&g, &live)?;
        report.grad_norm = grad_norm(self.net.params());
        self.last_report = Some(report);
        if self.cfg.train.clip {
            let reference = *self.clip_reference.get_or_insert(report.grad_norm.max(1e-12));
            clip_grad_norm(self.net.params_mut(), self.cfg.train.clip_factor * reference);
        }
        self.apply_update(step)?;
        Ok(report)
    }

    fn ign_step(&mut self) -> Result<LossReport> {
        let step = self.step;
        if self.cfg.train.freeze == FreezeMode::Copy {
            self.frozen.set_flat_params(&self.net.flat_params())?;
        }
        let (b, d) = (self.cfg.train.batch, self.data.cols());
        let x = self.minibatch();
        let z = Tensor::randn(&[b, d], self.sched.sigma_max(), &mut self.rng);
        let mut g = Graph::new();
        let live = self.net.bind(&mut g, true);
        let m = Models::new(&mut g, &self.net, &live, &self.frozen);
        let (total, mut report) = ign_total(&mut g, &m, &x, &z, &self.weights, &self.cfg.loss)?;
        self.last_report = Some(report);
        if !report.total.is_finite() {
            return Err(Error::Divergence { step, detail: "non-finite IGN objective".into() });
        }
        g.backward(total)?;
        self.net.zero_grad();
        self.net.accumulate_grads(&g, &live)?;
        report.grad_norm = grad_norm(self.net.params());
        self.last_report = Some(report);
        self.apply_update(step)?;
        Ok(report)
    }

    fn apply_update(&mut self, step: usize) -> Result<()> {
        let lr = self.cfg.train.lr_at(step);
        adam_step(self.net.params_mut(), &mut self.adam, lr)
            .map_err(|_| Error::Divergence { step, detail: "non-finite generator gradient".into() })?;
        if let FreezeMode::Ema(decay) = self.cfg.train.freeze {
            let live = self.net.flat_params();
            let mut f = self.frozen.flat_params();
            f.iter_mut().zip(&live).for_each(|(a, b)| *a = decay * *a + (1.0 - decay) * b);
            self.frozen.set_flat_params(&f)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Trains until `cfg.train.steps` (or `until`, if smaller). Divergence is
    /// recorded in the outcome rather than returned as an error.
    pub fn run(&mut self, until: Option<usize>, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let end = until.unwrap_or(self.cfg.train.steps).min(self.cfg.train.steps);
        let every = self.cfg.train.checkpoint_every;
        let mut stats = StabilityStats::default();
        let mut divergence = None;
        let start = Instant::now();
        while self.step < end {
            match self.step() {
                Ok(report) => {
                    stats.observe(&report, self.cfg.mode == Mode::Sign);
                    let row = MetricsRow {
                        step: self.step - 1,
                        report,
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    };
                    obs.row(&row)?;
                    if every > 0 && self.step % every == 0 && self.step < end {
                        obs.checkpoint(&self.checkpoint())?;
                    }
                }
                Err(Error::Divergence { step, detail }) => {
                    if let Some(r) = &self.last_report {
                        stats.observe(r, self.cfg.mode == Mode::Sign);
                        obs.row(&MetricsRow { step, report: *r, wall_ms: start.elapsed().as_secs_f64() * 1e3 })?;
                    }
                    divergence = Some(Divergence { step, detail, last_report: self.last_report });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        obs.checkpoint(&self.checkpoint())?;
        Ok(TrainOutcome {
            net: self.net.clone(),
            steps_done: self.step,
            last_report: self.last_report,
            stats,
            divergence,
            weights: self.weights,
        })
    }
}

/// Mean per-dimension standard deviation, floored away from zero.
pub fn data_scale(data: &Tensor) -> f64 {
    let s = data.column_stds();
    (s.iter().sum::<f64>() / s.len().max(1) as f64).max(1e-3)
}

/// Runs SIGN training from scratch under `cfg` (mode forced to SIGN).
pub fn train_sign(
    cfg: &RunConfig,
    data: &Tensor,
    teacher: &dyn ScoreSource,
    pairs: Option<&PairStore>,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let cfg = if cfg.mode == Mode::Sign { cfg.clone() } else { cfg.with("mode", "sign")? };
    Trainer::new(&cfg, data, teacher, pairs)?.run(None, obs)
}

/// Runs IGN training from scratch under `cfg` (mode forced to IGN, no clipping).
pub fn train_ign(cfg: &RunConfig, data: &Tensor, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let cfg = cfg.with("mode", "ign")?.with("train.clip", "false")?;
    let zero = crate::score::ZeroScore { dim: data.cols() };
    Trainer::new(&cfg, data, &zero, None)?.run(None, obs)
}

/// Trains a standalone denoising score network on `data`.
pub fn pretrain_score(cfg: &RunConfig, data: &Tensor) -> Result<(LearnedScore, f64)> {
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = data.cols();
    let mut score = LearnedScore::new(d, &cfg.score.hidden, cfg.score.lr, &mut rng)?.with_data_scale(data_scale(data));
    let b = cfg.score.batch;
    let m = data.rows();
    let last = score.train(
        &sched,
        cfg.score.steps,
        |r: &mut ChaCha8Rng| {
            let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..m)).collect();
            Ok(data.gather_rows(&idx))
        },
        &mut rng,
    )?;
    Ok((score, last))
}

/// Packs a learned score network into a checkpoint (`net` holds the score network).
pub fn score_checkpoint(score: &LearnedScore, cfg: &RunConfig, steps: usize) -> Checkpoint {
    Checkpoint {
        step: steps as u64,
        seed: cfg.seed,
        rng_state: Vec::new(),
        net: score.net().clone(),
        config_hash: cfg.training_hash(),
        extras: vec![("data_scale".into(), score.data_scale())],
        optimizer: Some(score.adam().clone()),
        frozen: None,
        score: None,
    }
}

/// Inverse of [`score_checkpoint`].
pub fn score_from_checkpoint(ckpt: &Checkpoint, lr: f64) -> Result<LearnedScore> {
    let scale = ckpt.extra("data_scale").ok_or_else(|| Error::Config("score checkpoint lacks data_scale".into()))?;
    let mut s = LearnedScore::from_net(ckpt.net.clone(), lr).with_data_scale(scale);
    if let Some(a) = &ckpt.optimizer {
        *s.adam_mut() = a.clone();
    }
    Ok(s)
}
