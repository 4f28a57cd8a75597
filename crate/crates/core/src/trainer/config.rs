//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Every key has a default; files and overrides only name the keys they
//! change. Unknown keys are rejected. [`RunConfig::to_text`] echoes every key
//! in schema order, and feeding that text back in reproduces the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{DatasetKind, DatasetSpec};
use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::losses::{Distance, IdemOrder, LossOptions, LossWeights};
use crate::pfode::Solver;
use crate::schedule::{ScheduleKind, ScheduleParams};

/// `(key, default)` in echo order.
const SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("mode", "sign"),
    ("data.kind", "gaussian_mixture"),
    ("data.count", "10000"),
    ("data.normalize", "true"),
    ("data.weights", "0.5,0.5"),
    ("data.means", "1,1;-1,-1"),
    ("data.stds", "0.3,0.3"),
    ("data.noise", "0.05"),
    ("data.rings", "2"),
    ("data.cells", "4"),
    ("data.image_side", "8"),
    ("data.idx_images", ""),
    ("data.idx_labels", ""),
    ("data.file", ""),
    ("net.hidden", "128,128,128"),
    ("net.activation", "silu"),
    ("net.identity_init", "true"),
    ("schedule.kind", "identity"),
    ("schedule.eps", "0.002"),
    ("schedule.T", "1"),
    ("schedule.sigma_min", "0.002"),
    ("schedule.sigma_max", "1"),
    ("schedule.N", "18"),
    ("schedule.rho", "7"),
    ("score.kind", "analytic"),
    ("score.checkpoint", ""),
    ("score.hidden", "128,128,128"),
    ("score.lr", "0.001"),
    ("score.steps", "5000"),
    ("score.batch", "256"),
    ("kernel.sigma_floor", "0.01"),
    ("loss.lambda_f", "1"),
    ("loss.lambda_d", "0"),
    ("loss.lambda_r", "0"),
    ("loss.lambda_n", "0.1"),
    ("loss.lambda_t", "0.1"),
    ("loss.lambda_i", "1"),
    ("loss.distance", "sq_l2"),
    ("loss.idem_order", "frozen_outer"),
    ("loss.tight_clamp", ""),
    ("loss.auto_balance", "false"),
    ("flow.solver", "euler"),
    ("train.steps", "20000"),
    ("train.batch", "256"),
    ("train.lr", "0.001"),
    ("train.lr_schedule", "cosine"),
    ("train.lr_min", "0.00001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.adam_eps", "1e-8"),
    ("train.freeze", "copy"),
    ("train.ema_decay", "0.999"),
    ("train.clip", "true"),
    ("train.clip_factor", "100"),
    ("train.checkpoint_every", "0"),
    ("train.resume", ""),
    ("dmd.score_steps", "5"),
    ("dmd.score_lr", "0.001"),
    ("dmd.score_hidden", "64,64"),
    ("reg.pair_count", "10000"),
    ("reg.pairs", ""),
    ("model.checkpoint", ""),
    ("sample.count", "1000"),
    ("sample.mode", "single"),
    ("sampler.max_iters", "10"),
    ("sampler.tol", ""),
    ("edit.steps", "10"),
    ("edit.sigma_hi", ""),
    ("edit.sigma_lo", ""),
    ("edit.input", ""),
    ("edit.mask", ""),
    ("edit.block", "2"),
    ("edit.count", "64"),
    ("eval.samples", "10000"),
    ("eval.projections", "128"),
    ("eval.draws", "5"),
    ("eval.energy_samples", "2000"),
    ("trace.count", "16"),
    ("scaling.intervals", "8,16,32"),
    ("scaling.solvers", "euler"),
    ("scaling.trajectories", "256"),
    ("scaling.reference_steps", "10000"),
    ("scaling.tolerance", "1e-4"),
    ("scaling.max_steps", "40000"),
    ("scaling.check_every", "500"),
    ("scaling.concurrent", "true"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sign,
    Ign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Analytic,
    Kernel,
    Learned,
}

/// How the frozen parameters `θ′` follow `θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FreezeMode {
    /// `θ′ ← θ` at the start of every step.
    Copy,
    /// `θ′ ← decay·θ′ + (1 − decay)·θ` after every step.
    Ema(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Single,
    Recursive,
    Multistep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub freeze: FreezeMode,
    pub clip: bool,
    pub clip_factor: f64,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl TrainSettings {
    /// Learning rate for 0-based `step` out of `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let p = step as f64 / self.steps.max(1) as f64;
                self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSettings {
    pub kind: ScoreKind,
    pub checkpoint: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub sigma_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmdSettings {
    pub score_steps: usize,
    pub score_lr: f64,
    pub score_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    pub count: usize,
    pub mode: SampleMode,
    pub max_iters: usize,
    /// `None` means `1e-4 ·` data scale.
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditSettings {
    pub steps: usize,
    /// `None` means `0.5 · σ_max`.
    pub sigma_hi: Option<f64>,
    /// `None` means `σ_min`.
    pub sigma_lo: Option<f64>,
    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub block: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub projections: usize,
    pub draws: usize,
    pub energy_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSettings {
    pub intervals: Vec<usize>,
    pub solvers: Vec<Solver>,
    pub trajectories: usize,
    pub reference_steps: usize,
    pub tolerance: f64,
    pub max_steps: usize,
    pub check_every: usize,
    pub concurrent: bool,
}

/// Resolved, typed configuration plus the raw key/value map it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub seed: u64,
    pub mode: Mode,
    pub data: DatasetSpec,
    pub data_file: Option<PathBuf>,
    pub net_hidden: Vec<usize>,
    pub activation: Activation,
    pub identity_init: bool,
    pub schedule: ScheduleParams,
    pub score: ScoreSettings,
    pub weights: LossWeights,
    pub loss: LossOptions,
    pub auto_balance: bool,
    pub train: TrainSettings,
    pub dmd: DmdSettings,
    pub reg_pair_count: usize,
    pub reg_pairs: Option<PathBuf>,
    pub model_checkpoint: Option<PathBuf>,
    pub sample: SampleSettings,
    pub edit: EditSettings,
    pub eval: EvalSettings,
    pub trace_count: usize,
    pub scaling: ScalingSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(std::iter::empty::<(String, String)>()).expect("schema defaults are valid")
    }
}

/// Whether `key` is part of the schema.
pub fn is_known_key(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}: expected {what}, got `{value}`"))
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("schema key")
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(bad(key, v, "a finite number")),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(key, v, "an unsigned 64-bit integer"))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(bad(key, v, "true or false")),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list<T>(&self, key: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| f(s.trim()).ok_or_else(|| bad(key, v, what))).collect()
    }

    fn f64s(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key, "comma-separated numbers", |s| s.parse().ok())
    }

    fn widths(&self, key: &str) -> Result<Vec<usize>> {
        let w = self.list(key, "comma-separated positive integers", |s| s.parse().ok().filter(|n| *n > 0))?;
        if w.is_empty() {
            return Err(bad(key, self.raw(key), "at least one width"));
        }
        Ok(w)
    }

    fn choice<T>(&self, key: &str, options: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        let v = self.raw(key);
        f(v).ok_or_else(|| bad(key, v, &format!("one of {options}")))
    }
}

impl RunConfig {
    /// Defaults overlaid with `pairs` in order (later pairs win).
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut values: BTreeMap<String, String> =
            SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            let k = k.as_ref();
            if !is_known_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            values.insert(k.to_string(), v.as_ref().to_string());
        }
        RunConfig::resolve(values)
    }

    /// Parses a config file's text with overrides applied on top.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_config_text(text)?;
        pairs.extend(overrides.iter().cloned());
        RunConfig::from_pairs(pairs)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_text(&text, overrides)
    }

    /// Returns a copy with `key` set to `value`.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self.values.clone().into_iter().collect();
        pairs.push((key.to_string(), value.to_string()));
        RunConfig::from_pairs(pairs)
    }

    /// Raw string value of a schema key.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every key in schema order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in SCHEMA {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&self.values[*k]);
            s.push('\n');
        }
        s
    }

    /// Hash of the resolved echo; stored in checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    /// Hash of only the keys that shape training, so a checkpoint can be
    /// evaluated under different sampling or evaluation settings.
    pub fn training_hash(&self) -> u64 {
        let mut s = String::new();
        for (k, _) in SCHEMA {
            let ns = k.split('.').next().unwrap_or(k);
            if matches!(ns, "seed" | "mode" | "data" | "net" | "schedule" | "score" | "kernel" | "loss" | "flow" | "dmd" | "reg")
                || (ns == "train" && *k != "train.resume" && *k != "train.checkpoint_every")
            {
                s.push_str(k);
                s.push('=');
                s.push_str(&self.values[*k]);
                s.push('\n');
            }
        }
        fnv1a(s.as_bytes())
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        let paths = [
            ("data.idx_images", &self.data.idx_images),
            ("data.idx_labels", &self.data.idx_labels),
            ("data.file", &self.data_file),
            ("score.checkpoint", &self.score.checkpoint),
            ("reg.pairs", &self.reg_pairs),
            ("model.checkpoint", &self.model_checkpoint),
            ("edit.input", &self.edit.input),
            ("edit.mask", &self.edit.mask),
            ("train.resume", &self.train.resume),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{k}: file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    fn resolve(values: BTreeMap<String, String>) -> Result<Self> {
        let r = Reader { values: &values };
        let mode = r.choice("mode", "sign, ign", |s| match s {
            "sign" => Some(Mode::Sign),
            "ign" => Some(Mode::Ign),
            _ => None,
        })?;

        let means_raw = r.raw("data.means");
        let means: Vec<Vec<f64>> = means_raw
            .split(';')
            .map(|c| c.split(',').map(|s| s.trim().parse::<f64>().ok()).collect::<Option<Vec<_>>>())
            .collect::<Option<_>>()
            .ok_or_else(|| bad("data.means", means_raw, "`;`-separated components of comma-separated numbers"))?;
        let data = DatasetSpec {
            kind: r.choice(
                "data.kind",
                "gaussian_mixture, two_moons, checkerboard2d, rings, blob_images, idx_images",
                DatasetKind::parse,
            )?,
            count: r.usize("data.count")?,
            normalize: r.bool("data.normalize")?,
            weights: r.f64s("data.weights")?,
            means,
            stds: r.f64s("data.stds")?,
            noise: r.f64("data.noise")?,
            rings: r.usize("data.rings")?,
            cells: r.usize("data.cells")?,
            image_side: r.usize("data.image_side")?,
            idx_images: r.path("data.idx_images"),
            idx_labels: r.path("data.idx_labels"),
        };
        let data_file = r.path("data.file");
        if data_file.is_none() {
            data.validate()?;
        }

        let schedule = ScheduleParams {
            kind: r.choice("schedule.kind", "identity, linear", ScheduleKind::parse)?,
            sigma_min: r.f64("schedule.sigma_min")?,
            sigma_max: r.f64("schedule.sigma_max")?,
            eps: r.f64("schedule.eps")?,
            t_max: r.f64("schedule.T")?,
            intervals: r.usize("schedule.N")?,
            rho: r.f64("schedule.rho")?,
        };
        crate::schedule::NoiseSchedule::new(schedule).map_err(|e| Error::Config(format!("schedule.*: {e}")))?;

        let score = ScoreSettings {
            kind: r.choice("score.kind", "analytic, kernel, learned", |s| match s {
                "analytic" => Some(ScoreKind::Analytic),
                "kernel" => Some(ScoreKind::Kernel),
                "learned" => Some(ScoreKind::Learned),
                _ => None,
            })?,
            checkpoint: r.path("score.checkpoint"),
            hidden: r.widths("score.hidden")?,
            lr: r.f64("score.lr")?,
            steps: r.usize("score.steps")?,
            batch: r.usize("score.batch")?,
            sigma_floor: r.f64("kernel.sigma_floor")?,
        };
        if score.batch == 0 {
            return Err(bad("score.batch", r.raw("score.batch"), "at least 1"));
        }
        if !(score.sigma_floor > 0.0) {
            return Err(bad("kernel.sigma_floor", r.raw("kernel.sigma_floor"), "a positive number"));
        }

        let weights = LossWeights {
            lambda_f: r.f64("loss.lambda_f")?,
            lambda_d: r.f64("loss.lambda_d")?,
            lambda_r: r.f64("loss.lambda_r")?,
            lambda_n: r.f64("loss.lambda_n")?,
            lambda_t: r.f64("loss.lambda_t")?,
            lambda_i: r.f64("loss.lambda_i")?,
        };
        weights.validate()?;
        let tight_clamp = r.opt_f64("loss.tight_clamp")?;
        if tight_clamp.is_some_and(|a| a <= 0.0) {
            return Err(bad("loss.tight_clamp", r.raw("loss.tight_clamp"), "a positive number or empty"));
        }
        let loss = LossOptions {
            distance: r.choice("loss.distance", "sq_l2, l2", Distance::parse)?,
            idem_order: r.choice("loss.idem_order", "frozen_outer, frozen_inner", IdemOrder::parse)?,
            tight_clamp,
            solver: r.choice("flow.solver", "euler, heun", Solver::parse)?,
        };

        let freeze = match r.raw("train.freeze") {
            "copy" => FreezeMode::Copy,
            "ema" => {
                let d = r.f64("train.ema_decay")?;
                if !(0.0..1.0).contains(&d) {
                    return Err(bad("train.ema_decay", r.raw("train.ema_decay"), "a number in [0, 1)"));
                }
                FreezeMode::Ema(d)
            }
            v => return Err(bad("train.freeze", v, "one of copy, ema")),
        };
        let train = TrainSettings {
            steps: r.usize("train.steps")?,
            batch: r.usize("train.batch")?,
            lr: r.f64("train.lr")?,
            lr_schedule: r.choice("train.lr_schedule", "constant, cosine", |s| match s {
                "constant" => Some(LrSchedule::Constant),
                "cosine" => Some(LrSchedule::Cosine),
                _ => None,
            })?,
            lr_min: r.f64("train.lr_min")?,
            beta1: r.f64("train.beta1")?,
            beta2: r.f64("train.beta2")?,
            adam_eps: r.f64("train.adam_eps")?,
            freeze,
            clip: r.bool("train.clip")?,
            clip_factor: r.f64("train.clip_factor")?,
            checkpoint_every: r.usize("train.checkpoint_every")?,
            resume: r.path("train.resume"),
        };
        if train.batch == 0 {
            return Err(bad("train.batch", r.raw("train.batch"), "at least 1"));
        }
        if !(train.lr > 0.0) || train.lr_min < 0.0 {
            return Err(Error::Config("train.lr must be positive and train.lr_min non-negative".into()));
        }
        for k in ["train.beta1", "train.beta2"] {
            let b = r.f64(k)?;
            if !(0.0..1.0).contains(&b) {
                return Err(bad(k, r.raw(k), "a number in [0, 1)"));
            }
        }
        if !(train.clip_factor > 0.0) {
            return Err(bad("train.clip_factor", r.raw("train.clip_factor"), "a positive number"));
        }

        let dmd = DmdSettings {
            score_steps: r.usize("dmd.score_steps")?,
            score_lr: r.f64("dmd.score_lr")?,
            score_hidden: r.widths("dmd.score_hidden")?,
        };

        let sample = SampleSettings {
            count: r.usize("sample.count")?,
            mode: r.choice("sample.mode", "single, recursive, multistep", |s| match s {
                "single" => Some(SampleMode::Single),
                "recursive" => Some(SampleMode::Recursive),
                "multistep" => Some(SampleMode::Multistep),
                _ => None,
            })?,
            max_iters: r.usize("sampler.max_iters")?,
            tol: r.opt_f64("sampler.tol")?,
        };
        if sample.max_iters == 0 {
            return Err(bad("sampler.max_iters", r.raw("sampler.max_iters"), "at least 1"));
        }
        let edit = EditSettings {
            steps: r.usize("edit.steps")?,
            sigma_hi: r.opt_f64("edit.sigma_hi")?,
            sigma_lo: r.opt_f64("edit.sigma_lo")?,
            input: r.path("edit.input"),
            mask: r.path("edit.mask"),
            block: r.usize("edit.block")?,
            count: r.usize("edit.count")?,
        };
        if edit.block == 0 {
            return Err(bad("edit.block", r.raw("edit.block"), "at least 1"));
        }
        let eval = EvalSettings {
            samples: r.usize("eval.samples")?,
            projections: r.usize("eval.projections")?,
            draws: r.usize("eval.draws")?,
            energy_samples: r.usize("eval.energy_samples")?,
        };
        if eval.samples < 2 || eval.projections == 0 || eval.draws == 0 {
            return Err(Error::Config(
                "eval.samples must be >= 2 and eval.projections, eval.draws >= 1".into(),
            ));
        }
        let scaling = ScalingSettings {
            intervals: r.widths("scaling.intervals")?,
            solvers: r.list("scaling.solvers", "comma-separated solvers (euler, heun)", Solver::parse)?,
            trajectories: r.usize("scaling.trajectories")?,
            reference_steps: r.usize("scaling.reference_steps")?,
            tolerance: r.f64("scaling.tolerance")?,
            max_steps: r.usize("scaling.max_steps")?,
            check_every: r.usize("scaling.check_every")?,
            concurrent: r.bool("scaling.concurrent")?,
        };
        if scaling.solvers.is_empty() || scaling.trajectories == 0 || scaling.check_every == 0 {
            return Err(Error::Config(
                "scaling.solvers must be non-empty; scaling.trajectories and scaling.check_every >= 1".into(),
            ));
        }

        Ok(RunConfig {
            seed: r.u64("seed")?,
            mode,
            data,
            data_file,
            net_hidden: r.widths("net.hidden")?,
            activation: r.choice("net.activation", "silu, tanh", Activation::parse)?,
            identity_init: r.bool("net.identity_init")?,
            schedule,
            score,
            weights,
            loss,
            auto_balance: r.bool("loss.auto_balance")?,
            train,
            dmd,
            reg_pair_count: r.usize("reg.pair_count")?,
            reg_pairs: r.path("reg.pairs"),
            model_checkpoint: r.path("model.checkpoint"),
            sample,
            edit,
            eval,
            trace_count: r.usize("trace.count")?,
            scaling,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        assert_eq!(c.train.steps, 20000);
        assert_eq!(c.train.batch, 256);
        assert_eq!(c.schedule.intervals, 18);
        assert_eq!(c.net_hidden, vec![128, 128, 128]);
        assert_eq!(c.train.freeze, FreezeMode::Copy);
        assert_eq!(c.data.means, vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_text("train.stpes = 3\n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("train.stpes")), "{e}");
    }

    #[test]
    fn comments_overrides_and_bad_lines() {
        let text = "# header\nseed = 5 # trailing\n\ntrain.steps = 10\n";
        let c = RunConfig::from_text(text, &[("train.steps".into(), "12".into())]).unwrap();
        assert_eq!((c.seed, c.train.steps), (5, 12));
        let e = RunConfig::from_text("seed 5\n", &[]).unwrap_err();
        assert!(e.to_string().contains("line 1"));
        assert!(RunConfig::from_text("train.batch = 0\n", &[]).is_err());
        assert!(RunConfig::from_text("loss.lambda_f = 2\n", &[]).is_err());
        assert!(RunConfig::from_text("train.freeze = ema\ntrain.ema_decay = 1.5\n", &[]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_text("seed = 9\ntrain.freeze = ema\nloss.tight_clamp = 2.5\n", &[]).unwrap();
        let again = RunConfig::from_text(&c.to_text(), &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_eq!(c.train.freeze, FreezeMode::Ema(0.999));
        assert_eq!(c.loss.tight_clamp, Some(2.5));
    }

    #[test]
    fn training_hash_ignores_eval_keys() {
        let a = RunConfig::default();
        let b = a.with("eval.samples", "50").unwrap();
        let c = a.with("train.lr", "0.01").unwrap();
        assert_eq!(a.training_hash(), b.training_hash());
        assert_ne!(a.training_hash(), c.training_hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let t = RunConfig::default().train;
        assert_eq!(t.lr_at(0), t.lr);
        assert!((t.lr_at(t.steps) - t.lr_min).abs() < 1e-15);
        assert!(t.lr_at(t.steps / 2) < t.lr);
    }

    #[test]
    fn missing_referenced_file_is_config_error() {
        let c = RunConfig::from_text("model.checkpoint = /nonexistent/x.ckpt\n", &[]).unwrap();
        assert!(matches!(c.check_paths(), Err(Error::Config(ref m)) if m.contains("model.checkpoint")));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
