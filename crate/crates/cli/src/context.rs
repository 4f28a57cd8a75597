//! Pieces shared by the commands: artifact directory, dataset, teacher, model.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sign_core::data::{generate, load_samples, write_pgm_grid, Dataset, DatasetKind, Normalization};
use sign_core::diffcore::{MlpNet, Tensor};
use sign_core::score::{KernelScore, ScoreSource};
use sign_core::trainer::{score_from_checkpoint, Checkpoint, RunConfig, ScoreKind};
use sign_core::{Error, Result};

/// Offsets mixed into the run seed so independent streams never coincide.
pub(crate) const STREAM_HELDOUT: u64 = 0x4845_4c44;
pub(crate) const STREAM_EVAL: u64 = 0x4556_414c;
pub(crate) const STREAM_PAIRS: u64 = 0x5041_4952;

pub(crate) fn stream(seed: u64, offset: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ offset.rotate_left(17))
}

/// Ordered `key=value` lines for `summary.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `summary.txt` text.
    pub fn parse(text: &str) -> Summary {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Summary { entries }
    }
}

/// The `--out` directory of one command.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("samples"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<()> {
        let mut f = fs::File::create(self.path(rel))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn write_pgm_grid(&self, rel: &str, t: &Tensor, shape: (usize, usize)) -> Result<()> {
        let n = t.rows().min(64);
        let idx: Vec<usize> = (0..n).collect();
        let f = fs::File::create(self.path(rel))?;
        let mut w = std::io::BufWriter::new(f);
        write_pgm_grid(&mut w, &t.gather_rows(&idx), shape.0, shape.1, 8)?;
        w.flush()?;
        Ok(())
    }
}

/// The training dataset: `data.file` if set, otherwise drawn from `data.*` with `seed`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_file {
        Some(p) => {
            let data = load_samples(p)?;
            let d = data.cols();
            let side = cfg.data.image_side;
            let image_shape = (cfg.data.kind.is_image() && side * side == d).then_some((side, side));
            Ok(Dataset { data, mixture: None, image_shape, normalization: Normalization::identity(d), labels: None })
        }
        None => generate(&cfg.data, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    }
}

/// `count` samples independent of the training draw: fresh draws from the
/// generator when the dataset kind has one, otherwise rows resampled from `ds`.
pub fn reference_draw<R: Rng + ?Sized>(cfg: &RunConfig, ds: &Dataset, count: usize, rng: &mut R) -> Result<Tensor> {
    if cfg.data_file.is_none() && cfg.data.kind != DatasetKind::IdxImages {
        return cfg.data.sample(count, rng);
    }
    let m = ds.data.rows();
    let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..m)).collect();
    Ok(ds.data.gather_rows(&idx))
}

/// The score source named by `score.kind`.
pub fn make_teacher(cfg: &RunConfig, ds: &Dataset) -> Result<Box<dyn ScoreSource>> {
    match cfg.score.kind {
        ScoreKind::Analytic => match &ds.mixture {
            Some(gm) => Ok(Box::new(gm.clone())),
            None => Err(Error::Config(
                "score.kind = analytic needs data.kind = gaussian_mixture without data.file".into(),
            )),
        },
        ScoreKind::Kernel => Ok(Box::new(KernelScore::new(ds.data.clone(), cfg.score.sigma_floor)?)),
        ScoreKind::Learned => {
            let p = cfg
                .score
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("score.kind = learned needs score.checkpoint".into()))?;
            let s = score_from_checkpoint(&Checkpoint::load(p)?, cfg.score.lr)?;
            if s.dim() != ds.dim() {
                return Err(Error::Config(format!(
                    "score.checkpoint has dimension {}, data has {}",
                    s.dim(),
                    ds.dim()
                )));
            }
            Ok(Box::new(s))
        }
    }
}

/// The generator stored at `model.checkpoint`.
pub fn load_model(cfg: &RunConfig, d: usize) -> Result<MlpNet> {
    let p = cfg.model_checkpoint.as_ref().ok_or_else(|| Error::Config("model.checkpoint is required".into()))?;
    let net = Checkpoint::load(p)?.net;
    if net.in_width() != d || net.out_width() != d {
        return Err(Error::Config(format!(
            "model.checkpoint maps {} -> {}, data has dimension {d}",
            net.in_width(),
            net.out_width()
        )));
    }
    Ok(net)
}

/// Default convergence tolerance of recursive sampling: `1e-4 ·` data scale.
pub(crate) fn sampler_tol(cfg: &RunConfig, ds: &Dataset) -> f64 {
    cfg.sample.tol.unwrap_or(1e-4 * sign_core::trainer::data_scale(&ds.data))
}
