//! Datasets: analytic 2D toys, synthetic blob images and IDX ingestion.

mod idx;
mod io;

pub use idx::{load_idx, IdxImages, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use io::{load_samples, read_csv, save_samples, write_csv, write_pgm, write_pgm_grid, CsvTable};

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::score::GaussianMixture;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianMixture,
    TwoMoons,
    Checkerboard2d,
    Rings,
    /// Synthetic `side × side` images of one Gaussian blob on a dark background.
    BlobImages,
    IdxImages,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gaussian_mixture" => DatasetKind::GaussianMixture,
            "two_moons" => DatasetKind::TwoMoons,
            "checkerboard2d" => DatasetKind::Checkerboard2d,
            "rings" => DatasetKind::Rings,
            "blob_images" => DatasetKind::BlobImages,
            "idx_images" => DatasetKind::IdxImages,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard2d => "checkerboard2d",
            DatasetKind::Rings => "rings",
            DatasetKind::BlobImages => "blob_images",
            DatasetKind::IdxImages => "idx_images",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, DatasetKind::BlobImages | DatasetKind::IdxImages)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    /// Zero-mean, unit-std per dimension. Image kinds keep their `[-1, 1]` pixel range.
    pub normalize: bool,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    /// Gaussian jitter for moons and rings.
    pub noise: f64,
    pub rings: usize,
    /// Board cells per side for checkerboard2d.
    pub cells: usize,
    pub image_side: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture,
            count: 10_000,
            normalize: true,
            weights: vec![0.5, 0.5],
            means: vec![vec![1.0, 1.0], vec![-1.0, -1.0]],
            stds: vec![0.3, 0.3],
            noise: 0.05,
            rings: 2,
            cells: 4,
            image_side: 8,
            idx_images: None,
            idx_labels: None,
        }
    }
}

/// Per-dimension affine map `x -> (x - shift) / scale` applied after generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Normalization { shift: vec![0.0; d], scale: vec![1.0; d] }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.shift.len();
        let mut out = x.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let k = i % d;
            *v = (*v - self.shift[k]) / self.scale[k];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let d = self.shift.len();
        let mut out = x.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let k = i % d;
            *v = *v * self.scale[k] + self.shift[k];
        }
        out
    }
}

/// Generated samples plus whatever analytic structure the kind provides.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub data: Tensor,
    /// Ground-truth density in normalized coordinates (mixtures only).
    pub mixture: Option<GaussianMixture>,
    pub image_shape: Option<(usize, usize)>,
    pub normalization: Normalization,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Per-dimension standard deviation averaged over dimensions.
    pub fn scale(&self) -> f64 {
        let s = self.data.column_stds();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 && self.kind != DatasetKind::IdxImages {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        match self.kind {
            DatasetKind::GaussianMixture => {
                self.mixture()?;
            }
            DatasetKind::TwoMoons | DatasetKind::Rings if !(self.noise >= 0.0) => {
                return Err(Error::Config(format!("data.noise must be >= 0, got {}", self.noise)));
            }
            DatasetKind::Rings if self.rings == 0 => return Err(Error::Config("data.rings must be >= 1".into())),
            DatasetKind::Checkerboard2d if self.cells < 2 => {
                return Err(Error::Config("data.cells must be >= 2".into()));
            }
            DatasetKind::BlobImages if !(4..=16).contains(&self.image_side) => {
                return Err(Error::Config(format!("data.image_side must lie in [4, 16], got {}", self.image_side)));
            }
            DatasetKind::IdxImages if self.idx_images.is_none() => {
                return Err(Error::Config("data.idx_images is required for idx_images".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// The configured mixture, before normalization.
    pub fn mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.weights.clone(), self.means.clone(), self.stds.clone())
            .map_err(|e| Error::Config(format!("invalid mixture in data.*: {e}")))
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianMixture => self.means.first().map_or(0, Vec::len),
            DatasetKind::BlobImages => self.image_side * self.image_side,
            DatasetKind::IdxImages => 0,
            _ => 2,
        }
    }

    fn raw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Tensor> {
        match self.kind {
            DatasetKind::GaussianMixture => Ok(self.mixture()?.sample(count, rng)),
            DatasetKind::TwoMoons => Ok(two_moons(count, self.noise, rng)),
            DatasetKind::Checkerboard2d => Ok(checkerboard(count, self.cells, rng)),
            DatasetKind::Rings => Ok(rings(count, self.rings, self.noise, rng)),
            DatasetKind::BlobImages => Ok(blob_images(count, self.image_side, rng)),
            DatasetKind::IdxImages => Err(Error::Config("idx_images are loaded, not sampled".into())),
        }
    }

    /// The normalization this spec applies. Mixtures use their analytic moments
    /// and one common scale so the normalized mixture stays isotropic; other
    /// 2D kinds use the moments of a large fixed-seed reference draw.
    pub fn normalization(&self) -> Result<Normalization> {
        let d = self.dim();
        if !self.normalize || self.kind.is_image() {
            return Ok(Normalization::identity(d.max(1)));
        }
        if self.kind == DatasetKind::GaussianMixture {
            let gm = self.mixture()?;
            let var = gm.variance();
            let lo = var.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = var.iter().cloned().fold(0.0, f64::max);
            if hi > 1.1 * lo {
                return Err(Error::Config(format!(
                    "mixture per-dimension variances {var:?} differ by more than 10%; normalization would break isotropy"
                )));
            }
            let s = (var.iter().sum::<f64>() / d as f64).sqrt();
            return Ok(Normalization { shift: gm.mean(), scale: vec![s; d] });
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5eed);
        let reference = self.raw(100_000, &mut rng)?;
        Ok(Normalization { shift: reference.column_means(), scale: reference.column_stds() })
    }

    /// Draws `count` normalized samples.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Tensor> {
        Ok(self.normalization()?.apply(&self.raw(count, rng)?))
    }
}

/// Draws (or loads) the dataset described by `spec`.
pub fn generate<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind == DatasetKind::IdxImages {
        let path = spec.idx_images.as_ref().expect("validated");
        let idx = load_idx(path, spec.idx_labels.as_deref())?;
        let mut data = idx.images;
        let mut labels = idx.labels;
        if spec.count > 0 && spec.count < data.rows() {
            let keep: Vec<usize> = (0..spec.count).collect();
            data = data.gather_rows(&keep);
            labels = labels.map(|l| l[..spec.count].to_vec());
        }
        let d = data.cols();
        return Ok(Dataset {
            data,
            mixture: None,
            image_shape: Some((idx.rows, idx.cols)),
            normalization: Normalization::identity(d),
            labels,
        });
    }
    let norm = spec.normalization()?;
    let data = norm.apply(&spec.raw(spec.count, rng)?);
    let mixture = if spec.kind == DatasetKind::GaussianMixture {
        Some(spec.mixture()?.affine(&norm.shift, norm.scale[0])?)
    } else {
        None
    };
    let image_shape = (spec.kind == DatasetKind::BlobImages).then_some((spec.image_side, spec.image_side));
    Ok(Dataset { data, mixture, image_shape, normalization: norm, labels: None })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn two_moons<R: Rng + ?Sized>(count: usize, noise: f64, rng: &mut R) -> Tensor {
    let mut v = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let a = rng.random_range(0.0..PI);
        let (x, y) = if rng.random_bool(0.5) { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
        v.push(x + noise * normal(rng));
        v.push(y + noise * normal(rng));
    }
    Tensor::new(vec![count, 2], v).expect("shape")
}

/// Uniform on the cells of a `cells × cells` board over `[-2, 2]²` with even `i + j`.
fn checkerboard<R: Rng + ?Sized>(count: usize, cells: usize, rng: &mut R) -> Tensor {
    let mut v = Vec::with_capacity(2 * count);
    while v.len() < 2 * count {
        let x = rng.random_range(-2.0..2.0);
        let y = rng.random_range(-2.0..2.0);
        if checker_allowed(x, y, cells) {
            v.push(x);
            v.push(y);
        }
    }
    Tensor::new(vec![count, 2], v).expect("shape")
}

pub(crate) fn checker_allowed(x: f64, y: f64, cells: usize) -> bool {
    let w = 4.0 / cells as f64;
    let i = (((x + 2.0) / w).floor() as i64).clamp(0, cells as i64 - 1);
    let j = (((y + 2.0) / w).floor() as i64).clamp(0, cells as i64 - 1);
    (i + j) % 2 == 0
}

fn rings<R: Rng + ?Sized>(count: usize, n: usize, noise: f64, rng: &mut R) -> Tensor {
    let mut v = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let r = rng.random_range(1..=n) as f64 + noise * normal(rng);
        let a = rng.random_range(0.0..2.0 * PI);
        v.push(r * a.cos());
        v.push(r * a.sin());
    }
    Tensor::new(vec![count, 2], v).expect("shape")
}

/// One isotropic blob per image: `2·exp(-r²/2w²) - 1`, centre uniform in the
/// inner region, width uniform in `[0.08, 0.16]·side`. Values lie in `[-1, 1]`.
fn blob_images<R: Rng + ?Sized>(count: usize, side: usize, rng: &mut R) -> Tensor {
    let s = side as f64;
    let mut v = Vec::with_capacity(count * side * side);
    for _ in 0..count {
        let cx = rng.random_range(0.25 * s..0.75 * s);
        let cy = rng.random_range(0.25 * s..0.75 * s);
        let w = rng.random_range(0.08 * s..0.16 * s);
        for r in 0..side {
            for c in 0..side {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                v.push(2.0 * (-(dx * dx + dy * dy) / (2.0 * w * w)).exp() - 1.0);
            }
        }
    }
    Tensor::new(vec![count, side * side], v).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn single_component_moments_within_four_standard_errors() {
        let spec = DatasetSpec {
            normalize: false,
            weights: vec![1.0],
            means: vec![vec![0.7, -1.2]],
            stds: vec![0.4],
            count: 20_000,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec, &mut rng(1)).unwrap();
        let m = ds.data.rows() as f64;
        let (mean, std) = (ds.data.column_means(), ds.data.column_stds());
        for k in 0..2 {
            assert!((mean[k] - spec.means[0][k]).abs() < 4.0 * 0.4 / m.sqrt());
            // Standard error of the sample std of a Gaussian: s / sqrt(2M).
            assert!((std[k] - 0.4).abs() < 4.0 * 0.4 / (2.0 * m).sqrt());
        }
    }

    #[test]
    fn checkerboard_samples_lie_on_allowed_cells() {
        let spec = DatasetSpec { kind: DatasetKind::Checkerboard2d, normalize: false, count: 5000, ..DatasetSpec::default() };
        let ds = generate(&spec, &mut rng(2)).unwrap();
        for i in 0..ds.data.rows() {
            let r = ds.data.row(i);
            assert!(checker_allowed(r[0], r[1], 4), "{r:?}");
        }
        let norm = DatasetSpec { normalize: true, ..spec };
        let ds = generate(&norm, &mut rng(2)).unwrap();
        let raw = ds.normalization.invert(&ds.data);
        for i in 0..raw.rows() {
            let r = raw.row(i);
            assert!(checker_allowed(r[0], r[1], 4));
        }
    }

    #[test]
    fn normalization_invariant_for_every_2d_kind() {
        for kind in [DatasetKind::GaussianMixture, DatasetKind::TwoMoons, DatasetKind::Checkerboard2d, DatasetKind::Rings] {
            let spec = DatasetSpec { kind, count: 20_000, ..DatasetSpec::default() };
            let ds = generate(&spec, &mut rng(3)).unwrap();
            for (m, s) in ds.data.column_means().iter().zip(ds.data.column_stds()) {
                assert!(m.abs() <= 0.05, "{kind:?} mean {m}");
                assert!((0.9..=1.1).contains(&s), "{kind:?} std {s}");
            }
        }
    }

    #[test]
    fn normalized_mixture_matches_transformed_samples() {
        let ds = generate(&DatasetSpec::default(), &mut rng(4)).unwrap();
        let gm = ds.mixture.unwrap();
        let fresh = gm.sample(20_000, &mut rng(5));
        let (a, b) = (ds.data.column_stds(), fresh.column_stds());
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 0.03);
        }
    }

    #[test]
    fn anisotropic_mixture_cannot_be_normalized() {
        let spec = DatasetSpec { means: vec![vec![3.0, 0.0], vec![-3.0, 0.0]], ..DatasetSpec::default() };
        assert!(matches!(generate(&spec, &mut rng(0)), Err(Error::Config(_))));
        let raw = DatasetSpec { normalize: false, ..spec };
        assert!(generate(&raw, &mut rng(0)).is_ok());
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        for kind in [DatasetKind::GaussianMixture, DatasetKind::TwoMoons, DatasetKind::Rings, DatasetKind::BlobImages] {
            let spec = DatasetSpec { kind, count: 300, ..DatasetSpec::default() };
            let a = generate(&spec, &mut rng(9)).unwrap();
            let b = generate(&spec, &mut rng(9)).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn blob_images_lie_in_pixel_range() {
        let spec = DatasetSpec { kind: DatasetKind::BlobImages, count: 50, ..DatasetSpec::default() };
        let ds = generate(&spec, &mut rng(6)).unwrap();
        assert_eq!(ds.image_shape, Some((8, 8)));
        assert!(ds.data.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ds.data.values().iter().any(|&v| v > 0.5));
    }

    #[test]
    fn unknown_kind_and_bad_parameters_are_config_errors() {
        assert!(DatasetKind::parse("spirals").is_none());
        let spec = DatasetSpec { count: 0, ..DatasetSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = DatasetSpec { kind: DatasetKind::IdxImages, ..DatasetSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
