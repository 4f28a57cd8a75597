//! Pre-generated `(z, y)` pairs from the teacher PF-ODE, used by the regression loss.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::pfode::{solve_batch, Solver};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreSource;

pub const PAIR_MAGIC: &[u8; 8] = b"SGNPAIR1";

/// Noise inputs `z_i` and the teacher's ODE endpoints `y_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairStore {
    z: Tensor,
    y: Tensor,
}

impl PairStore {
    pub fn new(z: Tensor, y: Tensor) -> Result<Self> {
        if z.shape() != y.shape() || z.shape().len() != 2 {
            return Err(Error::dim(z.shape(), y.shape()));
        }
        Ok(PairStore { z, y })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    /// Uniformly drawn minibatch (with replacement).
    pub fn minibatch<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        if self.is_empty() {
            return Err(Error::Config("regression loss needs a non-empty pair store".into()));
        }
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.len())).collect();
        Ok((self.z.gather_rows(&idx), self.y.gather_rows(&idx)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PAIR_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.z.row(i).iter().chain(self.y.row(i)) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = super::checkpoint::Cursor::new(&buf);
        if cur.take(8)? != PAIR_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad pair-store magic".into() });
        }
        let count = cur.u64()? as usize;
        let d = cur.u32()? as usize;
        let need = count.checked_mul(2 * d * 8).ok_or(Error::Format { offset: 8, msg: "size overflow".into() })?;
        if cur.remaining() != need {
            return Err(Error::Format {
                offset: cur.offset() as u64,
                msg: format!("expected {need} payload bytes, found {}", cur.remaining()),
            });
        }
        let (mut z, mut y) = (Vec::with_capacity(count * d), Vec::with_capacity(count * d));
        for _ in 0..count {
            z.extend(cur.f64s(d)?);
            y.extend(cur.f64s(d)?);
        }
        PairStore::new(Tensor::new(vec![count, d], z)?, Tensor::new(vec![count, d], y)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        PairStore::read_from(std::fs::File::open(path)?)
    }
}

/// Draws `z ~ N(0, σ(T)² I)` and solves the teacher PF-ODE to its endpoint.
///
/// Rows whose solve produces non-finite values are dropped; the number of
/// dropped rows is returned alongside the store.
pub fn pregenerate_pairs<R: Rng + ?Sized>(
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    count: usize,
    solver: Solver,
    rng: &mut R,
) -> Result<(PairStore, usize)> {
    if count == 0 {
        return Err(Error::Config("reg.pair_count must be at least 1".into()));
    }
    let d = teacher.dim();
    let z = Tensor::randn(&[count, d], sched.sigma_max(), rng);
    let mut keep_z = Vec::with_capacity(count * d);
    let mut keep_y = Vec::with_capacity(count * d);
    let mut failed = 0;
    let chunk = 256;
    let mut start = 0;
    while start < count {
        let idx: Vec<usize> = (start..(start + chunk).min(count)).collect();
        let zc = z.gather_rows(&idx);
        match solve_batch(&zc, teacher, sched, solver) {
            Ok(tr) => {
                keep_z.extend_from_slice(zc.values());
                keep_y.extend_from_slice(tr.endpoint().values());
            }
            Err(_) => {
                for &i in &idx {
                    let zi = z.gather_rows(&[i]);
                    match solve_batch(&zi, teacher, sched, solver) {
                        Ok(tr) => {
                            keep_z.extend_from_slice(zi.values());
                            keep_y.extend_from_slice(tr.endpoint().values());
                        }
                        Err(_) => failed += 1,
                    }
                }
            }
        }
        start += chunk;
    }
    let kept = count - failed;
    let store = PairStore::new(Tensor::new(vec![kept, d], keep_z)?, Tensor::new(vec![kept, d], keep_y)?)?;
    Ok((store, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;
    use crate::score::{GaussianMixture, ZeroScore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_teacher_returns_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let (store, failed) = pregenerate_pairs(&ZeroScore { dim: 2 }, &sched, 10, Solver::Euler, &mut rng).unwrap();
        assert_eq!(failed, 0);
        assert_eq!(store.z(), store.y());
    }

    #[test]
    fn gaussian_teacher_endpoints_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = NoiseSchedule::new(ScheduleParams { intervals: 64, ..ScheduleParams::default() }).unwrap();
        let s = 0.3;
        let mu = [1.0, -1.0];
        let g = GaussianMixture::single(mu.to_vec(), s).unwrap();
        let (store, _) = pregenerate_pairs(&g, &sched, 200, Solver::Heun, &mut rng).unwrap();
        let ratio = (s * s + sched.sigma_min().powi(2)).sqrt() / (s * s + sched.sigma_max().powi(2)).sqrt();
        for i in 0..store.len() {
            for k in 0..2 {
                let want = mu[k] + ratio * (store.z().row(i)[k] - mu[k]);
                assert!((store.y().row(i)[k] - want).abs() < 1e-2, "{} vs {want}", store.y().row(i)[k]);
            }
        }
    }

    #[test]
    fn round_trip_is_bitwise_and_truncation_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = PairStore::new(Tensor::randn(&[7, 3], 1.0, &mut rng), Tensor::randn(&[7, 3], 1.0, &mut rng)).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], PAIR_MAGIC);
        assert_eq!(PairStore::read_from(&buf[..]).unwrap(), store);
        assert!(matches!(PairStore::read_from(&buf[..buf.len() - 3]), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(PairStore::read_from(&bad[..]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_store_minibatch_is_config_error() {
        let store = PairStore::new(Tensor::zeros(&[0, 2]), Tensor::zeros(&[0, 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(store.minibatch(4, &mut rng), Err(Error::Config(_))));
    }
}
