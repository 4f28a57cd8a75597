//! Metrics and property harnesses.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{MlpNet, Tensor};
use crate::error::{Error, Result};
use crate::pfode::{flow_target, reference_solve, Solver};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreSource;

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn mean_row_dist(a: &Tensor, b: &Tensor) -> f64 {
    if a.rows() == 0 {
        return 0.0;
    }
    (0..a.rows()).map(|i| row_dist(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
}

/// `mean ‖f(f(z)) − f(z)‖₂`.
pub fn idem_drift(net: &MlpNet, z: &Tensor) -> Result<f64> {
    let fz = net.forward_values(z)?;
    let ffz = net.forward_values(&fz)?;
    Ok(mean_row_dist(&ffz, &fz))
}

/// `mean ‖f(x) − x‖₂`.
pub fn recon_error(net: &MlpNet, x: &Tensor) -> Result<f64> {
    Ok(mean_row_dist(&net.forward_values(x)?, x))
}

fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn project_sorted(a: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().zip(dir).map(|(x, u)| x * u).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over random unit directions of the squared 1D Wasserstein-2 distance
/// between the projected samples (sorted matching).
pub fn sliced_w2<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, projections: usize, rng: &mut R) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(a.shape(), b.shape()));
    }
    if projections == 0 || a.rows() == 0 {
        return Err(Error::Config("sliced_w2 needs at least one projection and one sample".into()));
    }
    let mut total = 0.0;
    for _ in 0..projections {
        let dir = random_direction(a.cols(), rng);
        let (pa, pb) = (project_sorted(a, &dir), project_sorted(b, &dir));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64;
    }
    Ok(total / projections as f64)
}

/// Mean and standard deviation of [`sliced_w2`] over `draws` independent direction sets.
pub fn sliced_w2_spread<R: Rng + ?Sized>(
    a: &Tensor,
    b: &Tensor,
    projections: usize,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let v = (0..draws.max(1)).map(|_| sliced_w2(a, b, projections, rng)).collect::<Result<Vec<_>>>()?;
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    Ok((m, var.sqrt()))
}

/// `2 E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` with all-pairs (V-statistic) means.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim(a.shape(), b.shape()));
    }
    let mean_pair = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += row_dist(x.row(i), y.row(j));
            }
        }
        s / (x.rows() * y.rows()).max(1) as f64
    };
    Ok((2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b)).max(0.0))
}

/// Mean `‖s_learned − s_truth‖₂` at each grid index in `levels`.
pub fn score_residual(
    learned: &dyn ScoreSource,
    truth: &dyn ScoreSource,
    points: &Tensor,
    sched: &NoiseSchedule,
    levels: &[usize],
) -> Result<Vec<f64>> {
    levels
        .iter()
        .map(|&n| {
            let sigma = sched.sigma_at(n)?;
            Ok(mean_row_dist(&learned.score(points, sigma)?, &truth.score(points, sigma)?))
        })
        .collect()
}

/// `mean D(f(x_{t_n}), f(x_{t_s}))` (squared distance) for every `n ∈ 1..=N`.
pub fn flow_residuals<R: Rng + ?Sized>(
    net: &MlpNet,
    x: &Tensor,
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    (1..=sched.intervals())
        .map(|n| {
            let x_tn = sched.noise(x, n, rng)?;
            let x_ts = flow_target(&x_tn, n, teacher, sched, solver)?;
            let (a, b) = (net.forward_values(&x_tn)?, net.forward_values(&x_ts)?);
            let r = (0..a.rows()).map(|i| row_dist(a.row(i), b.row(i)).powi(2)).sum::<f64>() / a.rows().max(1) as f64;
            Ok((n, r))
        })
        .collect()
}

/// Reference trajectories for the error-scaling study: states at every coarse
/// grid index, integrated with a fine Heun solve of `total_steps` steps.
pub fn reference_trajectories(
    starts: &Tensor,
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    total_steps: usize,
) -> Result<Vec<Tensor>> {
    Ok(reference_solve(starts, teacher, sched, total_steps)?.states)
}

/// `sup ‖f(x_{t_n}) − x_ε‖₂` over all trajectory points, plus the mean over
/// trajectories of the per-trajectory supremum.
pub fn trajectory_sup_error(net: &MlpNet, states: &[Tensor]) -> Result<(f64, f64)> {
    let endpoint = states.last().ok_or_else(|| Error::Contract("empty trajectory".into()))?;
    let rows = endpoint.rows();
    let mut per_row = vec![0.0f64; rows];
    for s in states {
        let f = net.forward_values(s)?;
        for (i, r) in per_row.iter_mut().enumerate() {
            *r = r.max(row_dist(f.row(i), endpoint.row(i)));
        }
    }
    let sup = per_row.iter().cloned().fold(0.0, f64::max);
    Ok((sup, per_row.iter().sum::<f64>() / rows.max(1) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub intervals: usize,
    pub solver: Solver,
    pub sup_error: f64,
    pub mean_sup_error: f64,
    pub final_flow_loss: f64,
    /// Training met the flow-loss tolerance; unmet rows are excluded from the fit.
    pub converged: bool,
}

/// Least-squares slope of `log sup_error` against `log N` over converged rows.
pub fn fit_log_slope(rows: &[ScalingRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.converged && r.sup_error > 0.0)
        .map(|r| ((r.intervals as f64).ln(), r.sup_error.ln()))
        .collect();
    log_slope(&pts)
}

pub fn log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Whether sup errors never increase as `N` grows (rows sorted by `N`).
pub fn non_increasing(rows: &[ScalingRow]) -> bool {
    let mut v: Vec<&ScalingRow> = rows.iter().collect();
    v.sort_by_key(|r| r.intervals);
    v.windows(2).all(|w| w[1].sup_error <= w[0].sup_error)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub idem_drift: f64,
    pub recon_error: f64,
    pub sliced_w2: f64,
    pub sliced_w2_std: f64,
    pub sliced_w2_baseline: f64,
    pub energy_distance: f64,
    pub flow_residuals: Vec<(usize, f64)>,
    pub scaling: Vec<ScalingRow>,
}

impl EvalReport {
    /// `(key, value)` pairs in a stable order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("idem_drift".to_string(), self.idem_drift),
            ("recon_error".into(), self.recon_error),
            ("sliced_w2".into(), self.sliced_w2),
            ("sliced_w2_std".into(), self.sliced_w2_std),
            ("sliced_w2_baseline".into(), self.sliced_w2_baseline),
            ("energy_distance".into(), self.energy_distance),
        ];
        for (n, r) in &self.flow_residuals {
            out.push((format!("flow_residual_n{n}"), *r));
        }
        for r in &self.scaling {
            out.push((format!("scaling_sup_error_{}_n{}", r.solver.name(), r.intervals), r.sup_error));
        }
        out
    }

    pub fn all_finite_non_negative(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_finite() && *v >= 0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k},{v:.16e}");
        }
        s
    }

    pub fn to_summary(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Init};
    use crate::schedule::ScheduleParams;
    use crate::score::{GaussianMixture, ZeroScore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn constant_net(c: &[f64]) -> MlpNet {
        let d = c.len();
        let mut net = MlpNet::new(&[d, 3, d], Activation::Silu, false, Init::Zeros, &mut rng(0)).unwrap();
        net.params_mut()[3].values_mut().copy_from_slice(c);
        net
    }

    #[test]
    fn drift_examples() {
        let z = Tensor::randn(&[50, 2], 1.0, &mut rng(1));
        assert_eq!(idem_drift(&constant_net(&[1.0, -1.0]), &z).unwrap(), 0.0);
        let id = MlpNet::generator(2, &[4], Activation::Silu, true, &mut rng(2)).unwrap();
        assert_eq!(idem_drift(&id, &z).unwrap(), 0.0);
        assert_eq!(recon_error(&id, &z).unwrap(), 0.0);

        let net = MlpNet::generator(2, &[16], Activation::Tanh, false, &mut rng(3)).unwrap();
        let d = idem_drift(&net, &z).unwrap();
        let mut want = 0.0;
        for i in 0..z.rows() {
            let fz = net.forward_values(&z.gather_rows(&[i])).unwrap();
            let ffz = net.forward_values(&fz).unwrap();
            want += fz.values().iter().zip(ffz.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
        want /= z.rows() as f64;
        assert!(d > 0.0);
        assert!((d - want).abs() < 1e-12);
        let r = recon_error(&net, &z).unwrap();
        let fz = net.forward_values(&z).unwrap();
        let want: f64 = (0..50).map(|i| row_dist(fz.row(i), z.row(i))).sum::<f64>() / 50.0;
        assert!((r - want).abs() < 1e-12);
    }

    #[test]
    fn sliced_w2_basic_properties() {
        let a = Tensor::randn(&[500, 3], 1.0, &mut rng(4));
        let b = Tensor::randn(&[500, 3], 1.5, &mut rng(5));
        assert_eq!(sliced_w2(&a, &a, 32, &mut rng(6)).unwrap(), 0.0);
        let ab = sliced_w2(&a, &b, 32, &mut rng(7)).unwrap();
        let ba = sliced_w2(&b, &a, 32, &mut rng(7)).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        assert!(sliced_w2(&a, &Tensor::zeros(&[499, 3]), 4, &mut rng(0)).is_err());
    }

    #[test]
    fn sliced_w2_recovers_squared_shift_in_one_dimension() {
        let m = 20_000;
        let delta = 0.7;
        let a = Tensor::randn(&[m, 1], 1.0, &mut rng(8));
        let b = Tensor::randn(&[m, 1], 1.0, &mut rng(9)).map(|v| v + delta);
        let w = sliced_w2(&a, &b, 1, &mut rng(10)).unwrap();
        assert!((w - delta * delta).abs() < 0.03, "{w}");
    }

    #[test]
    fn sliced_w2_is_rotation_invariant() {
        let a = Tensor::randn(&[4000, 2], 1.0, &mut rng(11));
        let b = GaussianMixture::single(vec![1.0, 0.0], 0.5).unwrap().sample(4000, &mut rng(12));
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |t: &Tensor| {
            let mut o = t.clone();
            for i in 0..t.rows() {
                let r = t.row(i);
                o.row_mut(i).copy_from_slice(&[c * r[0] - s * r[1], s * r[0] + c * r[1]]);
            }
            o
        };
        let w0 = sliced_w2(&a, &b, 512, &mut rng(13)).unwrap();
        let w1 = sliced_w2(&rot(&a), &rot(&b), 512, &mut rng(14)).unwrap();
        assert!((w0 - w1).abs() < 0.05 * w0, "{w0} {w1}");
    }

    #[test]
    fn energy_distance_zero_on_identical_and_positive_on_shift() {
        let a = Tensor::randn(&[200, 2], 1.0, &mut rng(15));
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        let b = a.map(|v| v + 1.0);
        assert!(energy_distance(&a, &b).unwrap() > 0.5);
    }

    #[test]
    fn score_residual_examples() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let pts = Tensor::randn(&[100, 2], 1.0, &mut rng(16));
        let r = score_residual(&g, &g, &pts, &s, &[1, 5, 18]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let truth_mag = score_residual(&ZeroScore { dim: 2 }, &g, &pts, &s, &[1, 5, 18]).unwrap();
        assert!(truth_mag.iter().all(|&v| v > 0.5));
    }

    #[test]
    fn zero_teacher_trajectories_give_recon_error() {
        let s = NoiseSchedule::new(ScheduleParams { intervals: 8, ..ScheduleParams::default() }).unwrap();
        let starts = Tensor::randn(&[20, 2], 1.0, &mut rng(17));
        let states = reference_trajectories(&starts, &ZeroScore { dim: 2 }, &s, 800).unwrap();
        assert!(states.iter().all(|t| *t == starts));
        let net = MlpNet::generator(2, &[8], Activation::Silu, false, &mut rng(18)).unwrap();
        let (sup, mean_sup) = trajectory_sup_error(&net, &states).unwrap();
        let f = net.forward_values(&starts).unwrap();
        let max_recon = (0..20).map(|i| row_dist(f.row(i), starts.row(i))).fold(0.0, f64::max);
        assert!((sup - max_recon).abs() < 1e-12);
        assert!((mean_sup - recon_error(&net, &starts).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn slope_fit_and_monotonicity() {
        let rows: Vec<ScalingRow> = [(8, 0.4), (16, 0.2), (32, 0.1)]
            .iter()
            .map(|&(n, e)| ScalingRow {
                intervals: n,
                solver: Solver::Euler,
                sup_error: e,
                mean_sup_error: e,
                final_flow_loss: 0.0,
                converged: true,
            })
            .collect();
        assert!((fit_log_slope(&rows).unwrap() + 1.0).abs() < 1e-12);
        assert!(non_increasing(&rows));
        assert_eq!(fit_log_slope(&rows[..1]), None);
        let mut bad = rows.clone();
        bad[2].sup_error = 0.3;
        assert!(!non_increasing(&bad));
    }

    #[test]
    fn report_serialization() {
        let r = EvalReport { idem_drift: 0.5, flow_residuals: vec![(1, 0.25)], ..EvalReport::default() };
        assert!(r.to_csv().starts_with("metric,value\nidem_drift,"));
        assert!(r.to_summary().contains("flow_residual_n1=0.25"));
        assert!(r.all_finite_non_negative());
    }
}
