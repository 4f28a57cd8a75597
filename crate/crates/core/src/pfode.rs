//! Empirical probability-flow ODE: `dx/dt = -σ(t) σ̇(t) s(x, σ(t))`, integrated
//! backwards in time from `t_N = T` to `t_0 = ε` on the schedule grid.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Euler,
    /// Second-order Heun (explicit trapezoid) steps.
    Heun,
}

impl Solver {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Solver::Euler),
            "heun" => Some(Solver::Heun),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        }
    }
}

/// States of one trajectory, ordered from `t_N` down to `t_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    indices: Vec<usize>,
    states: Tensor,
}

impl Trajectory {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `[N+1, d]` states, row `k` at grid index `indices[k]`.
    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.row(self.states.rows() - 1)
    }
}

/// States of a batch of trajectories: `states[k]` is `[B, d]` at grid index `indices[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrajectory {
    pub indices: Vec<usize>,
    pub states: Vec<Tensor>,
}

impl BatchTrajectory {
    pub fn endpoint(&self) -> &Tensor {
        self.states.last().expect("non-empty")
    }

    /// The trajectory of one batch row.
    pub fn trajectory(&self, row: usize) -> Trajectory {
        let d = self.states[0].cols();
        let mut v = Vec::with_capacity(self.states.len() * d);
        for s in &self.states {
            v.extend_from_slice(s.row(row));
        }
        Trajectory { indices: self.indices.clone(), states: Tensor::new(vec![self.states.len(), d], v).expect("shape") }
    }
}

fn drift(x: &Tensor, t: f64, src: &dyn ScoreSource, sched: &NoiseSchedule, index: usize) -> Result<Tensor> {
    let sigma = sched.sigma(t)?;
    let rate = -sigma * sched.sigma_dot(t)?;
    let s = src.score(x, sigma)?;
    if !s.all_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(s.map(|v| rate * v))
}

fn axpy(x: &Tensor, h: f64, d: &Tensor) -> Tensor {
    x.zip_with(d, |a, b| a + h * b).expect("same shape")
}

/// One solver step between arbitrary times `t_hi > t_lo` (used for sub-stepping).
fn step_between(
    x: &Tensor,
    t_hi: f64,
    t_lo: f64,
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
    index: usize,
) -> Result<Tensor> {
    let h = t_lo - t_hi;
    let d1 = drift(x, t_hi, src, sched, index)?;
    let euler = axpy(x, h, &d1);
    let out = match solver {
        Solver::Euler => euler,
        Solver::Heun => {
            let d2 = drift(&euler, t_lo, src, sched, index)?;
            let avg = d1.zip_with(&d2, |a, b| 0.5 * (a + b))?;
            axpy(x, h, &avg)
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(out)
}

fn check_from(sched: &NoiseSchedule, from: usize) -> Result<()> {
    if from == 0 || from > sched.intervals() {
        return Err(Error::Range { value: from as f64, lo: 1.0, hi: sched.intervals() as f64 });
    }
    Ok(())
}

/// Euler step from grid index `from` to `from - 1`:
/// `x + (t_{n} - t_{n+1}) · (-σ(t_{n+1}) σ̇(t_{n+1}) s(x, σ(t_{n+1})))`.
pub fn euler_step(x: &Tensor, from: usize, src: &dyn ScoreSource, sched: &NoiseSchedule) -> Result<Tensor> {
    solver_step(x, from, src, sched, Solver::Euler)
}

/// One grid step with the chosen solver, from index `from` to `from - 1`.
pub fn solver_step(
    x: &Tensor,
    from: usize,
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
) -> Result<Tensor> {
    check_from(sched, from)?;
    let g = sched.grid();
    step_between(x, g[from], g[from - 1], src, sched, solver, from)
}

/// Target `x_{t_s}` of the flow loss: a single step from index `n` to `n - 1`.
pub fn flow_target(
    x_noised: &Tensor,
    n: usize,
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
) -> Result<Tensor> {
    solver_step(x_noised, n, src, sched, solver)
}

/// Row-wise flow targets where row `i` steps from `levels[i]` to `levels[i] - 1`.
/// Rows sharing a level are evaluated together.
pub fn flow_target_rows(
    x_noised: &Tensor,
    levels: &[usize],
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
) -> Result<Tensor> {
    if levels.len() != x_noised.rows() {
        return Err(Error::dim(&[x_noised.rows()], &[levels.len()]));
    }
    let mut out = Tensor::zeros(x_noised.shape());
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by_key(|&i| levels[i]);
    for group in order.chunk_by(|&a, &b| levels[a] == levels[b]) {
        let x = x_noised.gather_rows(group);
        let y = solver_step(&x, levels[group[0]], src, sched, solver)?;
        for (k, &i) in group.iter().enumerate() {
            out.row_mut(i).copy_from_slice(y.row(k));
        }
    }
    Ok(out)
}

/// Integrates each row of `x_t` from `t_N` to `t_0`, recording every grid state.
pub fn solve_batch(x_t: &Tensor, src: &dyn ScoreSource, sched: &NoiseSchedule, solver: Solver) -> Result<BatchTrajectory> {
    let n = sched.intervals();
    let mut states = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n + 1);
    states.push(x_t.clone());
    indices.push(n);
    let mut x = x_t.clone();
    for from in (1..=n).rev() {
        x = solver_step(&x, from, src, sched, solver)?;
        states.push(x.clone());
        indices.push(from - 1);
    }
    Ok(BatchTrajectory { indices, states })
}

/// Single-trajectory solve.
pub fn solve(x_t: &[f64], src: &dyn ScoreSource, sched: &NoiseSchedule, solver: Solver) -> Result<Trajectory> {
    let x = Tensor::new(vec![1, x_t.len()], x_t.to_vec())?;
    Ok(solve_batch(&x, src, sched, solver)?.trajectory(0))
}

/// High-resolution solve reporting states at the coarse grid of `sched`.
///
/// Each coarse interval is split into `ceil(total_steps / N)` sub-steps that
/// are uniform in `t^{1/ρ}`, and integrated with Heun.
pub fn reference_solve(
    x_t: &Tensor,
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    total_steps: usize,
) -> Result<BatchTrajectory> {
    let n = sched.intervals();
    let sub = total_steps.div_ceil(n).max(1);
    let rho = sched.params().rho;
    let g = sched.grid();
    let mut states = vec![x_t.clone()];
    let mut indices = vec![n];
    let mut x = x_t.clone();
    for from in (1..=n).rev() {
        let (a, b) = (g[from - 1].powf(1.0 / rho), g[from].powf(1.0 / rho));
        let mut t_hi = g[from];
        for k in (0..sub).rev() {
            let t_lo = if k == 0 { g[from - 1] } else { (a + (k as f64 / sub as f64) * (b - a)).powf(rho) };
            x = step_between(&x, t_hi, t_lo, src, sched, Solver::Heun, from)?;
            t_hi = t_lo;
        }
        states.push(x.clone());
        indices.push(from - 1);
    }
    Ok(BatchTrajectory { indices, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, ScheduleParams};
    use crate::score::{GaussianMixture, ZeroScore};

    struct ConstScore(Vec<f64>);
    impl ScoreSource for ConstScore {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn score(&self, x: &Tensor, _s: f64) -> Result<Tensor> {
            let mut out = Tensor::zeros(x.shape());
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&self.0);
            }
            Ok(out)
        }
    }

    struct NanScore;
    impl ScoreSource for NanScore {
        fn dim(&self) -> usize {
            1
        }
        fn score(&self, x: &Tensor, _s: f64) -> Result<Tensor> {
            Ok(x.map(|_| f64::NAN))
        }
    }

    fn sched(n: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams { intervals: n, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_score_keeps_state() {
        let s = sched(5);
        let x = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        assert_eq!(euler_step(&x, 3, &ZeroScore { dim: 2 }, &s).unwrap(), x);
        let tr = solve(&[0.3, -0.4], &ZeroScore { dim: 2 }, &s, Solver::Euler).unwrap();
        for r in 0..tr.states().rows() {
            assert_eq!(tr.states().row(r), &[0.3, -0.4]);
        }
    }

    #[test]
    fn hand_evaluated_euler_step() {
        // identity schedule, t_{n+1} = 1, t_n = 0.5 (uniform grid on [0.5, 1] with N = 1)
        let s = NoiseSchedule::new(ScheduleParams {
            kind: ScheduleKind::Identity,
            eps: 0.5,
            t_max: 1.0,
            intervals: 1,
            rho: 1.0,
            ..Default::default()
        })
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let y = euler_step(&x, 1, &ConstScore(vec![1.0, 0.0]), &s).unwrap();
        assert_eq!(y.values(), &[0.5, 0.0]);
    }

    #[test]
    fn step_range_and_nonfinite_errors() {
        let s = sched(4);
        let x = Tensor::zeros(&[1, 1]);
        assert!(matches!(flow_target(&x, 0, &ZeroScore { dim: 1 }, &s, Solver::Euler), Err(Error::Range { .. })));
        assert!(matches!(euler_step(&x, 5, &ZeroScore { dim: 1 }, &s), Err(Error::Range { .. })));
        assert!(matches!(euler_step(&x, 2, &NanScore, &s), Err(Error::NonFinite { index: 2 })));
    }

    #[test]
    fn flow_target_is_one_euler_step_and_contracts() {
        let s = sched(10);
        let g = GaussianMixture::single(vec![0.5, 0.5], 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![2.0, -1.0], vec![0.0, 3.0]]).unwrap();
        for n in 1..=10 {
            let a = flow_target(&x, n, &g, &s, Solver::Euler).unwrap();
            assert_eq!(a, euler_step(&x, n, &g, &s).unwrap());
            for r in 0..2 {
                let before: f64 = x.row(r).iter().map(|v| (v - 0.5).powi(2)).sum();
                let after: f64 = a.row(r).iter().map(|v| (v - 0.5).powi(2)).sum();
                assert!(after < before);
            }
        }
    }

    #[test]
    fn row_targets_match_grouped_steps() {
        let s = sched(6);
        let g = GaussianMixture::single(vec![0.2, 0.1], 0.5).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]]).unwrap();
        let levels = [3, 1, 3];
        let y = flow_target_rows(&x, &levels, &g, &s, Solver::Euler).unwrap();
        for (i, &n) in levels.iter().enumerate() {
            let xi = x.gather_rows(&[i]);
            assert_eq!(y.row(i), euler_step(&xi, n, &g, &s).unwrap().values());
        }
    }

    #[test]
    fn n_one_trajectory_has_two_states() {
        let s = sched(1);
        let g = GaussianMixture::single(vec![0.0], 1.0).unwrap();
        let tr = solve(&[1.0], &g, &s, Solver::Euler).unwrap();
        assert_eq!(tr.indices(), &[1, 0]);
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(tr.endpoint(), euler_step(&x, 1, &g, &s).unwrap().values());
    }

    #[test]
    fn reference_matches_closed_form_gaussian_flow() {
        // For N(0, s²I) data with σ(t) = t the exact flow scales x by sqrt(s²+t²).
        let s2: f64 = 1.0;
        let g = GaussianMixture::single(vec![0.0, 0.0], s2.sqrt()).unwrap();
        let sc = sched(8);
        let x = Tensor::from_rows(&[vec![1.3, -0.4]]).unwrap();
        let r = reference_solve(&x, &g, &sc, 10_000).unwrap();
        let factor = (s2 + 0.002f64.powi(2)).sqrt() / (s2 + 1.0).sqrt();
        for (a, b) in r.endpoint().values().iter().zip(x.values()) {
            assert!((a - b * factor).abs() < 1e-7, "{a} vs {}", b * factor);
        }
    }

    fn fitted_slope(ns: &[usize], errs: &[f64]) -> f64 {
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn euler_is_first_order() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.3, -0.4]]).unwrap();
        let ns = [8, 16, 32, 64];
        let errs: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let sc = sched(n);
                let r = reference_solve(&x, &g, &sc, 10_000).unwrap();
                let e = solve_batch(&x, &g, &sc, Solver::Euler).unwrap();
                e.endpoint().values().iter().zip(r.endpoint().values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let slope = fitted_slope(&ns, &errs);
        assert!((-1.2..=-0.8).contains(&slope), "{slope}");
    }
}
