//! Trajectory-error scaling study: one generator per grid size `N`.

use std::fmt::Write as _;

use sign_core::data::Dataset;
use sign_core::diffcore::Tensor;
use sign_core::eval::{
    fit_log_slope, flow_residuals, non_increasing, reference_trajectories, trajectory_sup_error, ScalingRow,
};
use sign_core::pfode::Solver;
use sign_core::schedule::NoiseSchedule;
use sign_core::score::ScoreSource;
use sign_core::trainer::{data_scale, RunConfig, Trainer};
use sign_core::{Error, Result};

use crate::context::{load_dataset, make_teacher, reference_draw, stream, RunDir, Summary, STREAM_EVAL};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    /// Rows sorted by solver, then `N`.
    pub rows: Vec<ScalingRow>,
    pub steps: Vec<usize>,
}

impl ScalingReport {
    pub fn rows_for(&self, solver: Solver) -> Vec<ScalingRow> {
        self.rows.iter().filter(|r| r.solver == solver).cloned().collect()
    }

    pub fn slope(&self, solver: Solver) -> Option<f64> {
        fit_log_slope(&self.rows_for(solver))
    }

    pub fn non_increasing(&self, solver: Solver) -> bool {
        non_increasing(&self.rows_for(solver))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("intervals,solver,sup_error,mean_sup_error,final_flow_loss,converged,steps\n");
        for (r, steps) in self.rows.iter().zip(&self.steps) {
            let _ = writeln!(
                s,
                "{},{},{:.16e},{:.16e},{:.16e},{},{}",
                r.intervals,
                r.solver.name(),
                r.sup_error,
                r.mean_sup_error,
                r.final_flow_loss,
                r.converged as u8,
                steps
            );
        }
        s
    }
}

/// Mean of the per-level flow residuals on a fixed evaluation batch.
fn eval_flow_loss(
    net: &sign_core::diffcore::MlpNet,
    pts: &Tensor,
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, STREAM_EVAL);
    let res = flow_residuals(net, pts, teacher, sched, solver, &mut rng)?;
    Ok(res.iter().map(|r| r.1).sum::<f64>() / res.len().max(1) as f64)
}

fn one_run(
    base: &RunConfig,
    ds: &Dataset,
    teacher: &dyn ScoreSource,
    n: usize,
    solver: Solver,
    eval_pts: &Tensor,
    starts: &Tensor,
) -> Result<(ScalingRow, usize)> {
    let sc = &base.scaling;
    let cfg = base
        .with("schedule.N", &n.to_string())?
        .with("flow.solver", solver.name())?
        .with("seed", &base.seed.wrapping_add(n as u64).to_string())?
        .with("train.steps", &sc.max_steps.max(1).to_string())?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let threshold = sc.tolerance * data_scale(&ds.data).powi(2);
    let mut trainer = Trainer::new(&cfg, &ds.data, teacher, None)?;
    let mut flow = f64::INFINITY;
    let mut converged = false;
    while trainer.step_index() < sc.max_steps {
        let next = (trainer.step_index() + sc.check_every).min(sc.max_steps);
        let out = trainer.run(Some(next), &mut ())?;
        if let Some(d) = out.divergence {
            return Err(Error::Divergence { step: d.step, detail: format!("N={n}: {}", d.detail) });
        }
        flow = eval_flow_loss(trainer.net(), eval_pts, teacher, &sched, solver, cfg.seed)?;
        if flow <= threshold {
            converged = true;
            break;
        }
    }
    let states = reference_trajectories(starts, teacher, &sched, sc.reference_steps)?;
    let (sup, mean_sup) = trajectory_sup_error(trainer.net(), &states)?;
    let row = ScalingRow {
        intervals: n,
        solver,
        sup_error: sup,
        mean_sup_error: mean_sup,
        final_flow_loss: flow,
        converged,
    };
    Ok((row, trainer.step_index()))
}

/// Trains one net per `(N, solver)` in the configured sets and measures
/// `sup ‖f(x_{t_n}) − x_ε‖` along fine reference trajectories. Each run uses
/// seed `seed + N`; runs execute on separate threads when `scaling.concurrent`.
pub fn scaling_study(cfg: &RunConfig) -> Result<ScalingReport> {
    let ds = load_dataset(cfg)?;
    let teacher = make_teacher(cfg, &ds)?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let d = ds.dim();
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let starts = Tensor::randn(&[cfg.scaling.trajectories, d], sched.sigma_max(), &mut rng);
    let eval_pts = reference_draw(cfg, &ds, 512, &mut rng)?;

    let mut jobs = Vec::new();
    for &solver in &cfg.scaling.solvers {
        for &n in &cfg.scaling.intervals {
            jobs.push((n, solver));
        }
    }
    let t: &dyn ScoreSource = teacher.as_ref();
    let results: Vec<Result<(ScalingRow, usize)>> = if cfg.scaling.concurrent && jobs.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(n, solver)| {
                    let (ds, eval_pts, starts) = (&ds, &eval_pts, &starts);
                    scope.spawn(move || one_run(cfg, ds, t, n, solver, eval_pts, starts))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("scaling worker panicked".into()))))
                .collect()
        })
    } else {
        jobs.iter().map(|&(n, solver)| one_run(cfg, &ds, t, n, solver, &eval_pts, &starts)).collect()
    };
    let mut rows = Vec::new();
    for r in results {
        rows.push(r?);
    }
    rows.sort_by_key(|(r, _)| (r.solver.name(), r.intervals));
    let (rows, steps) = rows.into_iter().unzip();
    Ok(ScalingReport { rows, steps })
}

pub(crate) fn run_command(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let report = scaling_study(cfg)?;
    dir.write("eval.csv", &report.to_csv())?;
    s.push("rows", report.rows.len());
    for &solver in &cfg.scaling.solvers {
        let name = solver.name();
        match report.slope(solver) {
            Some(v) => s.push(&format!("slope_{name}"), v),
            None => s.push(&format!("slope_{name}"), "none"),
        }
        s.push(&format!("non_increasing_{name}"), report.non_increasing(solver));
        let all = report.rows_for(solver).iter().all(|r| r.converged);
        s.push(&format!("all_converged_{name}"), all);
    }
    Ok(())
}
