//! One function per subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sign_core::data::{save_samples, write_csv, Dataset};
use sign_core::diffcore::{MlpNet, Tensor};
use sign_core::eval::{energy_distance, flow_residuals, idem_drift, recon_error, sliced_w2, EvalReport};
use sign_core::pfode::solve_batch;
use sign_core::sampler::{sample_multistep_edit, sample_recursive, sample_single, EditSchedule, Mask};
use sign_core::schedule::NoiseSchedule;
use sign_core::score::ScoreSource;
use sign_core::trainer::{
    data_scale, pregenerate_pairs, pretrain_score, score_checkpoint, Checkpoint, MetricsRow, Mode, PairStore,
    RunConfig, SampleMode, TrainObserver, Trainer, METRICS_HEADER,
};
use sign_core::{Error, Result};

use crate::context::{
    load_dataset, load_model, make_teacher, reference_draw, sampler_tol, stream, RunDir, Summary, STREAM_EVAL,
    STREAM_HELDOUT, STREAM_PAIRS,
};
use crate::Command;

/// Runs `cmd` and writes its artifacts under `out`. The summary is also
/// written to `out/summary.txt`, and the resolved config to `out/resolved.cfg`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let dir = RunDir::create(out)?;
    dir.write("resolved.cfg", &cfg.to_text())?;
    let mut summary = Summary::default();
    summary.push("command", cmd.name());
    summary.push("seed", cfg.seed);
    summary.push("config_hash", format!("{:016x}", cfg.hash()));
    let result = match cmd {
        Command::GenData => gen_data(cfg, &dir, &mut summary),
        Command::PretrainScore => pretrain(cfg, &dir, &mut summary),
        Command::PregenPairs => pregen(cfg, &dir, &mut summary),
        Command::Train => train(cfg, &dir, &mut summary),
        Command::Sample => sample(cfg, &dir, &mut summary),
        Command::Edit => edit(cfg, &dir, &mut summary),
        Command::Eval => eval(cfg, &dir, &mut summary),
        Command::Trace => trace(cfg, &dir, &mut summary),
        Command::ScalingStudy => crate::scaling::run_command(cfg, &dir, &mut summary),
    };
    if let Err(e) = &result {
        summary.push("status", "error");
        summary.push("error_category", e.category());
    } else {
        summary.push("status", "ok");
    }
    dir.write("summary.txt", &summary.to_text())?;
    result.map(|_| summary)
}

fn gen_data(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    save_samples(&dir.path("samples/data.csv"), &ds.data, false)?;
    if let Some(shape) = ds.image_shape {
        dir.write_pgm_grid("samples/data.pgm", &ds.data, shape)?;
    }
    s.push("count", ds.data.rows());
    s.push("dim", ds.dim());
    s.push("data_scale", data_scale(&ds.data));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    s.push("normalization_shift", fmt(&ds.normalization.shift));
    s.push("normalization_scale", fmt(&ds.normalization.scale));
    Ok(())
}

fn pretrain(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (score, last) = pretrain_score(cfg, &ds.data)?;
    score_checkpoint(&score, cfg, cfg.score.steps).save(&dir.path("checkpoints/score.ckpt"))?;
    s.push("steps", cfg.score.steps);
    s.push("final_dsm_loss", last);
    if let Some(gm) = &ds.mixture {
        let sched = NoiseSchedule::new(cfg.schedule)?;
        let pts = reference_draw(cfg, &ds, 512, &mut stream(cfg.seed, STREAM_EVAL))?;
        let levels: Vec<usize> = (0..=sched.intervals()).collect();
        let res = sign_core::eval::score_residual(&score, gm, &pts, &sched, &levels)?;
        let mut csv = String::from("grid_index,sigma,score_residual\n");
        for (n, r) in levels.iter().zip(&res) {
            csv.push_str(&format!("{n},{:.16e},{r:.16e}\n", sched.sigma_at(*n)?));
        }
        dir.write("eval.csv", &csv)?;
        s.push("mean_score_residual", res.iter().sum::<f64>() / res.len() as f64);
    }
    Ok(())
}

fn pairs_for(cfg: &RunConfig, ds: &Dataset, teacher: &dyn ScoreSource) -> Result<(PairStore, usize)> {
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let (store, failed) =
        pregenerate_pairs(teacher, &sched, cfg.reg_pair_count, cfg.loss.solver, &mut stream(cfg.seed, STREAM_PAIRS))?;
    if store.dim() != ds.dim() {
        return Err(Error::Dimension { expected: vec![ds.dim()], got: vec![store.dim()] });
    }
    Ok((store, failed))
}

fn pregen(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let teacher = make_teacher(cfg, &ds)?;
    let (store, failed) = pairs_for(cfg, &ds, teacher.as_ref())?;
    store.save(&dir.path("checkpoints/pairs.bin"))?;
    s.push("count", store.len());
    s.push("failures", failed);
    Ok(())
}

/// Streams metrics rows and checkpoints into the run directory.
struct DirObserver<'a> {
    metrics: BufWriter<File>,
    dir: &'a RunDir,
}

impl TrainObserver for DirObserver<'_> {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv_line())?;
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&self.dir.path(&format!("checkpoints/step_{:08}.ckpt", ckpt.step)))
    }
}

fn train(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let zero = sign_core::score::ZeroScore { dim: ds.dim() };
    let teacher: Box<dyn ScoreSource> = match cfg.mode {
        Mode::Sign => make_teacher(cfg, &ds)?,
        Mode::Ign => Box::new(zero),
    };
    let pairs = if cfg.mode == Mode::Sign && cfg.weights.lambda_r > 0.0 {
        Some(match &cfg.reg_pairs {
            Some(p) => PairStore::load(p)?,
            None => pairs_for(cfg, &ds, teacher.as_ref())?.0,
        })
    } else {
        None
    };
    let cfg_run = if cfg.mode == Mode::Ign { cfg.with("train.clip", "false")? } else { cfg.clone() };
    let mut trainer = match &cfg.train.resume {
        Some(p) => Trainer::resume(&cfg_run, &ds.data, teacher.as_ref(), pairs.as_ref(), &Checkpoint::load(p)?)?,
        None => Trainer::new(&cfg_run, &ds.data, teacher.as_ref(), pairs.as_ref())?,
    };
    let mut metrics = BufWriter::new(File::create(dir.path("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut obs = DirObserver { metrics, dir };
    let outcome = trainer.run(None, &mut obs)?;
    obs.metrics.flush()?;
    trainer.checkpoint().save(&dir.path("checkpoints/final.ckpt"))?;

    s.push("mode", if cfg.mode == Mode::Sign { "sign" } else { "ign" });
    s.push("steps_done", outcome.steps_done);
    if let Some(r) = outcome.last_report {
        for (k, v) in [
            ("final_l_recon", r.recon),
            ("final_l_idem", r.idem),
            ("final_l_tight", r.tight),
            ("final_l_flow", r.flow),
            ("final_l_denoise", r.denoise),
            ("final_l_reg", r.reg),
            ("final_total", r.total),
        ] {
            s.push(k, v);
        }
    }
    let w = outcome.weights;
    s.push("lambda_f", w.lambda_f);
    s.push("lambda_d", w.lambda_d);
    s.push("lambda_r", w.lambda_r);
    s.push("lambda_n", w.lambda_n);
    s.push("non_finite_totals", outcome.stats.non_finite);
    s.push("overshoots", outcome.stats.overshoots);
    s.push("negative_term_steps", outcome.stats.negative_terms);
    s.push("max_abs_total", outcome.stats.max_abs_total);
    s.push("diverged", outcome.divergence.is_some());

    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let z = Tensor::randn(&[cfg.eval.samples, ds.dim()], sched.sigma_max(), &mut rng);
    let drift = idem_drift(&outcome.net, &z);
    let recon = recon_error(&outcome.net, &ds.data);
    match (drift, recon) {
        (Ok(d), Ok(r)) => {
            s.push("idem_drift", d);
            s.push("recon_error", r);
        }
        _ => s.push("idem_drift", f64::NAN),
    }

    if let Some(d) = outcome.divergence {
        s.push("divergence_step", d.step);
        s.push("divergence_detail", d.detail.replace('\n', " "));
        if cfg.mode == Mode::Sign {
            return Err(Error::Divergence { step: d.step, detail: d.detail });
        }
    }
    Ok(())
}

fn sample(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let net = load_model(cfg, ds.dim())?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = Tensor::randn(&[cfg.sample.count, ds.dim()], sched.sigma_max(), &mut rng);
    let out = match cfg.sample.mode {
        SampleMode::Single => sample_single(&net, &z)?,
        SampleMode::Recursive => {
            let r = sample_recursive(&net, &z, cfg.sample.max_iters, sampler_tol(cfg, &ds))?;
            s.push("iterations", r.iterations);
            s.push("final_drift", r.drift_trace.last().copied().unwrap_or(0.0));
            r.samples
        }
        SampleMode::Multistep => {
            let edit = edit_schedule(cfg, &sched)?;
            sample_multistep_edit(&net, &z, &Mask::ones(ds.dim()), &edit, &mut rng)?
        }
    };
    save_samples(&dir.path("samples/samples.csv"), &out, true)?;
    if let Some(shape) = ds.image_shape {
        dir.write_pgm_grid("samples/samples.pgm", &out, shape)?;
    }
    s.push("count", out.rows());
    s.push("mode", cfg.get("sample.mode").unwrap_or("single"));
    s.push("all_finite", out.all_finite());
    Ok(())
}

/// Geometric schedule from `edit.sigma_hi` (default `0.5·σ_max`) down to `edit.sigma_lo` (default `σ_min`).
pub fn edit_schedule(cfg: &RunConfig, sched: &NoiseSchedule) -> Result<EditSchedule> {
    let hi = cfg.edit.sigma_hi.unwrap_or(0.5 * sched.sigma_max());
    let lo = cfg.edit.sigma_lo.unwrap_or(sched.sigma_min().max(1e-6));
    EditSchedule::geometric(cfg.edit.steps, hi, lo)
}

/// Outcome of a masked-editing run against known ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EditReport {
    pub masked_mse_input: f64,
    pub masked_mse_edited: f64,
    pub unmasked_bitwise: bool,
}

fn masked_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
    let d = a.cols();
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..a.rows() {
        let m = mask.row(if mask.rows() == 1 { 0 } else { i });
        for j in 0..d {
            if m[j] > 0.0 {
                s += m[j] * (a.row(i)[j] - b.row(i)[j]).powi(2);
                n += m[j];
            }
        }
    }
    if n > 0.0 {
        s / n
    } else {
        0.0
    }
}

/// Default mask: checkerboard for images, alternating coordinates otherwise.
pub fn default_mask(cfg: &RunConfig, ds: &Dataset) -> Mask {
    match ds.image_shape {
        Some((h, w)) => Mask::checkerboard(h, w, cfg.edit.block),
        None => {
            let v = (0..ds.dim()).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
            Mask::new(Tensor::new(vec![ds.dim()], v).expect("shape")).expect("binary mask")
        }
    }
}

/// Blanks the masked coordinates of `truth` (sets them to zero), edits, and
/// scores the masked error before and after.
pub fn edit_experiment(
    net: &MlpNet,
    truth: &Tensor,
    mask: &Mask,
    edit: &EditSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, EditReport)> {
    let blank = Tensor::zeros(truth.shape());
    let input = mask.blend(&blank, truth)?;
    let edited = sample_multistep_edit(net, &input, mask, edit, rng)?;
    let full = expand_mask(mask, truth.rows());
    let mut bitwise = true;
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            if full.row(i)[j] == 0.0 && edited.row(i)[j].to_bits() != input.row(i)[j].to_bits() {
                bitwise = false;
            }
        }
    }
    let report = EditReport {
        masked_mse_input: masked_mse(&input, truth, &full),
        masked_mse_edited: masked_mse(&edited, truth, &full),
        unmasked_bitwise: bitwise,
    };
    Ok((input, edited, report))
}

fn expand_mask(mask: &Mask, rows: usize) -> Tensor {
    let m = mask.values();
    if m.rows() == rows {
        return m.clone();
    }
    m.gather_rows(&vec![0; rows])
}

fn edit(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let net = load_model(cfg, ds.dim())?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let schedule = edit_schedule(cfg, &sched)?;
    let mask = match &cfg.edit.mask {
        Some(p) => Mask::new(sign_core::data::load_samples(p)?)?,
        None => default_mask(cfg, &ds),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (input, edited) = match &cfg.edit.input {
        Some(p) => {
            let input = sign_core::data::load_samples(p)?;
            let edited = sample_multistep_edit(&net, &input, &mask, &schedule, &mut rng)?;
            (input, edited)
        }
        None => {
            let truth = reference_draw(cfg, &ds, cfg.edit.count, &mut stream(cfg.seed, STREAM_HELDOUT))?;
            let (input, edited, rep) = edit_experiment(&net, &truth, &mask, &schedule, &mut rng)?;
            save_samples(&dir.path("samples/truth.csv"), &truth, true)?;
            if let Some(shape) = ds.image_shape {
                dir.write_pgm_grid("samples/truth.pgm", &truth, shape)?;
            }
            let ratio = rep.masked_mse_edited / rep.masked_mse_input.max(f64::MIN_POSITIVE);
            dir.write(
                "eval.csv",
                &format!(
                    "metric,value\nmasked_mse_input,{:.16e}\nmasked_mse_edited,{:.16e}\nmasked_mse_ratio,{ratio:.16e}\nunmasked_bitwise,{}\n",
                    rep.masked_mse_input, rep.masked_mse_edited, rep.unmasked_bitwise as u8
                ),
            )?;
            s.push("masked_mse_input", rep.masked_mse_input);
            s.push("masked_mse_edited", rep.masked_mse_edited);
            s.push("masked_mse_ratio", ratio);
            (input, edited)
        }
    };
    let full = expand_mask(&mask, input.rows());
    let preserved = (0..input.rows()).all(|i| {
        (0..input.cols()).all(|j| full.row(i)[j] != 0.0 || edited.row(i)[j].to_bits() == input.row(i)[j].to_bits())
    });
    save_samples(&dir.path("samples/input.csv"), &input, true)?;
    save_samples(&dir.path("samples/edited.csv"), &edited, true)?;
    if let Some(shape) = ds.image_shape {
        dir.write_pgm_grid("samples/input.pgm", &input, shape)?;
        dir.write_pgm_grid("samples/edited.pgm", &edited, shape)?;
    }
    s.push("count", edited.rows());
    s.push("unmasked_bitwise", preserved);
    Ok(())
}

/// The evaluation report of `net` against the configured data.
///
/// Sliced W2 is averaged over `eval.draws` independent triples (generated
/// set, reference set, second reference set); the baseline compares the two
/// reference sets, so both sides see the same sample size and projection count.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, net: &MlpNet, teacher: Option<&dyn ScoreSource>) -> Result<EvalReport> {
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let (m, d) = (cfg.eval.samples, ds.dim());
    let mut report = EvalReport::default();

    let mut sw = Vec::with_capacity(cfg.eval.draws);
    let mut base = Vec::with_capacity(cfg.eval.draws);
    let mut drift = 0.0;
    let mut last_samples = None;
    for _ in 0..cfg.eval.draws {
        let z = Tensor::randn(&[m, d], sched.sigma_max(), &mut rng);
        let samples = net.forward_values(&z)?;
        drift += idem_drift(net, &z)? / cfg.eval.draws as f64;
        let r1 = reference_draw(cfg, ds, m, &mut rng)?;
        let r2 = reference_draw(cfg, ds, m, &mut rng)?;
        sw.push(sliced_w2(&samples, &r1, cfg.eval.projections, &mut rng)?);
        base.push(sliced_w2(&r1, &r2, cfg.eval.projections, &mut rng)?);
        last_samples = Some((samples, r1));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report.idem_drift = drift;
    report.sliced_w2 = mean(&sw);
    let mu = report.sliced_w2;
    report.sliced_w2_std = (sw.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / sw.len() as f64).sqrt();
    report.sliced_w2_baseline = mean(&base);

    let sub: Vec<usize> = (0..ds.data.rows().min(m)).collect();
    report.recon_error = recon_error(net, &ds.data.gather_rows(&sub))?;

    if let Some((samples, r1)) = last_samples {
        let k = cfg.eval.energy_samples.min(m);
        if k > 0 {
            let idx: Vec<usize> = (0..k).collect();
            report.energy_distance = energy_distance(&samples.gather_rows(&idx), &r1.gather_rows(&idx))?;
        }
    }
    if let Some(t) = teacher {
        let pts = reference_draw(cfg, ds, 512.min(m), &mut rng)?;
        report.flow_residuals = flow_residuals(net, &pts, t, &sched, cfg.loss.solver, &mut rng)?;
    }
    Ok(report)
}

fn eval(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let net = load_model(cfg, ds.dim())?;
    let teacher = make_teacher(cfg, &ds).ok();
    let report = evaluate(cfg, &ds, &net, teacher.as_deref())?;
    dir.write("eval.csv", &report.to_csv())?;
    for (k, v) in report.entries() {
        s.push(&k, v);
    }
    let scale = data_scale(&ds.data);
    s.push("data_scale", scale);
    s.push("idem_drift_over_scale", report.idem_drift / scale);
    s.push("sliced_w2_ratio", report.sliced_w2 / report.sliced_w2_baseline.max(f64::MIN_POSITIVE));
    s.push("all_finite_non_negative", report.all_finite_non_negative());
    Ok(())
}

fn trace(cfg: &RunConfig, dir: &RunDir, s: &mut Summary) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let teacher = make_teacher(cfg, &ds)?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = Tensor::randn(&[cfg.trace_count, ds.dim()], sched.sigma_max(), &mut rng);
    let tr = solve_batch(&starts, teacher.as_ref(), &sched, cfg.loss.solver)?;
    let mut w = BufWriter::new(File::create(dir.path("samples/trace.csv"))?);
    let cols: Vec<String> = (0..ds.dim()).map(|j| format!("x_{j}")).collect();
    writeln!(w, "traj_id,grid_index,t,{}", cols.join(","))?;
    for row in 0..starts.rows() {
        for (n, state) in tr.indices.iter().zip(&tr.states) {
            let t = sched.time_at(*n)?;
            let xs: Vec<String> = state.row(row).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{row},{n},{t:.16e},{}", xs.join(","))?;
        }
    }
    w.flush()?;
    let mut ew = BufWriter::new(File::create(dir.path("samples/endpoints.csv"))?);
    write_csv(&mut ew, tr.endpoint(), true)?;
    ew.flush()?;
    s.push("trajectories", starts.rows());
    s.push("intervals", sched.intervals());
    s.push("solver", cfg.loss.solver.name());
    Ok(())
}
