//! Training objectives for idempotent generators.
//!
//! Every loss is built on a caller-owned [`Graph`] so that several terms can
//! share one tape and one backward pass. Terms reduce with a mean over rows.

use rand::Rng;

use crate::diffcore::{BoundNet, FrozenView, Graph, MlpNet, Tensor, Var};
use crate::error::{Error, Result};
use crate::pfode::{flow_target_rows, Solver};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreSource;

/// Distance `D(a, b)` between matched rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    #[default]
    SquaredL2,
    L2,
}

impl Distance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sq_l2" | "squared_l2" => Some(Distance::SquaredL2),
            "l2" => Some(Distance::L2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distance::SquaredL2 => "sq_l2",
            Distance::L2 => "l2",
        }
    }

    /// Per-row distance on plain values.
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::SquaredL2 => sq,
            Distance::L2 => sq.sqrt(),
        }
    }
}

/// Composition order used by the idempotence term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IdemOrder {
    /// `D(f_θ(z), f_θ′(f_θ(z)))`: gradient reaches θ through the inner call.
    #[default]
    FrozenOuter,
    /// `D(f_θ(z), f_θ(f_θ′(z)))`: the inner call is frozen.
    FrozenInner,
}

impl IdemOrder {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen_outer" => Some(IdemOrder::FrozenOuter),
            "frozen_inner" => Some(IdemOrder::FrozenInner),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IdemOrder::FrozenOuter => "frozen_outer",
            IdemOrder::FrozenInner => "frozen_inner",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub lambda_n: f64,
    /// Tightness weight, IGN only.
    pub lambda_t: f64,
    /// Idempotence weight, IGN only.
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_f: 1.0, lambda_d: 0.0, lambda_r: 0.0, lambda_n: 0.0, lambda_t: 0.1, lambda_i: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("loss.lambda_f", self.lambda_f),
            ("loss.lambda_d", self.lambda_d),
            ("loss.lambda_r", self.lambda_r),
            ("loss.lambda_n", self.lambda_n),
            ("loss.lambda_t", self.lambda_t),
            ("loss.lambda_i", self.lambda_i),
        ];
        for (k, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        for (k, v) in &all[..4] {
            if *v > 1.0 {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one step. Inactive terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub idem: f64,
    pub tight: f64,
    pub flow: f64,
    pub dmd_surrogate: f64,
    pub denoise: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LossReport {
    /// The bounded SIGN terms, which must all be finite and non-negative.
    pub fn sign_terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_recon", self.recon),
            ("l_idem", self.idem),
            ("l_flow", self.flow),
            ("l_denoise", self.denoise),
            ("l_reg", self.reg),
        ]
    }

    pub fn check_sign_terms(&self) -> Result<()> {
        for (k, v) in self.sign_terms() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!("{k} = {v} is not a finite non-negative value")));
            }
        }
        Ok(())
    }
}

/// Options shared by the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossOptions {
    pub distance: Distance,
    pub idem_order: IdemOrder,
    /// Smooth bound `-a·tanh(D/a)` on the tightness term when set.
    pub tight_clamp: Option<f64>,
    pub solver: Solver,
}

/// The live generator bound on a graph together with its frozen counterpart.
pub struct Models<'a> {
    net: &'a MlpNet,
    live: &'a BoundNet,
    frozen: FrozenView<'a>,
    frozen_bound: BoundNet,
}

impl<'a> Models<'a> {
    /// `frozen` is usually a copy of `net` taken at the start of the step.
    pub fn new(g: &mut Graph, net: &'a MlpNet, live: &'a BoundNet, frozen: &'a MlpNet) -> Self {
        let frozen = FrozenView::new(frozen);
        let frozen_bound = frozen.bind(g);
        Models { net, live, frozen, frozen_bound }
    }

    pub fn f(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.net.forward(g, self.live, x)
    }

    pub fn f_frozen(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.frozen.forward(g, &self.frozen_bound, x)
    }

    pub fn frozen(&self) -> FrozenView<'a> {
        self.frozen
    }
}

/// Mean over rows of `D(a_i, b_i)`.
pub fn distance(g: &mut Graph, a: Var, b: Var, dist: Distance) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let rows = g.shape(diff).first().copied().unwrap_or(1).max(1);
    match dist {
        Distance::SquaredL2 => {
            let s = g.sum_squares(diff);
            Ok(g.scale(s, 1.0 / rows as f64))
        }
        Distance::L2 => {
            let r = g.row_norms(diff);
            Ok(g.mean(r))
        }
    }
}

/// `mean D(x, f_θ(x))`.
pub fn recon_loss(g: &mut Graph, m: &Models, x: &Tensor, dist: Distance) -> Result<Var> {
    let xv = g.constant(x);
    let fx = m.f(g, xv)?;
    distance(g, xv, fx, dist)
}

/// Idempotence term on generator inputs `z`.
pub fn idem_loss(g: &mut Graph, m: &Models, z: &Tensor, dist: Distance, order: IdemOrder) -> Result<Var> {
    let zv = g.constant(z);
    let fz = m.f(g, zv)?;
    idem_from_sample(g, m, zv, fz, dist, order)
}

fn idem_from_sample(g: &mut Graph, m: &Models, zv: Var, fz: Var, dist: Distance, order: IdemOrder) -> Result<Var> {
    let outer = match order {
        IdemOrder::FrozenOuter => m.f_frozen(g, fz)?,
        IdemOrder::FrozenInner => {
            let inner = m.f_frozen(g, zv)?;
            let inner = g.stop_gradient(inner);
            m.f(g, inner)?
        }
    };
    distance(g, fz, outer, dist)
}

/// Tightness term `-mean D(f_θ(f_θ′(z)), f_θ′(z))`, gradient through the outer call only.
pub fn tight_loss(g: &mut Graph, m: &Models, z: &Tensor, dist: Distance, clamp: Option<f64>) -> Result<Var> {
    let zv = g.constant(z);
    let inner = m.f_frozen(g, zv)?;
    let inner = g.stop_gradient(inner);
    let proj = m.f(g, inner)?;
    let d = distance(g, proj, inner, dist)?;
    match clamp {
        None => Ok(g.scale(d, -1.0)),
        Some(a) if a > 0.0 => {
            let s = g.scale(d, 1.0 / a);
            let t = g.activation(s, crate::diffcore::Activation::Tanh);
            Ok(g.scale(t, -a))
        }
        Some(a) => Err(Error::Config(format!("tightness clamp must be > 0, got {a}"))),
    }
}

/// Noised inputs `x_{t_n}` and one-step PF-ODE targets `x_{t_s}` for per-row levels.
pub fn flow_pair<R: Rng + ?Sized>(
    x: &Tensor,
    levels: &[usize],
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    solver: Solver,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    check_levels(levels, sched)?;
    let x_tn = sched.noise_levels(x, levels, rng)?;
    let x_ts = flow_target_rows(&x_tn, levels, src, sched, solver)?;
    Ok((x_tn, x_ts))
}

/// `mean D(f_θ(x_{t_n}), f_θ′(x_{t_s}))` on precomputed pairs.
pub fn flow_loss_on(g: &mut Graph, m: &Models, x_tn: &Tensor, x_ts: &Tensor, dist: Distance) -> Result<Var> {
    let a = g.constant(x_tn);
    let fa = m.f(g, a)?;
    flow_from_output(g, m, fa, x_ts, dist)
}

fn flow_from_output(g: &mut Graph, m: &Models, f_tn: Var, x_ts: &Tensor, dist: Distance) -> Result<Var> {
    let target = g.constant(&m.frozen().forward_values(x_ts)?);
    distance(g, f_tn, target, dist)
}

/// Flow loss with noising and the teacher step done here.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    m: &Models,
    x: &Tensor,
    levels: &[usize],
    src: &dyn ScoreSource,
    sched: &NoiseSchedule,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<Var> {
    let (x_tn, x_ts) = flow_pair(x, levels, src, sched, opts.solver, rng)?;
    flow_loss_on(g, m, &x_tn, &x_ts, opts.distance)
}

/// `mean D(x, f_θ(x_{t_n}))`.
pub fn denoise_loss_on(g: &mut Graph, m: &Models, x: &Tensor, x_tn: &Tensor, dist: Distance) -> Result<Var> {
    let a = g.constant(x_tn);
    let fa = m.f(g, a)?;
    let xv = g.constant(x);
    distance(g, xv, fa, dist)
}

pub fn denoise_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    m: &Models,
    x: &Tensor,
    levels: &[usize],
    sched: &NoiseSchedule,
    dist: Distance,
    rng: &mut R,
) -> Result<Var> {
    check_levels(levels, sched)?;
    let x_tn = sched.noise_levels(x, levels, rng)?;
    denoise_loss_on(g, m, x, &x_tn, dist)
}

/// `mean D(f_θ(z_i), y_i)` over given pairs.
pub fn reg_loss(g: &mut Graph, m: &Models, z: &Tensor, y: &Tensor, dist: Distance) -> Result<Var> {
    if z.shape() != y.shape() {
        return Err(Error::dim(z.shape(), y.shape()));
    }
    if z.rows() == 0 {
        return Err(Error::Config("regression loss needs a non-empty pair store".into()));
    }
    let zv = g.constant(z);
    let fz = m.f(g, zv)?;
    let yv = g.constant(y);
    distance(g, fz, yv, dist)
}

/// Score evaluated row-wise at per-row grid levels.
pub fn score_rows(src: &dyn ScoreSource, sched: &NoiseSchedule, x: &Tensor, levels: &[usize]) -> Result<Tensor> {
    if levels.len() != x.rows() {
        return Err(Error::dim(&[x.rows()], &[levels.len()]));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by_key(|&i| levels[i]);
    for group in order.chunk_by(|&a, &b| levels[a] == levels[b]) {
        let s = src.score(&x.gather_rows(group), sched.sigma_at(levels[group[0]])?)?;
        for (k, &i) in group.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(k));
        }
    }
    Ok(out)
}

/// Pseudo-gradient `g_i = s_learned(y_i) - s_teacher(y_i)` with `y = O(f_θ(z), t_n)`.
///
/// `fz` are generator outputs; the noise draw is a constant, so the gradient
/// with respect to `f_θ(z)` is `g` itself.
pub fn dmd_pseudo_grad<R: Rng + ?Sized>(
    fz: &Tensor,
    levels: &[usize],
    learned: &dyn ScoreSource,
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    check_levels(levels, sched)?;
    let y = sched.noise_levels(fz, levels, rng)?;
    let a = score_rows(learned, sched, &y, levels)?;
    let b = score_rows(teacher, sched, &y, levels)?;
    a.zip_with(&b, |p, q| p - q)
}

/// Surrogate `mean_i <g_i, f_θ(z_i)>` with `g` detached; its gradient is the injected one.
pub fn dmd_surrogate(g: &mut Graph, fz: Var, pseudo: &Tensor) -> Result<Var> {
    let rows = g.shape(fz).first().copied().unwrap_or(1).max(1);
    let gv = g.constant(pseudo);
    let d = g.dot(gv, fz)?;
    Ok(g.scale(d, 1.0 / rows as f64))
}

/// DMD contribution from generator inputs `z`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_grad<R: Rng + ?Sized>(
    g: &mut Graph,
    m: &Models,
    z: &Tensor,
    levels: &[usize],
    learned: &dyn ScoreSource,
    teacher: &dyn ScoreSource,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let zv = g.constant(z);
    let fz = m.f(g, zv)?;
    let pseudo = dmd_pseudo_grad(&g.tensor(fz), levels, learned, teacher, sched, rng)?;
    dmd_surrogate(g, fz, &pseudo)
}

fn check_levels(levels: &[usize], sched: &NoiseSchedule) -> Result<()> {
    let n = sched.intervals();
    match levels.iter().find(|&&l| l == 0 || l > n) {
        Some(&l) => Err(Error::Range { value: l as f64, lo: 1.0, hi: n as f64 }),
        None => Ok(()),
    }
}

/// Everything random that one SIGN step consumes, drawn up front.
///
/// The noise for `x_{t_n}` is always drawn, whether or not flow or denoising
/// is active, so ablations see the same stream.
#[derive(Clone, Debug)]
pub struct SignBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub levels: Vec<usize>,
    pub x_tn: Tensor,
    pub x_ts: Option<Tensor>,
    pub dmd: Option<Tensor>,
    pub pairs: Option<(Tensor, Tensor)>,
}

/// Score sources available to a SIGN step.
#[derive(Clone, Copy)]
pub struct Sources<'a> {
    pub teacher: &'a dyn ScoreSource,
    pub learned: Option<&'a dyn ScoreSource>,
}

impl SignBatch {
    /// Builds the per-step inputs. Targets are only computed for active terms.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare<R: Rng + ?Sized>(
        x: Tensor,
        z: Tensor,
        levels: Vec<usize>,
        net: &MlpNet,
        weights: &LossWeights,
        sources: Sources,
        sched: &NoiseSchedule,
        opts: &LossOptions,
        pairs: Option<(Tensor, Tensor)>,
        rng: &mut R,
    ) -> Result<Self> {
        check_levels(&levels, sched)?;
        let x_tn = sched.noise_levels(&x, &levels, rng)?;
        let x_ts = if weights.lambda_f > 0.0 {
            Some(flow_target_rows(&x_tn, &levels, sources.teacher, sched, opts.solver)?)
        } else {
            None
        };
        let dmd = if weights.lambda_d > 0.0 {
            let learned = sources
                .learned
                .ok_or_else(|| Error::Config("loss.lambda_d > 0 needs a learned score (dmd.enabled = true)".into()))?;
            let fz = net.forward_values(&z)?;
            Some(dmd_pseudo_grad(&fz, &levels, learned, sources.teacher, sched, rng)?)
        } else {
            None
        };
        if weights.lambda_r > 0.0 && pairs.is_none() {
            return Err(Error::Config("loss.lambda_r > 0 needs a pair store (reg.pairs)".into()));
        }
        Ok(SignBatch { x, z, levels, x_tn, x_ts, dmd, pairs })
    }
}

/// Graph nodes of the SIGN objective.
pub struct SignGraph {
    /// Scalar to differentiate: the weighted terms plus `λ_d` times the DMD surrogate.
    pub objective: Var,
    pub report: LossReport,
}

/// `L_recon + L_idem + λ_f L_flow + λ_d L_dmd + λ_r L_reg + λ_n L_denoise`.
///
/// `report.total` is the weighted sum of the bounded terms; the DMD surrogate
/// is reported but only enters `objective`, where it injects the pseudo-gradient.
pub fn sign_total(
    g: &mut Graph,
    m: &Models,
    batch: &SignBatch,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<SignGraph> {
    let dist = opts.distance;
    let mut report = LossReport::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let recon = recon_loss(g, m, &batch.x, dist)?;
    report.recon = g.scalar(recon);
    terms.push((recon, 1.0));

    let zv = g.constant(&batch.z);
    let fz = m.f(g, zv)?;
    let idem = idem_from_sample(g, m, zv, fz, dist, opts.idem_order)?;
    report.idem = g.scalar(idem);
    terms.push((idem, 1.0));

    let need_tn = weights.lambda_f > 0.0 || weights.lambda_n > 0.0;
    let f_tn = if need_tn {
        let a = g.constant(&batch.x_tn);
        Some(m.f(g, a)?)
    } else {
        None
    };
    if let (Some(f_tn), true) = (f_tn, weights.lambda_f > 0.0) {
        let x_ts = batch.x_ts.as_ref().ok_or_else(|| Error::Contract("flow term active without targets".into()))?;
        let flow = flow_from_output(g, m, f_tn, x_ts, dist)?;
        report.flow = g.scalar(flow);
        terms.push((flow, weights.lambda_f));
    }
    if let (Some(f_tn), true) = (f_tn, weights.lambda_n > 0.0) {
        let xv = g.constant(&batch.x);
        let den = distance(g, xv, f_tn, dist)?;
        report.denoise = g.scalar(den);
        terms.push((den, weights.lambda_n));
    }
    if weights.lambda_r > 0.0 {
        let (pz, py) = batch.pairs.as_ref().ok_or_else(|| Error::Config("regression term needs pairs".into()))?;
        let reg = reg_loss(g, m, pz, py, dist)?;
        report.reg = g.scalar(reg);
        terms.push((reg, weights.lambda_r));
    }
    report.total = terms.iter().map(|&(v, c)| c * g.scalar(v)).sum();

    if weights.lambda_d > 0.0 {
        let pseudo = batch.dmd.as_ref().ok_or_else(|| Error::Contract("dmd term active without pseudo-gradient".into()))?;
        let sur = dmd_surrogate(g, fz, pseudo)?;
        report.dmd_surrogate = g.scalar(sur);
        terms.push((sur, weights.lambda_d));
    }
    let objective = g.combine(&terms)?;
    Ok(SignGraph { objective, report })
}

/// `L_recon + λ_i L_idem + λ_t L_tight`.
pub fn ign_total(
    g: &mut Graph,
    m: &Models,
    x: &Tensor,
    z: &Tensor,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<(Var, LossReport)> {
    let dist = opts.distance;
    let recon = recon_loss(g, m, x, dist)?;
    let idem = idem_loss(g, m, z, dist, opts.idem_order)?;
    let tight = tight_loss(g, m, z, dist, opts.tight_clamp)?;
    let total = g.combine(&[(recon, 1.0), (idem, weights.lambda_i), (tight, weights.lambda_t)])?;
    let report = LossReport {
        recon: g.scalar(recon),
        idem: g.scalar(idem),
        tight: g.scalar(tight),
        total: g.scalar(total),
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Rescales active auxiliary weights so each weighted term matches the
/// reconstruction term on a calibration report. Weights stay within `[0, 1]`.
///
/// When reconstruction is (near) zero, as with identity-biased initialization,
/// the largest active term is used as the reference instead.
pub fn auto_balance(weights: &LossWeights, report: &LossReport) -> LossWeights {
    let mut out = *weights;
    let active = [
        (weights.lambda_f > 0.0, report.flow),
        (weights.lambda_d > 0.0, report.dmd_surrogate.abs()),
        (weights.lambda_r > 0.0, report.reg),
        (weights.lambda_n > 0.0, report.denoise),
    ];
    let mut reference = report.recon;
    if reference <= 1e-12 {
        reference = active.iter().filter(|a| a.0).map(|a| a.1).fold(0.0, f64::max);
    }
    if reference <= 1e-12 {
        return out;
    }
    let scale = |v: f64| if v > 1e-12 { (reference / v).min(1.0) } else { 1.0 };
    if active[0].0 {
        out.lambda_f = scale(active[0].1);
    }
    if active[1].0 {
        out.lambda_d = scale(active[1].1);
    }
    if active[2].0 {
        out.lambda_r = scale(active[2].1);
    }
    if active[3].0 {
        out.lambda_n = scale(active[3].1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, Activation, Init};
    use crate::schedule::ScheduleParams;
    use crate::score::{GaussianMixture, ZeroScore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_net(seed: u64) -> MlpNet {
        MlpNet::new(&[2, 8, 8, 2], Activation::Silu, false, Init::Uniform, &mut rng(seed)).unwrap()
    }

    fn constant_net(c: [f64; 2]) -> MlpNet {
        let mut net = MlpNet::new(&[2, 3, 2], Activation::Silu, false, Init::Zeros, &mut rng(0)).unwrap();
        net.params_mut()[3].values_mut().copy_from_slice(&c);
        net
    }

    fn identity_net() -> MlpNet {
        MlpNet::generator(2, &[4], Activation::Silu, true, &mut rng(0)).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams::default()).unwrap()
    }

    /// Evaluates a loss on a graph with a tracked binding of `net` and a frozen copy of `frozen`.
    fn value<F>(net: &MlpNet, frozen: &MlpNet, f: F) -> f64
    where
        F: FnOnce(&mut Graph, &Models) -> Result<Var>,
    {
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let m = Models::new(&mut g, net, &b, frozen);
        let v = f(&mut g, &m).unwrap();
        g.scalar(v)
    }

    fn oracle_mean_dist(a: &Tensor, b: &Tensor) -> f64 {
        (0..a.rows()).map(|i| Distance::SquaredL2.eval(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
    }

    #[test]
    fn recon_examples() {
        let x = Tensor::randn(&[6, 2], 1.0, &mut rng(1));
        let id = identity_net();
        assert_eq!(value(&id, &id, |g, m| recon_loss(g, m, &x, Distance::SquaredL2)), 0.0);

        let c = constant_net([0.5, -1.0]);
        let one = Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap();
        let v = value(&c, &c, |g, m| recon_loss(g, m, &one, Distance::SquaredL2));
        assert!((v - (1.5f64.powi(2) + 2.0f64.powi(2))).abs() < 1e-12);

        let net = small_net(3);
        let v = value(&net, &net, |g, m| recon_loss(g, m, &x, Distance::SquaredL2));
        let want = oracle_mean_dist(&x, &net.forward_values(&x).unwrap());
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn idem_and_tight_vanish_for_constant_and_identity() {
        let z = Tensor::randn(&[5, 2], 1.0, &mut rng(2));
        for net in [constant_net([0.3, 0.7]), identity_net()] {
            for order in [IdemOrder::FrozenOuter, IdemOrder::FrozenInner] {
                assert!(value(&net, &net, |g, m| idem_loss(g, m, &z, Distance::SquaredL2, order)).abs() < 1e-24);
            }
            assert!(value(&net, &net, |g, m| tight_loss(g, m, &z, Distance::SquaredL2, None)).abs() < 1e-24);
        }
    }

    #[test]
    fn tight_is_negated_idem_when_copies_agree() {
        let z = Tensor::randn(&[9, 2], 1.0, &mut rng(4));
        let net = small_net(5);
        for dist in [Distance::SquaredL2, Distance::L2] {
            let i = value(&net, &net, |g, m| idem_loss(g, m, &z, dist, IdemOrder::FrozenOuter));
            let t = value(&net, &net, |g, m| tight_loss(g, m, &z, dist, None));
            assert!(i > 0.0);
            assert!((t + i).abs() < 1e-12, "{t} {i}");
        }
    }

    #[test]
    fn tight_clamp_is_bounded() {
        let z = Tensor::randn(&[9, 2], 3.0, &mut rng(4));
        let net = small_net(5);
        let raw = value(&net, &net, |g, m| tight_loss(g, m, &z, Distance::SquaredL2, None));
        let clamped = value(&net, &net, |g, m| tight_loss(g, m, &z, Distance::SquaredL2, Some(0.01)));
        assert!(clamped >= -0.01 && clamped < 0.0);
        assert!(raw < clamped);
    }

    /// Scalar linear generator `f(x) = a·x` (no bias), the one-parameter family.
    fn linear(a: f64) -> MlpNet {
        let w = Tensor::new(vec![1, 1], vec![a]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        MlpNet::from_parts(&[1, 1], Activation::Silu, false, vec![w, b]).unwrap()
    }

    #[test]
    fn tight_gradient_pushes_projection_away() {
        let z = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        for a in [0.5, 0.9, 1.5] {
            let mut net = linear(a);
            let frozen = net.clone();
            let mut g = Graph::new();
            let b = net.bind(&mut g, true);
            let m = Models::new(&mut g, &net, &b, &frozen);
            let l = tight_loss(&mut g, &m, &z, Distance::SquaredL2, None).unwrap();
            g.backward(l).unwrap();
            net.accumulate_grads(&g, &b).unwrap();
            let step = -1e-3 * net.flat_grads()[0];
            let mut ip = 0.0;
            for &zi in z.values() {
                let fz = a * zi;
                // f_θ(f_θ′(z)) moves by step·f_θ′(z); drift is f(f(z)) - f(z).
                ip += (step * fz) * (a * fz - fz);
            }
            assert!(ip >= 0.0, "a={a} ip={ip}");
        }
    }

    #[test]
    fn ign_total_unbounded_below_when_expanding() {
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let z = Tensor::new(vec![4, 1], vec![1.0, -0.5, 0.7, 2.0]).unwrap();
        let w = LossWeights { lambda_t: 1.0, lambda_i: 0.0, ..LossWeights::default() };
        let opts = LossOptions::default();
        let mut last = f64::INFINITY;
        for a in [2.0, 4.0, 8.0, 16.0] {
            let net = linear(a);
            let mut g = Graph::new();
            let b = net.bind(&mut g, true);
            let m = Models::new(&mut g, &net, &b, &net);
            let (_, r) = ign_total(&mut g, &m, &x, &z, &w, &opts).unwrap();
            assert!(r.total < last);
            last = r.total;
        }
        assert!(last < -1e4);
    }

    #[test]
    fn ign_total_reductions() {
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng(6));
        let z = Tensor::randn(&[4, 2], 1.0, &mut rng(7));
        let opts = LossOptions::default();
        let id = identity_net();
        let mut g = Graph::new();
        let b = id.bind(&mut g, true);
        let m = Models::new(&mut g, &id, &b, &id);
        let (_, r) = ign_total(&mut g, &m, &x, &z, &LossWeights::default(), &opts).unwrap();
        assert_eq!((r.recon, r.idem, r.tight), (0.0, 0.0, 0.0));

        let net = small_net(8);
        let w = LossWeights { lambda_t: 0.0, lambda_i: 0.7, ..LossWeights::default() };
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let m = Models::new(&mut g, &net, &b, &net);
        let (_, r) = ign_total(&mut g, &m, &x, &z, &w, &opts).unwrap();
        assert!((r.total - (r.recon + 0.7 * r.idem)).abs() < 1e-12);
    }

    #[test]
    fn flow_examples() {
        let s = sched();
        let x = Tensor::randn(&[8, 2], 1.0, &mut rng(9));
        let levels = vec![3; 8];
        let opts = LossOptions::default();
        let c = constant_net([1.0, 2.0]);
        let g_src = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let v = value(&c, &c, |g, m| flow_loss(g, m, &x, &levels, &g_src, &s, &opts, &mut rng(10)));
        assert_eq!(v, 0.0);
        let net = small_net(11);
        let v = value(&net, &net, |g, m| flow_loss(g, m, &x, &levels, &ZeroScore { dim: 2 }, &s, &opts, &mut rng(10)));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn flow_rejects_level_zero() {
        let s = sched();
        let x = Tensor::zeros(&[2, 2]);
        let err = flow_pair(&x, &[0, 1], &ZeroScore { dim: 2 }, &s, Solver::Euler, &mut rng(0));
        assert!(matches!(err, Err(Error::Range { .. })));
    }

    #[test]
    fn denoise_examples() {
        let s = NoiseSchedule::new(ScheduleParams { t_max: 2.0, ..ScheduleParams::default() }).unwrap();
        let id = identity_net();
        let n = s.intervals();
        let sigma = s.sigma_at(n).unwrap();
        let x = Tensor::randn(&[20000, 2], 1.0, &mut rng(12));
        let levels = vec![n; x.rows()];
        let v = value(&id, &id, |g, m| denoise_loss(g, m, &x, &levels, &s, Distance::SquaredL2, &mut rng(13)));
        let want = sigma * sigma * 2.0;
        // Var of a chi-square(2) scaled by σ²: 4σ⁴; standard error over M rows.
        let se = (4.0 * sigma.powi(4) / x.rows() as f64).sqrt();
        assert!((v - want).abs() < 4.0 * se, "{v} {want}");

        let sd = 0.5;
        let mu = [1.0, -2.0];
        let data = GaussianMixture::single(mu.to_vec(), sd).unwrap().sample(20000, &mut rng(14));
        let c = constant_net(mu);
        let v = value(&c, &c, |g, m| denoise_loss(g, m, &data, &levels, &s, Distance::SquaredL2, &mut rng(15)));
        let se = (2.0 * 2.0 * sd.powi(4) / data.rows() as f64).sqrt();
        assert!((v - 2.0 * sd * sd).abs() < 4.0 * se, "{v}");

        let zero_noise = Tensor::randn(&[5, 2], 1.0, &mut rng(16));
        let v = value(&id, &id, |g, m| denoise_loss_on(g, m, &zero_noise, &zero_noise, Distance::SquaredL2));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn reg_examples() {
        let z = Tensor::randn(&[7, 2], 1.0, &mut rng(17));
        let id = identity_net();
        assert_eq!(value(&id, &id, |g, m| reg_loss(g, m, &z, &z, Distance::SquaredL2)), 0.0);

        let y = Tensor::randn(&[7, 2], 1.0, &mut rng(18));
        let c = [0.2, -0.4];
        let net = constant_net(c);
        let v = value(&net, &net, |g, m| reg_loss(g, m, &z, &y, Distance::SquaredL2));
        let cc = Tensor::new(vec![7, 2], c.repeat(7)).unwrap();
        assert!((v - oracle_mean_dist(&y, &cc)).abs() < 1e-12);

        let means = y.column_means();
        let at_mean = value(&constant_net([means[0], means[1]]), &net, |g, m| reg_loss(g, m, &z, &y, Distance::SquaredL2));
        for shift in [[0.01, 0.0], [0.0, -0.01], [0.05, 0.05]] {
            let other = constant_net([means[0] + shift[0], means[1] + shift[1]]);
            assert!(value(&other, &other, |g, m| reg_loss(g, m, &z, &y, Distance::SquaredL2)) > at_mean);
        }
        let empty = Tensor::zeros(&[0, 2]);
        let mut g = Graph::new();
        let b = id.bind(&mut g, true);
        let m = Models::new(&mut g, &id, &b, &id);
        assert!(matches!(reg_loss(&mut g, &m, &empty, &empty, Distance::SquaredL2), Err(Error::Config(_))));
    }

    #[test]
    fn dmd_vanishes_for_identical_sources() {
        let s = sched();
        let gm = GaussianMixture::single(vec![0.0, 0.0], 0.5).unwrap();
        let mut net = small_net(19);
        let z = Tensor::randn(&[6, 2], 1.0, &mut rng(20));
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let frozen = net.clone();
        let m = Models::new(&mut g, &net, &b, &frozen);
        let l = dmd_grad(&mut g, &m, &z, &[5; 6], &gm, &gm, &s, &mut rng(21)).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        g.backward(l).unwrap();
        net.accumulate_grads(&g, &b).unwrap();
        assert!(net.flat_grads().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dmd_bias_only_generator_gets_mean_pseudo_gradient() {
        let mut net = constant_net([0.0, 0.0]);
        let z = Tensor::randn(&[4, 2], 1.0, &mut rng(22));
        let pseudo = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, -4.0, 0.5, 0.5, -1.5, 1.5]).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let zv = g.constant(&z);
        let fz = net.forward(&mut g, &b, zv).unwrap();
        let l = dmd_surrogate(&mut g, fz, &pseudo).unwrap();
        g.backward(l).unwrap();
        net.accumulate_grads(&g, &b).unwrap();
        let bias_grad = net.params()[3].grad().unwrap().to_vec();
        let want = pseudo.column_means();
        for k in 0..2 {
            assert!((bias_grad[k] - want[k]).abs() < 1e-14);
        }
    }

    /// Generator-distribution score for a collapsed generator `f ≡ c`: `-(y - c)/σ²`.
    struct PointScore(Vec<f64>);

    impl ScoreSource for PointScore {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
            let mut out = x.clone();
            for i in 0..x.rows() {
                for (o, c) in out.row_mut(i).iter_mut().zip(&self.0) {
                    *o = -(*o - c) / (sigma * sigma);
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn dmd_moves_collapsed_generator_toward_teacher_mean() {
        let s = sched();
        let mu = vec![1.0, -1.0];
        let c = [-2.0, 3.0];
        let teacher = GaussianMixture::single(mu.clone(), 0.5).unwrap();
        let learned = PointScore(c.to_vec());
        let mut net = constant_net(c);
        let z = Tensor::randn(&[64, 2], 1.0, &mut rng(23));
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let frozen = net.clone();
        let m = Models::new(&mut g, &net, &b, &frozen);
        let l = dmd_grad(&mut g, &m, &z, &vec![9; 64], &learned, &teacher, &s, &mut rng(24)).unwrap();
        g.backward(l).unwrap();
        net.accumulate_grads(&g, &b).unwrap();
        let grad = net.params()[3].grad().unwrap();
        let ip: f64 = (0..2).map(|k| -grad[k] * (mu[k] - c[k])).sum();
        assert!(ip > 0.0, "{ip}");
    }

    #[test]
    fn dmd_propagates_phase_violation() {
        use crate::score::LearnedScore;
        let s = sched();
        let mut learned = LearnedScore::new(2, &[8], 1e-3, &mut rng(25)).unwrap();
        let gm = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let _ = learned.train(&s, 1, |r| Ok(Tensor::randn(&[4, 2], f64::NAN, r)), &mut rng(26));
        let fz = Tensor::zeros(&[2, 2]);
        let err = dmd_pseudo_grad(&fz, &[1, 2], &learned, &gm, &s, &mut rng(27));
        assert!(matches!(err, Err(Error::Contract(_))), "{err:?}");
    }

    fn bundle(net: &MlpNet, w: &LossWeights, seed: u64) -> SignBatch {
        let s = sched();
        let mut r = rng(seed);
        let x = Tensor::randn(&[16, 2], 1.0, &mut r);
        let z = Tensor::randn(&[16, 2], 1.0, &mut r);
        let levels: Vec<usize> = (0..16).map(|_| r.random_range(1..=s.intervals())).collect();
        let gm = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let other = GaussianMixture::single(vec![0.5, 0.0], 0.7).unwrap();
        let pairs = Some((Tensor::randn(&[8, 2], 1.0, &mut r), Tensor::randn(&[8, 2], 1.0, &mut r)));
        let sources = Sources { teacher: &gm, learned: Some(&other) };
        SignBatch::prepare(x, z, levels, net, w, sources, &s, &LossOptions::default(), pairs, &mut r).unwrap()
    }

    fn sign_report(net: &MlpNet, batch: &SignBatch, w: &LossWeights) -> LossReport {
        let mut g = Graph::new();
        let b = net.bind(&mut g, true);
        let m = Models::new(&mut g, net, &b, net);
        sign_total(&mut g, &m, batch, w, &LossOptions::default()).unwrap().report
    }

    #[test]
    fn sign_total_bookkeeping() {
        let net = small_net(30);
        let zero = LossWeights { lambda_f: 0.0, ..LossWeights::default() };
        let r = sign_report(&net, &bundle(&net, &zero, 1), &zero);
        assert!((r.total - (r.recon + r.idem)).abs() < 1e-12);

        let all = LossWeights { lambda_f: 0.3, lambda_d: 0.2, lambda_r: 0.4, lambda_n: 0.6, ..LossWeights::default() };
        let r = sign_report(&net, &bundle(&net, &all, 2), &all);
        let want = r.recon + r.idem + 0.3 * r.flow + 0.4 * r.reg + 0.6 * r.denoise;
        assert!((r.total - want).abs() < 1e-10);
        assert!(r.dmd_surrogate != 0.0);
        r.check_sign_terms().unwrap();
    }

    #[test]
    fn enabling_denoise_changes_total_by_its_weighted_value() {
        let net = small_net(31);
        let base = LossWeights { lambda_f: 0.5, ..LossWeights::default() };
        let with = LossWeights { lambda_n: 0.25, ..base };
        let a = sign_report(&net, &bundle(&net, &base, 3), &base);
        let b = sign_report(&net, &bundle(&net, &with, 3), &with);
        assert_eq!(a.flow, b.flow);
        assert!((b.total - a.total - 0.25 * b.denoise).abs() < 1e-12);
    }

    #[test]
    fn auto_balance_matches_recon_magnitude() {
        let r = LossReport { recon: 0.5, flow: 5.0, denoise: 0.1, ..LossReport::default() };
        let w = LossWeights { lambda_f: 1.0, lambda_n: 1.0, ..LossWeights::default() };
        let b = auto_balance(&w, &r);
        assert!((b.lambda_f * r.flow - r.recon).abs() < 1e-12);
        assert_eq!(b.lambda_n, 1.0);
        assert_eq!(b.lambda_r, 0.0);
    }

    fn worst_sign_fd(seed: u64, w: &LossWeights, opts: &LossOptions) -> f64 {
        let net = small_net(seed);
        let frozen = net.clone();
        let batch = bundle(&net, w, seed + 100);
        finite_diff_check(&net, 1e-6, |n, g, b| {
            let m = Models::new(g, n, b, &frozen);
            Ok(sign_total(g, &m, &batch, w, opts)?.objective)
        })
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::randn(&[5, 2], 1.0, &mut rng(40));
        let z = Tensor::randn(&[5, 2], 1.0, &mut rng(41));
        let y = Tensor::randn(&[5, 2], 1.0, &mut rng(42));
        let s = sched();
        let gm = GaussianMixture::single(vec![0.3, 0.0], 0.8).unwrap();
        let (x_tn, x_ts) = flow_pair(&x, &[2, 5, 9, 14, 18], &gm, &s, Solver::Euler, &mut rng(43)).unwrap();
        let pseudo = Tensor::randn(&[5, 2], 1.0, &mut rng(44));
        for seed in 0..3 {
            let net = small_net(50 + seed);
            // A frozen copy distinct from the live net keeps L2 residuals away
            // from the kink at zero, where central differences are meaningless.
            let frozen = small_net(70 + seed);
            let check = |f: &dyn Fn(&mut Graph, &Models) -> Result<Var>| {
                finite_diff_check(&net, 1e-6, |n, g, b| {
                    let m = Models::new(g, n, b, &frozen);
                    f(g, &m)
                })
                .unwrap()
            };
            for dist in [Distance::SquaredL2, Distance::L2] {
                let errs = [
                    check(&|g, m| recon_loss(g, m, &x, dist)),
                    check(&|g, m| idem_loss(g, m, &z, dist, IdemOrder::FrozenOuter)),
                    check(&|g, m| idem_loss(g, m, &z, dist, IdemOrder::FrozenInner)),
                    check(&|g, m| tight_loss(g, m, &z, dist, None)),
                    check(&|g, m| tight_loss(g, m, &z, dist, Some(0.5))),
                    check(&|g, m| flow_loss_on(g, m, &x_tn, &x_ts, dist)),
                    check(&|g, m| denoise_loss_on(g, m, &x, &x_tn, dist)),
                    check(&|g, m| reg_loss(g, m, &z, &y, dist)),
                    check(&|g, m| {
                        let zv = g.constant(&z);
                        let fz = m.f(g, zv)?;
                        dmd_surrogate(g, fz, &pseudo)
                    }),
                ];
                for (i, e) in errs.iter().enumerate() {
                    assert!(*e <= 1e-4, "seed {seed} {dist:?} term {i}: {e}");
                }
            }
            let all = LossWeights { lambda_f: 0.3, lambda_d: 0.2, lambda_r: 0.4, lambda_n: 0.6, ..LossWeights::default() };
            assert!(worst_sign_fd(60 + seed, &all, &LossOptions::default()) <= 1e-4);
        }
    }
}
