use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment buffers and hyperparameters for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Restores saved moments; shapes must match the current buffers.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let lens = |x: &[Vec<f64>]| x.iter().map(Vec::len).collect::<Vec<_>>();
        if lens(&m) != lens(&self.m) || lens(&v) != lens(&self.v) {
            return Err(Error::Format { offset: 0, msg: "optimizer state shape mismatch".into() });
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    fn check(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::Contract("optimizer state does not match parameter shapes".into()));
        }
        Ok(())
    }
}

/// One Adam update from the parameters' gradient buffers.
///
/// Parameters without a gradient buffer are treated as having zero gradient.
/// Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    state.check(params)?;
    for p in params.iter() {
        if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: state.step as usize,
                detail: "non-finite gradient".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
        for (((x, mi), vi), g) in p.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Euclidean norm of all gradient buffers.
pub fn grad_norm(params: &[Tensor]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their joint norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad().map(<[f64]>::to_vec) {
                p.zero_grad();
                let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64], g: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![v.len()], v.to_vec()).unwrap().with_requires_grad(true);
        t.accumulate_grad(g).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut ps = vec![param(&[1.0, -2.0], &[0.3, 0.3])];
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        let before = ps[0].values().to_vec();
        let m_before = st.first_moments()[0].clone();
        ps[0].zero_grad();
        adam_step(&mut ps, &mut st, 0.1).unwrap();
        // m decays by beta1 and the bias-corrected update is nonzero only through m
        for (a, b) in st.first_moments()[0].iter().zip(&m_before) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        let mut fresh = vec![param(&[1.0, -2.0], &[0.0, 0.0])];
        let mut st2 = AdamState::new(&fresh, 0.9, 0.999, 1e-8);
        adam_step(&mut fresh, &mut st2, 0.1).unwrap();
        assert_eq!(fresh[0].values(), &[1.0, -2.0]);
        assert_ne!(ps[0].values(), before.as_slice());
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let (lr, eps) = (0.01, 1e-8);
        let g = [0.5, -3.0, 1e-3];
        let mut ps = vec![param(&[0.0, 0.0, 0.0], &g)];
        let mut st = AdamState::new(&ps, 0.9, 0.999, eps);
        adam_step(&mut ps, &mut st, lr).unwrap();
        for (x, gi) in ps[0].values().iter().zip(g) {
            let want = -lr * gi / (gi.abs() + eps);
            assert!((x - want).abs() < 1e-12, "{x} vs {want}");
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let lr = 1e-3;
        let mut ps = vec![param(&[0.0], &[2.5])];
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_step(&mut ps, &mut st, lr).unwrap();
            let x = ps[0].values()[0];
            let delta = x - prev;
            prev = x;
            assert!(delta < 0.0);
            assert!((delta + lr).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut ps = vec![param(&[0.0], &[f64::NAN])];
        let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
        assert!(matches!(adam_step(&mut ps, &mut st, 0.1), Err(Error::Divergence { .. })));
        assert_eq!(ps[0].values(), &[0.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut ps = vec![param(&[0.0, 0.0], &[3.0, 4.0])];
        let pre = clip_grad_norm(&mut ps, 1.0);
        assert_eq!(pre, 5.0);
        assert!((grad_norm(&ps) - 1.0).abs() < 1e-15);
    }
}
