use rand::Rng;

use super::graph::{Activation, Graph, Var};
use super::linalg::gemm_acc;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Weight initialization for a freshly built net.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    Uniform,
    /// Like `Uniform`, with the output layer zeroed. Combined with a skip
    /// connection this makes the net the identity map at step 0.
    IdentityBiased,
    /// All parameters zero.
    Zeros,
}

/// Fully connected network `x -> W_L a(... a(W_1 x + b_1) ...) + b_L`,
/// optionally with a residual `x + net(x)` when input and output widths agree.
///
/// Parameters are stored `[W_0, b_0, W_1, b_1, ...]` with `W_i` shaped
/// `[w_i, w_{i+1}]` (row vectors times weights).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    widths: Vec<usize>,
    activation: Activation,
    skip: bool,
    params: Vec<Tensor>,
}

/// Graph handles for one binding of a net's parameters.
#[derive(Clone, Debug)]
pub struct BoundNet {
    vars: Vec<Var>,
    tracked: bool,
}

impl BoundNet {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }
}

impl MlpNet {
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        skip: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if skip && widths[0] != widths[widths.len() - 1] {
            return Err(Error::Config("skip connection needs equal input and output widths".into()));
        }
        let layers = widths.len() - 1;
        let mut params = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let zero = init == Init::Zeros || (init == Init::IdentityBiased && l == layers - 1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                if zero {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            params.push(Tensor::new(vec![fan_in, fan_out], w)?.with_requires_grad(true));
            params.push(Tensor::new(vec![fan_out], b)?.with_requires_grad(true));
        }
        Ok(MlpNet { widths: widths.to_vec(), activation, skip, params })
    }

    /// Generator `R^d -> R^d` with the given hidden widths.
    pub fn generator<R: Rng + ?Sized>(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        identity_biased: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![d];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let init = if identity_biased { Init::IdentityBiased } else { Init::Uniform };
        MlpNet::new(&widths, activation, identity_biased, init, rng)
    }

    /// Builds a net from explicit parameter tensors (shapes are validated).
    pub fn from_parts(widths: &[usize], activation: Activation, skip: bool, params: Vec<Tensor>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = MlpNet::new(widths, activation, skip, Init::Zeros, &mut rng)?;
        if params.len() != net.params.len() {
            return Err(Error::dim(&[net.params.len()], &[params.len()]));
        }
        for (dst, src) in net.params.iter_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::dim(dst.shape(), src.shape()));
            }
            *dst = src.with_requires_grad(true);
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flattened parameter values in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.values().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(&[self.param_count()], &[flat.len()]));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Text descriptor of the architecture, stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        format!("mlp widths={} act={} skip={}", w.join(","), self.activation.name(), u8::from(self.skip))
    }

    /// Inverse of [`MlpNet::descriptor`]; parameters are zero.
    pub fn from_descriptor(desc: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad architecture descriptor '{desc}'"));
        let mut parts = desc.split_whitespace();
        if parts.next() != Some("mlp") {
            return Err(bad());
        }
        let (mut widths, mut act, mut skip) = (None, None, None);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            match k {
                "widths" => {
                    widths = Some(
                        v.split(',').map(|s| s.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?,
                    )
                }
                "act" => act = Activation::parse(v),
                "skip" => skip = Some(v == "1"),
                _ => return Err(bad()),
            }
        }
        let (widths, act, skip) = (widths.ok_or_else(bad)?, act.ok_or_else(bad)?, skip.ok_or_else(bad)?);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        MlpNet::new(&widths, act, skip, Init::Zeros, &mut rng)
    }

    /// Places the parameters on the tape. Untracked bindings act as a frozen copy.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> BoundNet {
        let vars = self.params.iter().map(|p| g.leaf(p, tracked)).collect();
        BoundNet { vars, tracked }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.in_width() {
            let rows = shape.first().copied().unwrap_or(0);
            return Err(Error::dim(&[rows, self.in_width()], shape));
        }
        Ok(())
    }

    /// Recorded forward pass through a binding.
    pub fn forward(&self, g: &mut Graph, bound: &BoundNet, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = g.affine(h, bound.vars[2 * l], bound.vars[2 * l + 1])?;
            if l + 1 < layers {
                h = g.activation(h, self.activation);
            }
        }
        if self.skip {
            h = g.add(x, h)?;
        }
        Ok(h)
    }

    /// Plain forward pass with no tape. Safe to call from many threads.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let rows = x.rows();
        let layers = self.widths.len() - 1;
        let mut h = x.values().to_vec();
        for l in 0..layers {
            let (k, n) = (self.widths[l], self.widths[l + 1]);
            let bias = self.params[2 * l + 1].values();
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(bias);
            }
            gemm_acc(rows, k, n, &h, false, self.params[2 * l].values(), false, &mut out);
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = out;
        }
        if self.skip {
            h.iter_mut().zip(x.values()).for_each(|(a, b)| *a += b);
        }
        Tensor::new(vec![rows, self.out_width()], h)
    }

    /// Adds the binding's gradients into the parameter gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundNet) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            g.accumulate_into(v, p)?;
        }
        Ok(())
    }

    /// Flattened gradient buffers (zeros where unset).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            })
            .collect()
    }
}

/// Gradient-free view of a net: values pass through, gradients to its parameters never do.
#[derive(Clone, Copy, Debug)]
pub struct FrozenView<'a> {
    net: &'a MlpNet,
}

impl<'a> FrozenView<'a> {
    pub fn new(net: &'a MlpNet) -> Self {
        FrozenView { net }
    }

    pub fn net(&self) -> &'a MlpNet {
        self.net
    }

    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward_values(x)
    }

    /// Binds the frozen parameters as constants; input gradients still flow.
    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        self.net.bind(g, false)
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundNet, x: Var) -> Result<Var> {
        debug_assert!(!bound.is_tracked());
        self.net.forward(g, bound, x)
    }
}
