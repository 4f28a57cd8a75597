//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sign_core::diffcore::{Activation, MlpNet, Tensor};
use sign_core::score::GaussianMixture;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The default 2D generator, `2 → 128 → 128 → 128 → 2`.
pub fn generator() -> MlpNet {
    MlpNet::generator(2, &[128, 128, 128], Activation::Silu, true, &mut rng(0)).expect("generator")
}

pub fn batch(rows: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, d], 1.0, &mut rng(seed))
}

pub fn two_modes() -> GaussianMixture {
    GaussianMixture::new(vec![0.5, 0.5], vec![vec![1.0, 1.0], vec![-1.0, -1.0]], vec![0.3, 0.3]).expect("mixture")
}
