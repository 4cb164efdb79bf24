//! Projected gradient descent under an L-infinity budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{AttackRecord, GradientOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct PgdConfig {
    /// L-infinity budget.
    pub eps: f64,
    pub steps: usize,
    /// Step size t = rel_step * eps.
    pub rel_step: f64,
    pub random_start: bool,
}

impl Default for PgdConfig {
    /// Standard step schedule with a zero budget; set `eps` per run.
    fn default() -> Self {
        PgdConfig::new(0.0)
    }
}

impl PgdConfig {
    pub fn new(eps: f64) -> Self {
        PgdConfig {
            eps,
            steps: 40,
            rel_step: 0.1 / 3.0,
            random_start: true,
        }
    }
}

/// Iterate x <- P(x + t sign(grad_x L)) where P clips to the eps-ball
/// around the clean input and to the [0,1] box.
pub fn pgd_linf(
    oracle: &dyn GradientOracle,
    x: &Tensor,
    y: usize,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<AttackRecord> {
    let step = cfg.rel_step * cfg.eps;
    let mut adv = x.clone();
    if cfg.random_start && cfg.eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (a, &orig) in adv.data_mut().iter_mut().zip(x.data()) {
            let delta = rng.gen_range(-cfg.eps..=cfg.eps);
            *a = (orig + delta).clamp(orig - cfg.eps, orig + cfg.eps).clamp(0.0, 1.0);
        }
    }
    for _ in 0..cfg.steps {
        let g = oracle.loss_input_gradient(&adv, y)?;
        for ((a, &gv), &orig) in adv.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            *a = (*a + step * gv.signum() * if gv == 0.0 { 0.0 } else { 1.0 })
                .clamp(orig - cfg.eps, orig + cfg.eps)
                .clamp(0.0, 1.0);
        }
    }
    AttackRecord::from_candidate(oracle, x, y, Some(adv), cfg.steps)
}
