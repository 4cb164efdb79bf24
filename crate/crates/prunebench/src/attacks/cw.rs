//! Carlini&Wagner L2 attack with tanh reparameterization and binary search
//! over the objective-balancing constant.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{argmax, bisect_to_boundary, oracle_predict, runner_up, AttackRecord, GradientOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct CwConfig {
    pub binary_search_steps: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub initial_c: f64,
    /// Confidence margin kappa.
    pub kappa: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            binary_search_steps: 9,
            inner_steps: 5000,
            step_size: 1.0,
            initial_c: 100.0,
            kappa: 0.0,
        }
    }
}

const EDGE_NUDGE: f64 = 1e-6;

/// Minimize ||0.5(tanh w + 1) - x||^2 + c * f(0.5(tanh w + 1)) over w, with
/// the untargeted surrogate f(x') = max(Z_y - max_{s!=y} Z_s, -kappa),
/// binary-searching c. Returns the lowest-L2 adversarial found.
pub fn cw_l2(
    oracle: &dyn GradientOracle,
    x: &Tensor,
    y: usize,
    cfg: &CwConfig,
    _seed: u64,
) -> Result<AttackRecord> {
    // already misclassified: the zero perturbation wins
    if argmax(&oracle.logits(x)?) != y {
        return AttackRecord::from_candidate(oracle, x, y, Some(x.clone()), 0);
    }

    let d = x.len();
    // inverse tanh of the (edge-nudged) clean input
    let w0: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let v = v.clamp(EDGE_NUDGE, 1.0 - EDGE_NUDGE);
            (2.0 * v - 1.0).atanh()
        })
        .collect();

    let mut best: Option<(f64, Tensor)> = None;
    let mut c = cfg.initial_c;
    let mut c_low = 0.0f64;
    let mut c_high = f64::INFINITY;
    let mut iterations = 0usize;

    for _ in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut found_this_run = false;
        // the step size decays exponentially over the run (12 halvings) so
        // the iterate settles onto the boundary at successively finer
        // scales; Adam moments restart at each halving to shed the
        // large-scale momentum orbit
        const OCTAVES: usize = 12;
        let octave_len = (cfg.inner_steps / OCTAVES).max(1);
        let mut adam_t = 0i32;

        for t in 1..=cfg.inner_steps {
            iterations += 1;
            let octave = ((t - 1) / octave_len).min(OCTAVES - 1);
            let lr = cfg.step_size * 0.5f64.powi(octave as i32);
            if (t - 1) % octave_len == 0 {
                m.iter_mut().for_each(|v| *v = 0.0);
                v.iter_mut().for_each(|v| *v = 0.0);
                adam_t = 0;
            }
            adam_t += 1;
            // decode to image space
            let xt: Vec<f64> = w.iter().map(|&wi| 0.5 * (wi.tanh() + 1.0)).collect();
            let xt_tensor = Tensor::new(x.shape().to_vec(), xt.clone())?;
            let (logits, margin_grad) = oracle.logits_and_margin_gradient(&xt_tensor, y)?;

            if argmax(&logits) != y {
                found_this_run = true;
                let l2 = xt_tensor.l2_distance(x);
                if best.as_ref().map_or(true, |(b, _)| l2 < *b) {
                    best = Some((l2, xt_tensor.clone()));
                }
            }

            // gradient of the objective in image space
            let s = runner_up(&logits, y);
            let f_active = logits[y] - logits[s] > -cfg.kappa;
            let mut gx = vec![0.0; d];
            for i in 0..d {
                gx[i] = 2.0 * (xt[i] - x.data()[i]);
                if f_active {
                    gx[i] += c * margin_grad.data()[i];
                }
            }
            // chain through the tanh decode, then one Adam step on w
            let bc1 = 1.0 - b1.powi(adam_t);
            let bc2 = 1.0 - b2.powi(adam_t);
            for i in 0..d {
                let th = w[i].tanh();
                let g = gx[i] * 0.5 * (1.0 - th * th);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }

        // binary search on c: relax when the run succeeded, push harder
        // when it failed
        if found_this_run {
            c_high = c;
            c = 0.5 * (c_low + c_high);
        } else {
            c_low = c;
            c = if c_high.is_finite() {
                0.5 * (c_low + c_high)
            } else {
                c * 10.0
            };
        }
    }

    // refine: the gradient steps overshoot the boundary by up to one step
    // size, so pull the best candidate back along the segment to the clean
    // input while it stays misclassified
    let best = match best {
        Some((l2, adv)) => {
            iterations += 40;
            let refined = bisect_to_boundary(oracle, x, &adv, y, 40)?;
            if oracle_predict(oracle, &refined)? != y && refined.l2_distance(x) < l2 {
                Some(refined)
            } else {
                Some(adv)
            }
        }
        None => None,
    };
    AttackRecord::from_candidate(oracle, x, y, best, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::LinearOracle;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> CwConfig {
        // enough inner steps for the iterate to slide along the boundary to
        // the projection point; cheap against the linear oracles used here
        CwConfig {
            binary_search_steps: 6,
            inner_steps: 1000,
            ..CwConfig::default()
        }
    }

    #[test]
    fn misclassified_input_is_free() {
        let oracle = LinearOracle {
            weights: vec![vec![-1.0], vec![1.0]],
            bias: vec![0.5, -0.5],
        };
        let x = Tensor::from_vec(vec![0.8]); // predicted class 1
        let rec = cw_l2(&oracle, &x, 0, &small_cfg(), 0).unwrap();
        assert!(rec.success);
        assert_eq!(rec.l2, 0.0);
    }

    #[test]
    fn output_respects_box_by_construction() {
        let oracle = LinearOracle {
            weights: vec![vec![-2.0, 1.0], vec![2.0, -1.0]],
            bias: vec![0.0, 0.0],
        };
        let x = Tensor::from_vec(vec![1.0, 0.0]); // edge values get nudged
        let rec = cw_l2(&oracle, &x, 0, &small_cfg(), 0).unwrap();
        if let Some(adv) = rec.adversarial {
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn linear_2d_reaches_margin_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            // binary classifier: margin(x) = w.x + b, class 1 iff positive
            let w = [rng.gen_range(0.5..2.0), rng.gen_range(-2.0..-0.5)];
            let b: f64 = rng.gen_range(-0.5..0.5);
            let oracle = LinearOracle {
                weights: vec![vec![0.0, 0.0], vec![w[0], w[1]]],
                bias: vec![0.0, b],
            };
            let x = Tensor::from_vec(vec![rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)]);
            let z = b + w[0] * x.data()[0] + w[1] * x.data()[1];
            let y = if z > 0.0 { 1 } else { 0 };
            let analytic = z.abs() / (w[0] * w[0] + w[1] * w[1]).sqrt();
            if analytic < 0.01 {
                continue; // too close to the boundary to be a meaningful case
            }
            // the analytic distance is only attainable when the projection
            // onto the hyperplane stays inside the [0,1] box
            let wn = (w[0] * w[0] + w[1] * w[1]).sqrt();
            let foot = [
                x.data()[0] - z / wn * (w[0] / wn),
                x.data()[1] - z / wn * (w[1] / wn),
            ];
            if foot.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                continue;
            }
            let rec = cw_l2(&oracle, &x, y, &small_cfg(), 0).unwrap();
            assert!(rec.success, "trial {} failed to find adversarial", trial);
            assert!(
                rec.l2 <= analytic * 1.05 + 1e-9,
                "trial {}: got {} vs analytic {}",
                trial,
                rec.l2,
                analytic
            );
            assert!(rec.l2 >= analytic - 1e-6, "went below the true margin");
        }
    }

    #[test]
    fn recorded_norm_matches_stored_tensor() {
        let oracle = LinearOracle {
            weights: vec![vec![1.0, 1.0], vec![-1.0, -1.0]],
            bias: vec![0.0, 0.5],
        };
        let x = Tensor::from_vec(vec![0.6, 0.6]);
        let rec = cw_l2(&oracle, &x, 0, &small_cfg(), 0).unwrap();
        if let Some(adv) = &rec.adversarial {
            assert!((rec.l2 - adv.l2_distance(&x)).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let oracle = LinearOracle {
            weights: vec![vec![1.0, 0.3], vec![-0.4, 0.8]],
            bias: vec![0.1, -0.1],
        };
        let x = Tensor::from_vec(vec![0.4, 0.6]);
        let a = cw_l2(&oracle, &x, 0, &small_cfg(), 1).unwrap();
        let b = cw_l2(&oracle, &x, 0, &small_cfg(), 1).unwrap();
        assert_eq!(a, b);
    }
}
