//! Brendel&Bethge-style L0 attack: walk an adversarial starting point along
//! the decision boundary toward the clean input, each step solving a
//! trust-region L0 subproblem on the linearized boundary.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    adv_criterion_from_logits, bisect_to_boundary, nelder_mead, oracle_predict, AttackRecord,
    GradientOracle,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BbConfig {
    /// Bisection steps pulling the start onto the boundary.
    pub binary_search_steps: usize,
    /// Boundary-walk iterations.
    pub inner_steps: usize,
    /// Initial squared trust radius.
    pub initial_radius: f64,
    /// Number of radius decays spread over the walk.
    pub radius_decays: usize,
    pub decay_factor: f64,
    /// Greedy pixel-restoration pass on the final candidate.
    pub polish: bool,
}

impl Default for BbConfig {
    fn default() -> Self {
        BbConfig {
            binary_search_steps: 30,
            inner_steps: 500,
            initial_radius: 1e7,
            radius_decays: 30,
            decay_factor: 0.5,
            polish: true,
        }
    }
}

/// Minimize the number of pixels that differ from `x` while staying
/// misclassified. `start` must already be misclassified (e.g. a dataset
/// image of another class, see [`super::sample_starting_point`]).
pub fn bb_l0(
    oracle: &dyn GradientOracle,
    x: &Tensor,
    y: usize,
    start: &Tensor,
    cfg: &BbConfig,
    _seed: u64,
) -> Result<AttackRecord> {
    if oracle_predict(oracle, x)? != y {
        return AttackRecord::from_candidate(oracle, x, y, Some(x.clone()), 0);
    }
    if oracle_predict(oracle, start)? == y {
        return Err(Error::Contract(
            "L0 attack starting point must be misclassified".into(),
        ));
    }
    if start.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "start shape {:?} != input shape {:?}",
            start.shape(),
            x.shape()
        )));
    }

    let d = x.len();
    let mut iterations = 0usize;

    // pull the start onto the boundary: largest step toward x that stays
    // misclassified along the straight segment
    let mut xt = bisect_to_boundary(oracle, x, start, y, cfg.binary_search_steps)?;
    iterations += cfg.binary_search_steps;

    let mut best = xt.clone();
    let mut best_key = norm_key(&best, x);

    let decay_interval = (cfg.inner_steps / cfg.radius_decays.max(1)).max(1);
    for i in 0..cfg.inner_steps {
        iterations += 1;
        let radius =
            cfg.initial_radius * cfg.decay_factor.powi((i / decay_interval).min(cfg.radius_decays) as i32);

        let (logits, normal) = oracle.logits_and_margin_gradient(&xt, y)?;
        let adv = adv_criterion_from_logits(&logits, y);
        let b = normal.data();
        if b.iter().all(|&v| v == 0.0) {
            break; // flat boundary model: no step direction available
        }

        let e: Vec<f64> = x.data().iter().zip(xt.data()).map(|(a, t)| a - t).collect();
        let lo: Vec<f64> = xt.data().iter().map(|&t| -t).collect();
        let hi: Vec<f64> = xt.data().iter().map(|&t| 1.0 - t).collect();
        // aim a hair inside the adversarial region, not exactly onto the
        // boundary: a repaired point with margin exactly 0 sits on the
        // argmax tie and may be judged non-adversarial
        let c = -adv - 1e-4;
        let delta = match solve_l0_subproblem(&e, b, c, &lo, &hi, radius) {
            Some(delta) => delta,
            None => continue,
        };

        let mut candidate = xt.clone();
        for (k, dv) in delta.iter().enumerate() {
            candidate.data_mut()[k] = (xt.data()[k] + dv).clamp(0.0, 1.0);
        }
        // the subproblem works on a linearization; if the real model says
        // the step left the adversarial region, bisect back along it
        if oracle_predict(oracle, &candidate)? == y {
            candidate = bisect_to_boundary(oracle, &candidate, &xt, y, 10)?;
            iterations += 10;
        }
        xt = candidate;
        let key = norm_key(&xt, x);
        if key < best_key {
            best_key = key;
            best = xt.clone();
        }
        let _ = d;
    }

    if cfg.polish {
        let polished = greedy_restore(oracle, x, &best, y)?;
        if norm_key(&polished, x) < best_key {
            best = polished;
        }
    }

    AttackRecord::from_candidate(oracle, x, y, Some(best), iterations)
}

fn norm_key(candidate: &Tensor, x: &Tensor) -> (usize, f64) {
    (candidate.l0_distance(x), candidate.l2_distance(x))
}

/// Solve  min ||e - delta||_0  s.t.  b.delta = c,  lo <= delta <= hi,
/// ||delta||^2 <= radius  approximately, via its per-pixel Lagrangian dual
/// (multipliers lambda for the equality, mu for the radius) maximized with
/// Nelder-Mead, followed by an exact equality repair on the free support.
fn solve_l0_subproblem(
    e: &[f64],
    b: &[f64],
    c: f64,
    lo: &[f64],
    hi: &[f64],
    radius: f64,
) -> Option<Vec<f64>> {
    let d = e.len();
    let b_norm_sq: f64 = b.iter().map(|v| v * v).sum();
    if b_norm_sq == 0.0 {
        return None;
    }

    // dual value at (lambda, mu): each pixel picks the cheaper of
    //   clean:  delta_k = e_k               (zero L0 cost)
    //   free:   delta_k = clip(lambda b_k / 2mu)   (unit L0 cost)
    let pixel_costs = |lambda: f64, mu: f64, k: usize| -> (f64, f64, f64) {
        let clean = -lambda * b[k] * e[k] + mu * e[k] * e[k];
        let free_delta = (lambda * b[k] / (2.0 * mu)).clamp(lo[k], hi[k]);
        let free = 1.0 - lambda * b[k] * free_delta + mu * free_delta * free_delta;
        (clean, free, free_delta)
    };
    let neg_dual = |p: &[f64]| -> f64 {
        let (lambda, mu) = (p[0], p[1].exp());
        let mut q = lambda * c - mu * radius;
        for k in 0..d {
            let (clean, free, _) = pixel_costs(lambda, mu, k);
            q += clean.min(free);
        }
        -q
    };
    let lambda0 = 2.0 * c / b_norm_sq;
    let opt = nelder_mead(neg_dual, &[lambda0, (1e-6f64).ln()], 300, 1e-10);
    let (lambda, mu) = (opt[0], opt[1].exp());

    // primal recovery: ties go clean to keep the support small
    let mut free: Vec<bool> = (0..d)
        .map(|k| {
            let (clean, free_cost, _) = pixel_costs(lambda, mu, k);
            free_cost < clean
        })
        .collect();

    // repair the equality constraint exactly on the chosen support, growing
    // it when the support cannot carry the required inner product
    for _ in 0..=d {
        let residual: f64 = c
            - (0..d)
                .filter(|&k| !free[k])
                .map(|k| b[k] * e[k])
                .sum::<f64>();
        if let Some(delta) = fit_support(b, lo, hi, &free, residual) {
            let mut full: Vec<f64> = (0..d).map(|k| if free[k] { delta[k] } else { e[k] }).collect();
            let sq: f64 = full.iter().map(|v| v * v).sum();
            if sq > radius {
                let s = (radius / sq).sqrt();
                for v in full.iter_mut() {
                    *v *= s;
                }
            }
            return Some(full);
        }
        // add the clean pixel with the most leverage toward the residual
        let mut grow = None;
        let mut gain = 0.0;
        for k in 0..d {
            if free[k] {
                continue;
            }
            let extreme = if (residual >= 0.0) == (b[k] >= 0.0) { hi[k] } else { lo[k] };
            let g = (b[k] * (extreme - e[k])).abs();
            if g > gain {
                gain = g;
                grow = Some(k);
            }
        }
        match grow {
            Some(k) if gain > 0.0 => free[k] = true,
            _ => return None,
        }
    }
    None
}

/// On the pixels marked free, find delta with b.delta = residual inside the
/// box, using the monotone one-parameter family delta_k = clip(t b_k).
fn fit_support(
    b: &[f64],
    lo: &[f64],
    hi: &[f64],
    free: &[bool],
    residual: f64,
) -> Option<Vec<f64>> {
    let d = b.len();
    let eval = |t: f64| -> (Vec<f64>, f64) {
        let mut delta = vec![0.0; d];
        let mut dot = 0.0;
        for k in 0..d {
            if free[k] {
                delta[k] = (t * b[k]).clamp(lo[k], hi[k]);
                dot += b[k] * delta[k];
            }
        }
        (delta, dot)
    };
    // bracket the monotone function g(t) = b.delta(t) around the residual
    let mut t_hi = 1.0f64;
    let scale = residual.abs().max(1.0);
    loop {
        let (_, g_pos) = eval(t_hi);
        let (_, g_neg) = eval(-t_hi);
        if g_neg - 1e-9 * scale <= residual && residual <= g_pos + 1e-9 * scale {
            break;
        }
        t_hi *= 2.0;
        if t_hi > 1e15 {
            return None; // saturated support cannot reach the residual
        }
    }
    let (mut a, mut z) = (-t_hi, t_hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + z);
        let (_, g) = eval(mid);
        if g < residual {
            a = mid;
        } else {
            z = mid;
        }
    }
    let (delta, g) = eval(0.5 * (a + z));
    if (g - residual).abs() <= 1e-6 * scale {
        Some(delta)
    } else {
        None
    }
}

/// Restore perturbed pixels to their clean values one at a time (smallest
/// perturbations first) whenever the point stays misclassified; repeat
/// until a full pass makes no change.
fn greedy_restore(
    oracle: &dyn GradientOracle,
    x: &Tensor,
    candidate: &Tensor,
    y: usize,
) -> Result<Tensor> {
    let mut current = candidate.clone();
    loop {
        let mut changed: Vec<(f64, usize)> = current
            .data()
            .iter()
            .zip(x.data())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(k, (a, b))| ((a - b).abs(), k))
            .collect();
        changed.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
        let mut restored_any = false;
        for (_, k) in changed {
            let saved = current.data()[k];
            current.data_mut()[k] = x.data()[k];
            if oracle_predict(oracle, &current)? == y {
                current.data_mut()[k] = saved;
            } else {
                restored_any = true;
            }
        }
        if !restored_any {
            return Ok(current);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::test_support::LinearOracle;
    use crate::attacks::argmax;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> BbConfig {
        BbConfig {
            binary_search_steps: 20,
            inner_steps: 80,
            ..BbConfig::default()
        }
    }

    fn predict(oracle: &LinearOracle, x: &[f64]) -> usize {
        argmax(&oracle.logits(&Tensor::from_vec(x.to_vec())).unwrap())
    }

    /// Minimum number of pixels that must change to flip the prediction,
    /// by exhaustive subset + box-corner enumeration.
    fn brute_force_l0(oracle: &LinearOracle, x: &[f64], y: usize) -> Option<usize> {
        let d = x.len();
        let classes = oracle.class_count();
        for size in 0..=d {
            for mask in 0u32..(1 << d) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                for t in 0..classes {
                    if t == y {
                        continue;
                    }
                    let mut probe = x.to_vec();
                    for k in 0..d {
                        if mask & (1 << k) != 0 {
                            let dir = oracle.weights[t][k] - oracle.weights[y][k];
                            probe[k] = if dir > 0.0 { 1.0 } else { 0.0 };
                        }
                    }
                    if predict(oracle, &probe) != y {
                        return Some(size);
                    }
                }
            }
        }
        None
    }

    fn random_instance(rng: &mut impl Rng, d: usize) -> (LinearOracle, Vec<f64>) {
        let oracle = LinearOracle {
            weights: (0..3)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            bias: (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        };
        let x = (0..d).map(|_| rng.gen_range(0.2..0.8)).collect();
        (oracle, x)
    }

    fn adversarial_corner(oracle: &LinearOracle, d: usize, y: usize) -> Option<Vec<f64>> {
        (0u32..(1 << d)).find_map(|mask| {
            let corner: Vec<f64> =
                (0..d).map(|k| if mask & (1 << k) != 0 { 1.0 } else { 0.0 }).collect();
            (predict(oracle, &corner) != y).then_some(corner)
        })
    }

    #[test]
    fn misclassified_input_is_free() {
        let oracle = LinearOracle {
            weights: vec![vec![-1.0], vec![1.0]],
            bias: vec![0.5, -0.5],
        };
        let x = Tensor::from_vec(vec![0.8]);
        let start = Tensor::from_vec(vec![0.9]);
        let rec = bb_l0(&oracle, &x, 0, &start, &small_cfg(), 0).unwrap();
        assert!(rec.success);
        assert_eq!(rec.l0, 0);
    }

    #[test]
    fn rejects_non_adversarial_start() {
        let oracle = LinearOracle {
            weights: vec![vec![-1.0], vec![1.0]],
            bias: vec![0.5, -0.5],
        };
        let x = Tensor::from_vec(vec![0.2]);
        let start = Tensor::from_vec(vec![0.1]); // also class 0
        assert!(matches!(
            bb_l0(&oracle, &x, 0, &start, &small_cfg(), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn result_is_adversarial_and_no_worse_than_start() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (oracle, x) = random_instance(&mut rng, 6);
            let y = predict(&oracle, &x);
            let Some(corner) = adversarial_corner(&oracle, 6, y) else {
                continue;
            };
            let xt = Tensor::from_vec(x.clone());
            let start = Tensor::from_vec(corner);
            let rec = bb_l0(&oracle, &xt, y, &start, &small_cfg(), 0).unwrap();
            assert!(rec.success);
            assert!(rec.l0 <= start.l0_distance(&xt));
            let adv = rec.adversarial.unwrap();
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn matches_brute_force_on_four_pixels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut total = 0;
        let mut exact = 0;
        while total < 25 {
            let (oracle, x) = random_instance(&mut rng, 4);
            let y = predict(&oracle, &x);
            let Some(corner) = adversarial_corner(&oracle, 4, y) else {
                continue;
            };
            let opt = brute_force_l0(&oracle, &x, y).unwrap();
            let xt = Tensor::from_vec(x.clone());
            let rec = bb_l0(&oracle, &xt, y, &Tensor::from_vec(corner), &small_cfg(), 0).unwrap();
            assert!(rec.success);
            assert!(rec.l0 >= opt, "reported L0 {} below the true optimum {}", rec.l0, opt);
            total += 1;
            if rec.l0 == opt {
                exact += 1;
            }
        }
        assert!(exact * 10 >= total * 8, "only {}/{} instances optimal", exact, total);
    }

    #[test]
    fn deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (oracle, x) = random_instance(&mut rng, 5);
        let y = predict(&oracle, &x);
        let corner = adversarial_corner(&oracle, 5, y).unwrap();
        let xt = Tensor::from_vec(x);
        let start = Tensor::from_vec(corner);
        let a = bb_l0(&oracle, &xt, y, &start, &small_cfg(), 3).unwrap();
        let b = bb_l0(&oracle, &xt, y, &start, &small_cfg(), 3).unwrap();
        assert_eq!(a, b);
    }
}
