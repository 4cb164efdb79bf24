//! Derivative-free simplex minimizer used for the trust-region dual of the
//! L0 attack step.

/// Minimize `f` starting from `x0` with the standard reflect / expand /
/// contract / shrink moves. Stops when the simplex diameter drops below
/// `tolerance` or after `max_iters` iterations.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    max_iters: usize,
    tolerance: f64,
) -> Vec<f64> {
    let n = x0.len();
    if n == 0 {
        return Vec::new();
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    // initial simplex: x0 plus one perturbed vertex per coordinate
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if v[i] != 0.0 { 0.05 * v[i].abs() } else { 0.00025 };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for _ in 0..max_iters {
        // order ascending by value, stable for determinism
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
        let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;

        if simplex_diameter(&simplex) < tolerance {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|v| v[d]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflected: Vec<f64> = (0..n)
            .map(|d| centroid[d] + alpha * (centroid[d] - worst[d]))
            .collect();
        let fr = f(&reflected);

        if fr < values[0] {
            let expanded: Vec<f64> = (0..n)
                .map(|d| centroid[d] + gamma * (reflected[d] - centroid[d]))
                .collect();
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted: Vec<f64> = (0..n)
                .map(|d| centroid[d] + rho * (worst[d] - centroid[d]))
                .collect();
            let fc = f(&contracted);
            if fc < values[n] {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for v in simplex.iter_mut().skip(1) {
                    for d in 0..n {
                        v[d] = best[d] + sigma * (v[d] - best[d]);
                    }
                }
                for i in 1..=n {
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    simplex.swap_remove(best)
}

fn simplex_diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..simplex.len() {
        for j in i + 1..simplex.len() {
            let dist: f64 = simplex[i]
                .iter()
                .zip(&simplex[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let x = nelder_mead(|v| (v[0] - 1.0) * (v[0] - 1.0), &[5.0], 500, 1e-10);
        assert!((x[0] - 1.0).abs() < 1e-6, "got {}", x[0]);
    }

    #[test]
    fn constant_function_returns_start() {
        let x = nelder_mead(|_| 3.5, &[0.7, -0.2], 100, 1e-8);
        assert_eq!(x, vec![0.7, -0.2]);
    }

    #[test]
    fn rosenbrock_2d() {
        let rosenbrock =
            |v: &[f64]| (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2);
        let x = nelder_mead(rosenbrock, &[-1.0, 1.0], 5000, 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-3, "x0 {}", x[0]);
        assert!((x[1] - 1.0).abs() < 1e-3, "x1 {}", x[1]);
    }
}
