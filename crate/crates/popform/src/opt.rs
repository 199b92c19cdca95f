//! Bounded derivative-free minimization.
//!
//! A Nelder-Mead simplex search with box projection: every candidate point
//! is clamped into the bounds before evaluation, so the returned point is
//! always feasible and the reported value is never worse than the value at
//! the (projected) starting point.

/// Termination settings for one simplex run.
#[derive(Debug, Clone, Copy)]
pub struct OptOptions {
    /// Hard cap on objective evaluations.
    pub max_evals: usize,
    /// Relative spread of simplex values below which the run stops.
    pub f_tol: f64,
    /// Simplex diameter (relative to the box size) below which the run stops.
    pub x_tol: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions {
            max_evals: 2000,
            f_tol: 1e-10,
            x_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    /// False when the evaluation cap stopped the run before the tolerances
    /// were met.
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Minimizes `f` over the box `bounds`, starting from `x0` (projected into
/// the box). Non-finite objective values are treated as +inf, so the search
/// simply moves away from regions where the objective fails.
pub fn minimize_box<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], opts: &OptOptions) -> OptOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), bounds.len(), "dimension mismatch");
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    // Initial simplex: the projected start plus one perturbed vertex per
    // coordinate; perturbations flip direction when the start sits on a
    // boundary.
    let mut start = x0.to_vec();
    clamp_into(&mut start, bounds);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(start.clone());
    for i in 0..dim {
        let (lo, hi) = bounds[i];
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let step = 0.05 * span;
        let mut v = start.clone();
        v[i] = if start[i] + step <= hi {
            start[i] + step
        } else {
            start[i] - step
        };
        clamp_into(&mut v, bounds);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let order = |simplex: &mut Vec<Vec<f64>>, values: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..simplex.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let new_simplex: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let new_values: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        *simplex = new_simplex;
        *values = new_values;
    };
    order(&mut simplex, &mut values);

    let mut converged = false;
    while evals < opts.max_evals {
        // Convergence: value spread and simplex extent both small.
        let f_spread = values[dim] - values[0];
        let f_scale = values[0].abs().max(1.0);
        let x_spread = (0..dim)
            .map(|i| {
                let (lo, hi) = bounds[i];
                let span = (hi - lo).max(f64::MIN_POSITIVE);
                simplex
                    .iter()
                    .map(|v| (v[i] - simplex[0][i]).abs() / span)
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if f_spread <= opts.f_tol * f_scale && x_spread <= opts.x_tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for v in simplex.iter().take(dim) {
            for i in 0..dim {
                centroid[i] += v[i];
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let worst = simplex[dim].clone();
        let mut reflected: Vec<f64> = (0..dim).map(|i| 2.0 * centroid[i] - worst[i]).collect();
        clamp_into(&mut reflected, bounds);
        let f_reflected = eval(&reflected, &mut evals);

        if f_reflected < values[0] {
            let mut expanded: Vec<f64> = (0..dim).map(|i| 3.0 * centroid[i] - 2.0 * worst[i]).collect();
            clamp_into(&mut expanded, bounds);
            let f_expanded = eval(&expanded, &mut evals);
            if f_expanded < f_reflected {
                simplex[dim] = expanded;
                values[dim] = f_expanded;
            } else {
                simplex[dim] = reflected;
                values[dim] = f_reflected;
            }
        } else if f_reflected < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = f_reflected;
        } else {
            let (base, f_base) = if f_reflected < values[dim] {
                (reflected.clone(), f_reflected)
            } else {
                (worst.clone(), values[dim])
            };
            let mut contracted: Vec<f64> =
                (0..dim).map(|i| 0.5 * (centroid[i] + base[i])).collect();
            clamp_into(&mut contracted, bounds);
            let f_contracted = eval(&contracted, &mut evals);
            if f_contracted < f_base {
                simplex[dim] = contracted;
                values[dim] = f_contracted;
            } else {
                // Shrink toward the best vertex.
                for j in 1..=dim {
                    let best = simplex[0].clone();
                    for i in 0..dim {
                        simplex[j][i] = 0.5 * (simplex[j][i] + best[i]);
                    }
                    clamp_into(&mut simplex[j], bounds);
                    values[j] = eval(&simplex[j], &mut evals);
                }
            }
        }
        order(&mut simplex, &mut values);
    }

    order(&mut simplex, &mut values);
    OptOutcome {
        x: simplex[0].clone(),
        value: values[0],
        evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_minimum_of_a_bowl() {
        let target = [1.2, -0.3, 4.0];
        let f = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .map(|(xi, ti)| (xi - ti).powi(2))
                .sum::<f64>()
        };
        let bounds = [(-5.0, 5.0), (-5.0, 5.0), (0.0, 10.0)];
        let out = minimize_box(f, &[0.0, 0.0, 5.0], &bounds, &OptOptions::default());
        assert!(out.converged);
        for (xi, ti) in out.x.iter().zip(&target) {
            assert!((xi - ti).abs() < 1e-5, "got {xi}, wanted {ti}");
        }
    }

    #[test]
    fn respects_the_box_when_the_minimum_is_outside() {
        let f = |x: &[f64]| (x[0] - 10.0).powi(2);
        let bounds = [(-1.0, 2.0)];
        let out = minimize_box(f, &[0.0], &bounds, &OptOptions::default());
        assert!((out.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn never_returns_worse_than_the_start() {
        let f = |x: &[f64]| x[0].sin() * (x[1] * 3.0).cos() + 0.1 * x[0] * x[0];
        let bounds = [(-4.0, 4.0), (-4.0, 4.0)];
        let start = [1.0, 1.0];
        let out = minimize_box(
            f,
            &start,
            &bounds,
            &OptOptions {
                max_evals: 40,
                ..OptOptions::default()
            },
        );
        assert!(out.value <= f(&start) + 1e-12);
    }

    #[test]
    fn survives_non_finite_regions() {
        let f = |x: &[f64]| {
            if x[0] < 0.0 {
                f64::NAN
            } else {
                (x[0] - 0.5).powi(2)
            }
        };
        let out = minimize_box(f, &[1.5], &[(-2.0, 2.0)], &OptOptions::default());
        assert!((out.x[0] - 0.5).abs() < 1e-5);
    }
}
