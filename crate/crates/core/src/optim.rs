//! Box-constrained Nelder-Mead for the low-dimensional hyperparameter searches.
//!
//! Trial points are projected onto the box before evaluation, so the
//! objective is never called outside the bounds. Non-finite objective values
//! are treated as `+inf`.

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Total objective evaluations allowed per run (restarts included).
    pub max_evals: usize,
    /// Initial simplex edge, per coordinate, as a fraction of the box width.
    pub initial_step: f64,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Restart from the best vertex this many times.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 200, initial_step: 0.1, f_tol: 1e-9, x_tol: 1e-5, restarts: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// The returned value never exceeds `f(x0)` (after projection).
pub fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert!(n > 0 && lower.len() == n && upper.len() == n);
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

    let mut best = x0.to_vec();
    project(&mut best, lower, upper);
    let mut best_f = eval(&best, &mut evals);
    let mut converged = false;

    for _ in 0..=opts.restarts {
        if evals >= opts.max_evals {
            break;
        }
        let (x, fx, conv) = run(&mut |x, e| eval(x, e), &best, best_f, lower, upper, opts, &mut evals);
        if fx < best_f {
            best = x;
            best_f = fx;
        }
        converged = conv;
    }

    Minimum { x: best, value: best_f, evals, converged }
}

#[allow(clippy::too_many_arguments)]
fn run<F>(
    eval: &mut F,
    start: &[f64],
    f_start: f64,
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
    evals: &mut usize,
) -> (Vec<f64>, f64, bool)
where
    F: FnMut(&[f64], &mut usize) -> f64,
{
    let n = start.len();
    let mut simplex = vec![start.to_vec()];
    let mut values = vec![f_start];
    for i in 0..n {
        let width = upper[i] - lower[i];
        let step = if width.is_finite() && width > 0.0 { opts.initial_step * width } else { opts.initial_step };
        let mut v = start.to_vec();
        // step inward when the start sits on the upper bound
        v[i] = if v[i] + step <= upper[i] { v[i] + step } else { v[i] - step };
        project(&mut v, lower, upper);
        values.push(eval(&v, evals));
        simplex.push(v);
    }

    let centroid = |simplex: &[Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        for v in &simplex[..n] {
            for (cj, vj) in c.iter_mut().zip(v) {
                *cj += vj;
            }
        }
        c.iter_mut().for_each(|cj| *cj /= n as f64);
        c
    };
    let along = |from: &[f64], to: &[f64], t: f64| -> Vec<f64> {
        let mut x: Vec<f64> = from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect();
        project(&mut x, lower, upper);
        x
    };

    let mut converged = false;
    while *evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[n] - values[0]).abs();
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol * (1.0 + values[0].abs()) && diameter <= opts.x_tol {
            converged = true;
            break;
        }

        let c = centroid(&simplex);
        let xr = along(&c, &simplex[n], -1.0);
        let fr = eval(&xr, evals);
        if fr < values[0] {
            let xe = along(&c, &simplex[n], -2.0);
            let fe = eval(&xe, evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(&c, &simplex[n], -0.5);
                let fc = eval(&xc, evals);
                (xc, fc)
            } else {
                let xc = along(&c, &simplex[n], 0.5);
                let fc = eval(&xc, evals);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    if *evals >= opts.max_evals {
                        break;
                    }
                    simplex[i] = along(&simplex[0], &simplex[i], 0.5);
                    values[i] = eval(&simplex[i], evals);
                }
            }
        }
    }

    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best].clone(), values[best], converged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_minimum() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2);
        let opts = NelderMeadOptions { max_evals: 500, ..Default::default() };
        let m = minimize(f, &[0.0, 0.0], &[-5.0, -5.0], &[5.0, 5.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] + 2.0).abs() < 1e-3, "{:?}", m.x);
        assert!(m.converged);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| x[0] + x[1];
        let m = minimize(f, &[0.5, 0.5], &[0.0, 0.2], &[1.0, 1.0], &NelderMeadOptions::default());
        assert!((m.x[0] - 0.0).abs() < 1e-6 && (m.x[1] - 0.2).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn never_worse_than_start_and_budget_respected() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            if x[0] > 0.3 { f64::NAN } else { (x[0] - 0.2).abs() }
        };
        let opts = NelderMeadOptions { max_evals: 30, ..Default::default() };
        let m = minimize(f, &[0.25], &[0.0], &[1.0], &opts);
        assert!(m.value <= 0.05);
        assert!(m.evals <= opts.max_evals + 2);
        assert_eq!(calls, m.evals);
    }

    #[test]
    fn rosenbrock_with_restart() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = NelderMeadOptions { max_evals: 2000, initial_step: 0.05, restarts: 2, ..Default::default() };
        let m = minimize(f, &[-1.2, 1.0], &[-3.0, -3.0], &[3.0, 3.0], &opts);
        assert!(m.value < 1e-6, "{m:?}");
    }
}
