//! Atomic-norm baseline for SISO data: a dictionary of normalized
//! second-order impulse responses and an l1-penalized fit of their weights.

use nalgebra::{DMatrix, DVector};

use crate::data::{build_regressor, Dataset};
use crate::error::{Error, Result};
use crate::impulse::ImpulseResponse;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct AtomDictionary<T: Real> {
    /// `(radius, angle)` of the upper pole of each atom, in column order.
    pub poles: Vec<(T, T)>,
    /// T x (number of atoms); every column has unit Euclidean norm.
    pub atoms: DMatrix<T>,
}

pub fn pole_radii() -> Vec<f64> {
    let mut radii: Vec<f64> = (0..30).map(|i| 0.41 + 0.02 * i as f64).collect();
    radii.extend([0.995, 0.999]);
    radii
}

pub fn pole_angles() -> Vec<f64> {
    (1..30).map(|k| k as f64 * std::f64::consts::PI / 30.0).collect()
}

/// Impulse response of `z / ((z - p)(z - p*))` with `p = rho e^{j angle}`:
/// `g(1) = 1`, `g(n+1) = 2 rho cos(angle) g(n) - rho^2 g(n-1)`.
pub fn second_order_response<T: Real>(rho: T, angle: T, lags: usize) -> Vec<T> {
    let a1 = T::cst(2.0) * rho * angle.cos();
    let a2 = rho * rho;
    let mut g = Vec::with_capacity(lags);
    let (mut prev, mut cur) = (T::zero(), T::one());
    for _ in 0..lags {
        g.push(cur);
        let next = a1 * cur - a2 * prev;
        prev = cur;
        cur = next;
    }
    g
}

pub fn atom_dictionary<T: Real>(lags: usize) -> Result<AtomDictionary<T>> {
    if lags < 2 {
        return Err(Error::Parameter(format!("atom dictionary needs T >= 2, got {lags}")));
    }
    let radii = pole_radii();
    let angles = pole_angles();
    let mut poles = Vec::with_capacity(radii.len() * angles.len());
    let mut atoms = DMatrix::zeros(lags, radii.len() * angles.len());
    let mut col = 0;
    for &rho in &radii {
        for &angle in &angles {
            let (rho, angle) = (T::cst(rho), T::cst(angle));
            let g = DVector::from_vec(second_order_response(rho, angle, lags));
            let norm = g.norm();
            atoms.set_column(col, &(g / norm));
            poles.push((rho, angle));
            col += 1;
        }
    }
    Ok(AtomDictionary { poles, atoms })
}

#[derive(Debug, Clone, Copy)]
pub struct AtomOptions {
    pub lags: usize,
    /// Points on the log-spaced penalty grid.
    pub grid_len: usize,
    /// Smallest penalty as a fraction of the penalty that zeroes every weight.
    pub min_ratio: f64,
    /// Trailing fraction of samples held out for selecting the penalty.
    pub holdout: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl AtomOptions {
    pub fn new(lags: usize) -> Self {
        Self { lags, grid_len: 20, min_ratio: 1e-4, holdout: 0.25, tol: 1e-10, max_sweeps: 5_000 }
    }
}

#[derive(Debug, Clone)]
pub struct LassoSolution<T: Real> {
    pub weights: DVector<T>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Cyclic coordinate descent for `||y - X w||^2 + mu ||w||_1`. Between full
/// passes it sweeps the active set and takes Newton steps on it with the
/// signs held fixed, which matters when columns are strongly correlated.
pub fn lasso<T: Real>(x: &DMatrix<T>, y: &DVector<T>, mu: T, warm: Option<&DVector<T>>, tol: f64, max_sweeps: usize) -> LassoSolution<T> {
    let cols = x.ncols();
    let norms: Vec<T> = (0..cols).map(|j| x.column(j).norm_squared()).collect();
    let mut w = warm.cloned().unwrap_or_else(|| DVector::zeros(cols));
    let mut r = y - x * &w;
    let half_mu = mu * T::cst(0.5);
    let scale = T::cst(tol) * y.norm().max(T::cst(1e-300));
    let mut sweeps = 0;

    let sweep = |idx: &mut dyn Iterator<Item = usize>, w: &mut DVector<T>, r: &mut DVector<T>| -> T {
        let mut max_change = T::zero();
        for j in idx {
            if norms[j] == T::zero() {
                continue;
            }
            let col = x.column(j);
            let old = w[j];
            let rho = col.dot(r) + norms[j] * old;
            let new = soft_threshold(rho, half_mu) / norms[j];
            if new != old {
                r.axpy(old - new, &col, T::one());
                w[j] = new;
                max_change = max_change.max((new - old).abs() * norms[j].sqrt());
            }
        }
        max_change
    };

    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        if sweep(&mut (0..cols), &mut w, &mut r) <= scale {
            converged = true;
            break;
        }
        while sweeps < max_sweeps {
            let active: Vec<usize> = (0..cols).filter(|&j| w[j] != T::zero()).collect();
            let mut settled = false;
            for _ in 0..4 {
                sweeps += 1;
                if sweep(&mut active.iter().copied(), &mut w, &mut r) <= scale {
                    settled = true;
                    break;
                }
            }
            if settled {
                break;
            }
            sweeps += 1;
            if !newton_step(x, y, half_mu, &active, &mut w) {
                continue;
            }
            r = y - x * &w;
        }
    }
    LassoSolution { weights: w, sweeps, converged }
}

/// Moves the active weights toward the minimizer of the smooth objective on
/// the current sign pattern, stopping where a weight first reaches zero.
/// Returns false if the reduced Gram matrix is not positive definite.
fn newton_step<T: Real>(x: &DMatrix<T>, y: &DVector<T>, half_mu: T, active: &[usize], w: &mut DVector<T>) -> bool {
    if active.is_empty() || active.len() > x.nrows() {
        return false;
    }
    let xa = x.select_columns(active);
    let signs = DVector::from_iterator(active.len(), active.iter().map(|&j| w[j].signum()));
    let Some(chol) = xa.tr_mul(&xa).cholesky() else {
        return false;
    };
    let diag = chol.l_dirty().diagonal();
    if diag.min() <= diag.max() * T::cst(1e-6) {
        return false;
    }
    let target = chol.solve(&(xa.tr_mul(y) - signs * half_mu));
    let mut step = T::one();
    let mut hits = Vec::new();
    for (a, &j) in active.iter().enumerate() {
        let delta = target[a] - w[j];
        if target[a].signum() != w[j].signum() && delta != T::zero() {
            let t = -w[j] / delta;
            if t < step {
                step = t;
                hits.clear();
            }
            if t <= step {
                hits.push(j);
            }
        }
    }
    for (a, &j) in active.iter().enumerate() {
        let cur = w[j];
        w[j] = cur + step * (target[a] - cur);
    }
    for j in hits {
        w[j] = T::zero();
    }
    true
}

fn soft_threshold<T: Real>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

/// Largest violation of the optimality conditions
/// `2 X_j^T r = mu sign(w_j)` (active) and `|2 X_j^T r| <= mu` (inactive).
pub fn kkt_residual<T: Real>(x: &DMatrix<T>, y: &DVector<T>, w: &DVector<T>, mu: T) -> T {
    let r = y - x * w;
    let g = x.tr_mul(&r) * T::cst(2.0);
    let mut worst = T::zero();
    for j in 0..w.len() {
        let v = if w[j] > T::zero() {
            (g[j] - mu).abs()
        } else if w[j] < T::zero() {
            (g[j] + mu).abs()
        } else {
            (g[j].abs() - mu).max(T::zero())
        };
        worst = worst.max(v);
    }
    worst
}

/// Smallest penalty for which `w = 0` is optimal.
pub fn max_penalty<T: Real>(x: &DMatrix<T>, y: &DVector<T>) -> T {
    x.tr_mul(y).amax() * T::cst(2.0)
}

#[derive(Debug, Clone)]
pub struct AtomFit<T: Real> {
    pub theta: ImpulseResponse<T>,
    /// Atom weights, so that `theta = D weights`.
    pub weights: DVector<T>,
    /// Penalty used for the final fit on all samples.
    pub mu: T,
    /// Optimality violation in the standardized coordinates.
    pub kkt_residual: T,
    /// `(penalty, held-out squared error)` along the grid.
    pub path: Vec<(T, T)>,
}

/// Regression matrix `Phi D` with unit-norm columns, and the column norms
/// that were divided out.
pub fn standardized_design<T: Real>(d: &Dataset<T>, dict: &AtomDictionary<T>, lags: usize) -> (DMatrix<T>, Vec<T>) {
    let mut x = build_regressor(d, lags).phi() * &dict.atoms;
    let mut norms = Vec::with_capacity(x.ncols());
    for mut col in x.column_iter_mut() {
        let n = col.norm();
        if n > T::zero() {
            col /= n;
        }
        norms.push(n);
    }
    (x, norms)
}

/// Fits the weights at a fixed penalty on all samples.
pub fn atom_fit_with_penalty<T: Real>(d: &Dataset<T>, dict: &AtomDictionary<T>, mu: T, opts: &AtomOptions) -> Result<AtomFit<T>> {
    check_siso(d)?;
    let (x, norms) = standardized_design(d, dict, opts.lags);
    let y = d.y().column(0).into_owned();
    let sol = lasso(&x, &y, mu, None, opts.tol, opts.max_sweeps);
    finish(&x, &norms, &y, dict, sol.weights, mu, Vec::new(), opts.lags)
}

fn check_siso<T: Real>(d: &Dataset<T>) -> Result<()> {
    if d.outputs() != 1 || d.inputs() != 1 {
        return Err(Error::Unsupported("ATOM is SISO-only".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Real>(
    x: &DMatrix<T>,
    norms: &[T],
    y: &DVector<T>,
    dict: &AtomDictionary<T>,
    v: DVector<T>,
    mu: T,
    path: Vec<(T, T)>,
    lags: usize,
) -> Result<AtomFit<T>> {
    let kkt = kkt_residual(x, y, &v, mu);
    let w = DVector::from_iterator(v.len(), v.iter().zip(norms).map(|(&v, &n)| if n > T::zero() { v / n } else { T::zero() }));
    let theta = ImpulseResponse::new(1, 1, lags, &dict.atoms * &w)?;
    Ok(AtomFit { theta, weights: w, mu, kkt_residual: kkt, path })
}

/// The penalty acts on weights of the standardized design, i.e. on
/// `||Phi d_j|| |w_j|`, so that no atom is favoured by the input scaling.
/// Chooses the penalty on a log grid by fitting the first samples and
/// scoring one-step predictions on the trailing hold-out block, then refits
/// on all samples from the selected weights. The penalty is rescaled by the sample-count ratio for the
/// refit, since the loss is a sum over samples.
pub fn atom_estimate<T: Real>(d: &Dataset<T>, opts: &AtomOptions) -> Result<AtomFit<T>> {
    check_siso(d)?;
    let dict = atom_dictionary::<T>(opts.lags)?;
    let n = d.samples();
    let n_hold = ((n as f64) * opts.holdout).ceil() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(Error::Parameter(format!("hold-out of {n_hold} samples out of {n}")));
    }
    let n_train = n - n_hold;
    let (x, norms) = standardized_design(d, &dict, opts.lags);
    let y = d.y().column(0).into_owned();
    let x_train = x.rows(0, n_train).into_owned();
    let y_train = y.rows(0, n_train).into_owned();
    let x_hold = x.rows(n_train, n_hold).into_owned();
    let y_hold = y.rows(n_train, n_hold).into_owned();

    let mu_max = max_penalty(&x_train, &y_train);
    if !(mu_max > T::zero()) {
        let w = DVector::zeros(dict.atoms.ncols());
        return finish(&x, &norms, &y, &dict, w, T::zero(), Vec::new(), opts.lags);
    }
    let steps = opts.grid_len.max(2) - 1;
    let mut path = Vec::with_capacity(opts.grid_len);
    let mut warm: Option<DVector<T>> = None;
    let mut best = (T::zero(), DVector::zeros(x.ncols()));
    let mut best_err: Option<T> = None;
    for i in 0..=steps {
        let mu = mu_max * T::cst(opts.min_ratio.powf(i as f64 / steps as f64));
        let sol = lasso(&x_train, &y_train, mu, warm.as_ref(), opts.tol, opts.max_sweeps);
        let err = (&y_hold - &x_hold * &sol.weights).norm_squared();
        path.push((mu, err));
        if best_err.is_none_or(|b| err < b) {
            best_err = Some(err);
            best = (mu, sol.weights.clone());
        }
        warm = Some(sol.weights);
    }
    let mu = best.0 * T::from_count(n) / T::from_count(n_train);
    let sol = lasso(&x, &y, mu, Some(&best.1), opts.tol, opts.max_sweeps);
    finish(&x, &norms, &y, &dict, sol.weights, mu, path, opts.lags)
}
