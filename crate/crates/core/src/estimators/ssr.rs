//! Stable-spline regularization combined with a log-det Hankel rank penalty.
//!
//! The log-det term is replaced by its variational quadratic upper bound
//! `tr[H~ H~^T Q]`, which turns the prior precision into
//! `A = lambda1 P^T (W2 Q W2^T (x) W1^T W1) P + lambda2 K^{-1}`. For fixed
//! hyperparameters the estimate is the Gaussian posterior mean; `Q` is
//! rebuilt from the SVD of the current weighted Hankel matrix, and
//! `(lambda1, lambda2)` are tuned by marginal likelihood. Iterations stop as
//! soon as the marginal likelihood fails to decrease.

use nalgebra::{DMatrix, DVector};

use super::ss::{ss_estimate, SsEstimate, SsOptions};
use crate::data::{build_regressor, stack_outputs, Dataset, Regressor};
use crate::error::{Error, Result};
use crate::hankel::HankelSpec;
use crate::impulse::ImpulseResponse;
use crate::kernels::{KernelModel, KernelOrder};
use crate::linalg;
use crate::optim::{self, NelderMeadOptions};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HankelWeighting {
    /// `W1 = I`, `W2 = I`.
    Identity,
    /// Data-driven whitening weights, see [`crate::hankel::surrogate_weights`].
    Surrogate,
}

#[derive(Debug, Clone)]
pub struct SsrHyperparameters<T: Real> {
    pub lambda1: T,
    pub lambda2: T,
    pub q: DMatrix<T>,
    pub sigma: Vec<T>,
}

/// `P^T (W2 Q W2^T (x) W1^T W1) P`, accumulated through the selection map.
pub fn rank_penalty_matrix<T: Real>(q: &DMatrix<T>, spec: &HankelSpec<T>) -> Result<DMatrix<T>> {
    let (rows, cols) = (spec.hankel_rows(), spec.hankel_cols());
    if q.shape() != (rows, rows) {
        return Err(Error::Dimension(format!("Q is {:?}, expected {rows}x{rows}", q.shape())));
    }
    let left = &spec.w2 * q * spec.w2.transpose();
    let right = spec.w1.tr_mul(&spec.w1);
    // nonzero pattern of the right factor, per column index
    let right_nz: Vec<Vec<(usize, T)>> = (0..cols)
        .map(|b| (0..cols).filter(|&b2| right[(b, b2)] != T::zero()).map(|b2| (b2, right[(b, b2)])).collect())
        .collect();
    let src = spec.map.source();
    let n = spec.map.columns();
    let mut out = DMatrix::zeros(n, n);
    for a in 0..rows {
        for a2 in 0..rows {
            let la = left[(a, a2)];
            if la == T::zero() {
                continue;
            }
            for b in 0..cols {
                let s = src[a * cols + b];
                for &(b2, rc) in &right_nz[b] {
                    out[(s, src[a2 * cols + b2])] += la * rc;
                }
            }
        }
    }
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// `A(Q, lambda1, lambda2) = lambda1 P^T (W2 Q W2^T (x) W1^T W1) P + lambda2 K^{-1}`.
pub fn a_matrix<T: Real>(q: &DMatrix<T>, lambda1: T, lambda2: T, k: &DMatrix<T>, spec: &HankelSpec<T>) -> Result<DMatrix<T>> {
    let k_inv = linalg::spd_inverse(k, || "prior covariance K".into())?;
    let mut a = k_inv * lambda2;
    if lambda1 != T::zero() {
        a += rank_penalty_matrix(q, spec)? * lambda1;
    }
    Ok(a)
}

/// Noise-weighted normal equations: `Phi~^T Phi~` and `Phi~^T Y~`.
fn weighted_normal_equations<T: Real>(reg: &Regressor<T>, d: &Dataset<T>, sigma: &[T]) -> Result<(DMatrix<T>, DVector<T>, T)> {
    let p = d.outputs();
    if sigma.len() != p || sigma.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::Parameter("noise variances must be positive, one per output".into()));
    }
    let gram = reg.gram();
    let w = reg.block_width();
    let mut g = DMatrix::zeros(w * p, w * p);
    for i in 0..p {
        g.view_mut((i * w, i * w), (w, w)).copy_from(&(&gram / sigma[i]));
    }
    let n = d.samples();
    let mut y = stack_outputs(d);
    for i in 0..p {
        let scale = T::one() / sigma[i];
        for t in 0..n {
            y[i * n + t] *= scale;
        }
    }
    // y now holds (Sigma^{-1} (x) I) Y
    let b = reg.transpose_apply(&y);
    let yy = stack_outputs(d)
        .iter()
        .enumerate()
        .map(|(q, &v)| v * v / sigma[q / n])
        .fold(T::zero(), |acc, v| acc + v);
    Ok((g, b, yy))
}

/// Closed-form minimizer `[Phi~^T Phi~ + A]^{-1} Phi~^T Y~`.
pub fn map_estimate<T: Real>(d: &Dataset<T>, a: &DMatrix<T>, sigma: &[T], lags: usize) -> Result<ImpulseResponse<T>> {
    let reg = build_regressor(d, lags);
    let dim = reg.block_width() * d.outputs();
    if a.shape() != (dim, dim) {
        return Err(Error::Dimension(format!("A is {:?}, expected {dim}x{dim}", a.shape())));
    }
    let (g, b, _) = weighted_normal_equations(&reg, d, sigma)?;
    let mut m = g + a;
    linalg::symmetrize(&mut m);
    let chol = linalg::cholesky(m, || {
        format!("normal equations of the MAP estimate ({dim} unknowns); A may be indefinite or badly conditioned")
    })?;
    ImpulseResponse::new(d.outputs(), d.inputs(), lags, chol.solve(&b))
}

/// `Y^T Lambda^{-1} Y + log|Lambda|` with `Lambda = Sigma (x) I_N + Phi A^{-1} Phi^T`,
/// evaluated in the T*m*p-dimensional parameter space.
pub fn ssr_negative_log_ml<T: Real>(
    d: &Dataset<T>,
    q: &DMatrix<T>,
    lambda1: T,
    lambda2: T,
    k: &DMatrix<T>,
    sigma: &[T],
    spec: &HankelSpec<T>,
) -> Result<T> {
    let a = a_matrix(q, lambda1, lambda2, k, spec)?;
    let reg = build_regressor(d, spec.lags);
    let (g, b, yy) = weighted_normal_equations(&reg, d, sigma)?;
    let chol_a = linalg::cholesky(a.clone(), || format!("A(Q, {lambda1}, {lambda2})"))?;
    let mut m = g + a;
    linalg::symmetrize(&mut m);
    let chol_m = linalg::cholesky(m, || format!("Phi~^T Phi~ + A(Q, {lambda1}, {lambda2})"))?;
    let theta = chol_m.solve(&b);
    let n = T::from_count(d.samples());
    let log_sigma = sigma.iter().fold(T::zero(), |acc, s| acc + s.ln()) * n;
    Ok(yy - b.dot(&theta) + log_sigma + linalg::log_det(&chol_m) - linalg::log_det(&chol_a))
}

/// `sqrt(c log(log N) / N)`: singular values below this are treated as noise.
pub fn q_threshold<T: Real>(samples: usize, c: usize) -> T {
    let n = T::from_count(samples);
    (T::from_count(c) * n.ln().ln() / n).sqrt()
}

/// `10 N / (c log(log N))`: the penalty given to every noise direction.
pub fn q_saturation<T: Real>(samples: usize, c: usize) -> T {
    let n = T::from_count(samples);
    T::cst(10.0) * n / (T::from_count(c) * n.ln().ln())
}

#[derive(Debug, Clone)]
pub struct QUpdate<T: Real> {
    pub q: DMatrix<T>,
    /// Singular values of the weighted Hankel matrix, decreasing.
    pub singular_values: Vec<T>,
    pub threshold: T,
    pub saturation: T,
    /// Singular values at or above the threshold.
    pub signal_rank: usize,
}

/// `Q = U diag(s_Q) U^T` from the SVD of the weighted Hankel matrix, with
/// `s_Q = s^-2` above the threshold and the saturation value below it.
pub fn update_q<T: Real>(theta: &ImpulseResponse<T>, spec: &HankelSpec<T>, samples: usize) -> Result<QUpdate<T>> {
    if samples < 16 {
        return Err(Error::Parameter(format!("Q update needs N >= 16, got {samples}")));
    }
    let h = spec.weighted_hankel(theta)?;
    let rows = h.nrows();
    let (eig, u) = linalg::sorted_eigen(&h * h.transpose());
    let threshold = q_threshold::<T>(samples, rows);
    let saturation = q_saturation::<T>(samples, rows);
    let singular_values: Vec<T> = eig.iter().map(|&e| e.max(T::zero()).sqrt()).collect();
    let s_q: Vec<T> = singular_values
        .iter()
        .map(|&s| if s >= threshold { T::one() / (s * s) } else { saturation })
        .collect();
    let signal_rank = singular_values.iter().filter(|&&s| s >= threshold).count();
    let mut q = &u * DMatrix::from_diagonal(&DVector::from_vec(s_q)) * u.transpose();
    linalg::symmetrize(&mut q);
    Ok(QUpdate { q, singular_values, threshold, saturation, signal_rank })
}

/// `tr[X Psi^{-1}] + log|Psi| - dim(X)`, the variational upper bound on `log|X|`.
pub fn variational_rhs<T: Real>(x: &DMatrix<T>, psi: &DMatrix<T>) -> Result<T> {
    let chol = linalg::cholesky(psi.clone(), || "variational parameter Psi".into())?;
    let tr = chol.solve(x).trace();
    Ok(tr + linalg::log_det(&chol) - T::from_count(x.nrows()))
}

/// Returns `(log|H~ H~^T|, bound at Psi = H~ H~^T)`.
pub fn variational_bound_check<T: Real>(theta: &ImpulseResponse<T>, spec: &HankelSpec<T>) -> Result<(T, T)> {
    let h = spec.weighted_hankel(theta)?;
    let mut hht = &h * h.transpose();
    let n = hht.nrows();
    if linalg::cholesky(hht.clone(), String::new).is_err() {
        for i in 0..n {
            hht[(i, i)] += T::cst(1e-12);
        }
    }
    let chol = linalg::cholesky(hht.clone(), || "H~ H~^T".into())?;
    let lhs = linalg::log_det(&chol);
    let rhs = variational_rhs(&hht, &hht)?;
    Ok((lhs, rhs))
}

/// Marginal-likelihood machinery for a fixed dataset, prior `K` and noise
/// covariance.
///
/// Works in whitened coordinates `theta = K_c V gamma`, where `K = K_c K_c^T`
/// and `V` diagonalizes `K_c^T P^T (..) P K_c` for the current `Q`. The prior
/// precision on `gamma` is then `diag(lambda2 + lambda1 d)`, so each
/// evaluation costs one Cholesky of size T*m*p and never forms `K^{-1}`.
#[derive(Debug, Clone)]
pub struct SsrProblem<T: Real> {
    spec: HankelSpec<T>,
    prior: DMatrix<T>,
    prior_factor: DMatrix<T>,
    sigma: Vec<T>,
    samples: usize,
    outputs: usize,
    inputs: usize,
    white_gram: DMatrix<T>,
    white_rhs: DVector<T>,
    yy: T,
    log_det_noise: T,
}

/// Per-`Q` rotation of an [`SsrProblem`].
#[derive(Debug, Clone)]
pub struct PreparedQ<T: Real> {
    pub q: DMatrix<T>,
    spectrum: DVector<T>,
    basis: DMatrix<T>,
    gram: DMatrix<T>,
    rhs: DVector<T>,
}

impl<T: Real> SsrProblem<T> {
    pub fn new(d: &Dataset<T>, kernel: &KernelModel<T>, sigma: &[T], spec: HankelSpec<T>) -> Result<Self> {
        if kernel.lags != spec.lags || kernel.outputs != d.outputs() || kernel.inputs != d.inputs() {
            return Err(Error::Dimension("kernel model, Hankel spec and dataset disagree".into()));
        }
        let prior = kernel.assemble_prior()?;
        let prior_factor = linalg::lower_factor(&prior, || "prior covariance K".into())?;
        let reg = build_regressor(d, spec.lags);
        let (g, b, yy) = weighted_normal_equations(&reg, d, sigma)?;
        let mut white_gram = prior_factor.tr_mul(&g) * &prior_factor;
        linalg::symmetrize(&mut white_gram);
        let white_rhs = prior_factor.tr_mul(&b);
        let log_det_noise = sigma.iter().fold(T::zero(), |acc, s| acc + s.ln()) * T::from_count(d.samples());
        Ok(Self {
            spec,
            prior,
            prior_factor,
            sigma: sigma.to_vec(),
            samples: d.samples(),
            outputs: d.outputs(),
            inputs: d.inputs(),
            white_gram,
            white_rhs,
            yy,
            log_det_noise,
        })
    }

    pub fn spec(&self) -> &HankelSpec<T> {
        &self.spec
    }

    pub fn prior(&self) -> &DMatrix<T> {
        &self.prior
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn prepare(&self, q: &DMatrix<T>) -> Result<PreparedQ<T>> {
        let a1 = rank_penalty_matrix(q, &self.spec)?;
        let mut s = self.prior_factor.tr_mul(&a1) * &self.prior_factor;
        linalg::symmetrize(&mut s);
        let (spectrum, basis) = linalg::sorted_eigen(s);
        let spectrum = spectrum.map(|v| v.max(T::zero()));
        let mut gram = basis.tr_mul(&self.white_gram) * &basis;
        linalg::symmetrize(&mut gram);
        let rhs = basis.tr_mul(&self.white_rhs);
        Ok(PreparedQ { q: q.clone(), spectrum, basis, gram, rhs })
    }

    fn solve(&self, prep: &PreparedQ<T>, lambda1: T, lambda2: T) -> Result<(DVector<T>, T)> {
        if lambda1 < T::zero() || !(lambda2 > T::zero()) {
            return Err(Error::Parameter(format!("lambda1={lambda1} must be >= 0 and lambda2={lambda2} > 0")));
        }
        let precision = prep.spectrum.map(|d| lambda2 + lambda1 * d);
        let mut m = prep.gram.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += precision[i];
        }
        let chol = linalg::cholesky(m, || format!("inner marginal-likelihood matrix at lambda1={lambda1}, lambda2={lambda2}"))?;
        let gamma = chol.solve(&prep.rhs);
        let log_prec = precision.iter().fold(T::zero(), |acc, v| acc + v.ln());
        let nll = self.yy - prep.rhs.dot(&gamma) + self.log_det_noise + linalg::log_det(&chol) - log_prec;
        Ok((gamma, nll))
    }

    pub fn negative_log_ml(&self, prep: &PreparedQ<T>, lambda1: T, lambda2: T) -> Result<T> {
        self.solve(prep, lambda1, lambda2).map(|(_, v)| v)
    }

    /// MAP estimate under `A(Q, lambda1, lambda2)`.
    pub fn estimate(&self, prep: &PreparedQ<T>, lambda1: T, lambda2: T) -> Result<ImpulseResponse<T>> {
        let (gamma, _) = self.solve(prep, lambda1, lambda2)?;
        let theta = &self.prior_factor * (&prep.basis * gamma);
        ImpulseResponse::new(self.outputs, self.inputs, self.spec.lags, theta)
    }

    /// `lambda2` minimizing the marginal likelihood with the rank penalty off.
    pub fn smoothness_only_lambda2(&self, search: &NelderMeadOptions) -> Result<T> {
        let q = DMatrix::identity(self.spec.hankel_rows(), self.spec.hankel_rows());
        let prep = self.prepare(&q)?;
        let obj = |x: &[f64]| {
            self.negative_log_ml(&prep, T::zero(), T::cst(x[0].exp()))
                .map(|v| v.as_f64())
                .unwrap_or(f64::INFINITY)
        };
        let bound = 6.0 * std::f64::consts::LN_10;
        let found = optim::minimize(obj, &[0.0], &[-bound], &[bound], search);
        if !found.value.is_finite() {
            return Err(Error::NotPositiveDefinite("marginal likelihood not finite for any lambda2".into()));
        }
        Ok(T::cst(found.x[0].exp()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LambdaBounds {
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct LambdaSearch<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub nll: T,
    pub initial_nll: T,
    pub evals: usize,
    /// Every probe failed numerically; the initial values were kept.
    pub failed: bool,
}

/// Minimizes the marginal likelihood over `(log lambda1, log lambda2)` for a
/// fixed `Q`. A coarse scan over `lambda1` seeds the simplex, and the result
/// is never worse than `init`. With `lambda1` bounds `(0, 0)` only `lambda2`
/// is searched.
pub fn optimize_lambdas<T: Real>(
    problem: &SsrProblem<T>,
    prep: &PreparedQ<T>,
    init: (T, T),
    bounds: &LambdaBounds,
    search: &NelderMeadOptions,
) -> LambdaSearch<T> {
    let eval = |l1: f64, l2: f64| -> f64 {
        problem
            .negative_log_ml(prep, T::cst(l1), T::cst(l2))
            .map(|v| v.as_f64())
            .unwrap_or(f64::INFINITY)
    };
    let (l1_0, l2_0) = (init.0.as_f64(), init.1.as_f64());
    let initial = eval(l1_0, l2_0);
    let (lo2, hi2) = (bounds.lambda2.0.ln(), bounds.lambda2.1.ln());
    let mut evals = 1;

    let (l1, l2, value) = if bounds.lambda1.1 <= 0.0 {
        let obj = |x: &[f64]| eval(0.0, x[0].exp());
        let found = optim::minimize(obj, &[l2_0.max(f64::MIN_POSITIVE).ln()], &[lo2], &[hi2], search);
        evals += found.evals;
        (0.0, found.x[0].exp(), found.value)
    } else {
        let (lo1, hi1) = (bounds.lambda1.0.ln(), bounds.lambda1.1.ln());
        let clamp1 = l1_0.max(bounds.lambda1.0).min(bounds.lambda1.1);
        let clamp2 = l2_0.max(bounds.lambda2.0).min(bounds.lambda2.1);
        let mut start = (clamp1.ln(), clamp2.ln(), eval(clamp1, clamp2));
        evals += 1;
        let decades = ((hi1 - lo1) / std::f64::consts::LN_10).round() as usize;
        for i in 0..=decades {
            let x = lo1 + (hi1 - lo1) * i as f64 / decades.max(1) as f64;
            let v = eval(x.exp(), clamp2);
            evals += 1;
            if v < start.2 {
                start = (x, clamp2.ln(), v);
            }
        }
        let obj = |x: &[f64]| eval(x[0].exp(), x[1].exp());
        let found = optim::minimize(obj, &[start.0, start.1], &[lo1, lo2], &[hi1, hi2], search);
        evals += found.evals;
        (found.x[0].exp(), found.x[1].exp(), found.value)
    };

    if value.is_finite() && (value <= initial || !initial.is_finite()) {
        LambdaSearch { lambda1: T::cst(l1), lambda2: T::cst(l2), nll: T::cst(value), initial_nll: T::cst(initial), evals, failed: false }
    } else {
        LambdaSearch { lambda1: init.0, lambda2: init.1, nll: T::cst(initial), initial_nll: T::cst(initial), evals, failed: !value.is_finite() }
    }
}

#[derive(Debug, Clone)]
pub struct SsrOptions {
    pub order: KernelOrder,
    pub lags: usize,
    pub weighting: HankelWeighting,
    pub max_iter: usize,
    /// When false, `lambda1` is pinned to zero (smoothness prior only).
    pub rank_penalty: bool,
    pub lambda1_bounds: (f64, f64),
    /// `lambda2 >= floor_factor * lambda2_ss`.
    pub lambda2_floor_factor: f64,
    /// `lambda2 <= ceiling_factor * lambda2_ss`.
    pub lambda2_ceiling_factor: f64,
    pub search: NelderMeadOptions,
}

impl SsrOptions {
    pub fn new(order: KernelOrder, lags: usize) -> Self {
        Self {
            order,
            lags,
            weighting: HankelWeighting::Identity,
            max_iter: 30,
            rank_penalty: true,
            lambda1_bounds: (1e-8, 1e6),
            lambda2_floor_factor: 1e-3,
            lambda2_ceiling_factor: 1e6,
            search: NelderMeadOptions { max_evals: 200, initial_step: 0.1, f_tol: 1e-9, x_tol: 1e-4, restarts: 1 },
        }
    }
}

/// One accepted iterate: hyperparameters and the MAP estimate they induce.
#[derive(Debug, Clone)]
pub struct SsrState<T: Real> {
    pub iteration: usize,
    pub theta: ImpulseResponse<T>,
    pub lambda1: T,
    pub lambda2: T,
    pub q: DMatrix<T>,
    pub nll: T,
    pub signal_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The marginal likelihood did not decrease.
    NoDecrease,
    MaxIterations,
    /// An inner step failed; the last accepted state is returned.
    Failure,
}

#[derive(Debug, Clone)]
pub struct SsrFit<T: Real> {
    pub estimate: ImpulseResponse<T>,
    /// Accepted states; `nll` is strictly decreasing along it.
    pub trace: Vec<SsrState<T>>,
    pub ss: SsEstimate<T>,
    pub spec: HankelSpec<T>,
    pub lambda2_ss: T,
    pub lambda2_floor: T,
    pub stop: StopReason,
    pub diagnostics: Vec<String>,
}

impl<T: Real> SsrFit<T> {
    pub fn final_state(&self) -> &SsrState<T> {
        self.trace.last().expect("trace is never empty")
    }

    pub fn hyperparameters(&self) -> SsrHyperparameters<T> {
        let s = self.final_state();
        SsrHyperparameters { lambda1: s.lambda1, lambda2: s.lambda2, q: s.q.clone(), sigma: self.ss.sigma.clone() }
    }
}

pub fn ssr_fit<T: Real>(d: &Dataset<T>, opts: &SsrOptions) -> Result<SsrFit<T>> {
    let ss = ss_estimate(d, &SsOptions::new(opts.order, opts.lags))?;
    ssr_fit_from(d, ss, opts)
}

/// Runs the block-coordinate iterations starting from an existing
/// stable-spline fit (which supplies `K`, the initial estimate and `Sigma`).
pub fn ssr_fit_from<T: Real>(d: &Dataset<T>, ss: SsEstimate<T>, opts: &SsrOptions) -> Result<SsrFit<T>> {
    let spec = match opts.weighting {
        HankelWeighting::Identity => HankelSpec::identity(opts.lags, d.outputs(), d.inputs())?,
        HankelWeighting::Surrogate => HankelSpec::weighted(d, opts.lags)?,
    };
    let problem = SsrProblem::new(d, &ss.kernel, &ss.sigma, spec.clone())?;
    let n = d.samples();
    let lambda2_ss = problem.smoothness_only_lambda2(&opts.search)?;
    let l2_ss = lambda2_ss.as_f64();
    let bounds = LambdaBounds {
        lambda1: if opts.rank_penalty { opts.lambda1_bounds } else { (0.0, 0.0) },
        lambda2: (opts.lambda2_floor_factor * l2_ss, opts.lambda2_ceiling_factor * l2_ss),
    };
    let mut diagnostics = Vec::new();

    let state_for = |iteration: usize, theta_prev: &ImpulseResponse<T>, init: (T, T), diagnostics: &mut Vec<String>| -> Result<SsrState<T>> {
        let qu = update_q(theta_prev, &spec, n)?;
        let prep = problem.prepare(&qu.q)?;
        let found = optimize_lambdas(&problem, &prep, init, &bounds, &opts.search);
        if found.failed {
            diagnostics.push(format!("iteration {iteration}: every lambda probe failed, kept initial values"));
        }
        let theta = problem.estimate(&prep, found.lambda1, found.lambda2)?;
        Ok(SsrState {
            iteration,
            theta,
            lambda1: found.lambda1,
            lambda2: found.lambda2,
            q: qu.q,
            nll: found.nll,
            signal_rank: qu.signal_rank,
        })
    };

    let init = (if opts.rank_penalty { T::cst(opts.lambda1_bounds.0) } else { T::zero() }, lambda2_ss);
    let first = state_for(0, &ss.theta, init, &mut diagnostics)?;
    let mut trace = vec![first];
    let mut stop = StopReason::MaxIterations;
    for k in 1..=opts.max_iter {
        let prev = trace.last().expect("nonempty");
        match state_for(k, &prev.theta, (prev.lambda1, prev.lambda2), &mut diagnostics) {
            Ok(next) if next.nll < prev.nll => trace.push(next),
            Ok(_) => {
                stop = StopReason::NoDecrease;
                break;
            }
            Err(e) => {
                diagnostics.push(format!("iteration {k}: {e}"));
                stop = StopReason::Failure;
                break;
            }
        }
    }
    log::debug!(
        "ssr: {} accepted states, stop={stop:?}, final nll={}",
        trace.len(),
        trace.last().map(|s| s.nll.as_f64()).unwrap_or(f64::NAN)
    );
    let estimate = trace.last().expect("nonempty").theta.clone();
    Ok(SsrFit {
        estimate,
        trace,
        ss,
        spec,
        lambda2_ss,
        lambda2_floor: T::cst(bounds.lambda2.0),
        stop,
        diagnostics,
    })
}
