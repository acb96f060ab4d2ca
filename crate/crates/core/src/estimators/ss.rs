//! Stable-spline estimator: per-output-channel kernel regression with
//! `(alpha, scale, sigma)` tuned by marginal likelihood.

use nalgebra::{DMatrix, DVector};

use crate::data::{build_regressor, Dataset, Regressor};
use crate::error::{Error, Result};
use crate::impulse::ImpulseResponse;
use crate::kernels::{add_relative_jitter, stable_spline_gram, ChannelKernel, KernelModel, KernelOrder};
use crate::linalg;
use crate::optim::{self, NelderMeadOptions};
use crate::scalar::Real;

/// Variance floor for perfectly fitted channels.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// `sigma_i = mean_t (y_i(t) - yhat_i(t))^2`, floored at [`VARIANCE_FLOOR`].
pub fn estimate_noise_variance<T: Real>(d: &Dataset<T>, theta: &ImpulseResponse<T>) -> Result<Vec<T>> {
    if theta.outputs() != d.outputs() || theta.inputs() != d.inputs() {
        return Err(Error::Dimension("impulse response does not match dataset channels".into()));
    }
    let reg = build_regressor(d, theta.len());
    let pred = reg.predict(theta);
    let n = d.samples();
    Ok((0..d.outputs())
        .map(|i| {
            let mut acc = T::zero();
            for t in 0..n {
                let e = d.y()[(t, i)] - pred[i * n + t];
                acc += e * e;
            }
            (acc / T::from_count(n)).max(T::cst(VARIANCE_FLOOR))
        })
        .collect())
}

/// Cached quantities for one output channel.
#[derive(Debug, Clone)]
pub struct ChannelProblem<T: Real> {
    order: KernelOrder,
    lags: usize,
    inputs: usize,
    samples: usize,
    gram: DMatrix<T>,
    phi_ty: DVector<T>,
    yty: T,
}

impl<T: Real> ChannelProblem<T> {
    pub fn new(reg: &Regressor<T>, d: &Dataset<T>, output: usize, order: KernelOrder) -> Self {
        let y = d.y().column(output).into_owned();
        Self {
            order,
            lags: reg.lags(),
            inputs: d.inputs(),
            samples: d.samples(),
            gram: reg.gram(),
            phi_ty: reg.phi().tr_mul(&y),
            yty: y.dot(&y),
        }
    }

    /// Prior covariance of this channel's `T*m` coefficients.
    fn prior(&self, alpha: T, scale: T) -> Result<DMatrix<T>> {
        let g = stable_spline_gram(self.order, alpha, self.lags)? * scale;
        let mut k = linalg::block_diag(&vec![g; self.inputs]);
        add_relative_jitter(&mut k, T::cst(1e-10));
        Ok(k)
    }

    /// Factors `M = I + L^T G L / sigma` with `L L^T` the prior covariance.
    fn factor(&self, alpha: T, scale: T, sigma: T) -> Result<(DMatrix<T>, nalgebra::Cholesky<T, nalgebra::Dyn>)> {
        let l = linalg::lower_factor(&self.prior(alpha, scale)?, || {
            format!("stable-spline prior alpha={alpha}, scale={scale}")
        })?;
        let mut m = l.tr_mul(&self.gram) * &l / sigma;
        for i in 0..m.nrows() {
            m[(i, i)] += T::one();
        }
        linalg::symmetrize(&mut m);
        let chol = linalg::cholesky(m, || {
            format!("marginal-likelihood inner matrix alpha={alpha}, scale={scale}, sigma={sigma}")
        })?;
        Ok((l, chol))
    }

    /// `Y^T Lambda^{-1} Y + log|Lambda|`, `Lambda = sigma I + phi (scale K) phi^T`.
    pub fn negative_log_ml(&self, alpha: T, scale: T, sigma: T) -> Result<T> {
        if !(sigma > T::zero()) {
            return Err(Error::Parameter(format!("noise variance {sigma} must be positive")));
        }
        let (l, chol) = self.factor(alpha, scale, sigma)?;
        let w = l.tr_mul(&self.phi_ty);
        let mut z = w.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut z);
        let quad = self.yty / sigma - z.dot(&z) / (sigma * sigma);
        Ok(quad + T::from_count(self.samples) * sigma.ln() + linalg::log_det(&chol))
    }

    /// Posterior mean of the channel coefficients.
    pub fn posterior_mean(&self, alpha: T, scale: T, sigma: T) -> Result<DVector<T>> {
        let (l, chol) = self.factor(alpha, scale, sigma)?;
        let w = l.tr_mul(&self.phi_ty) / sigma;
        Ok(l * chol.solve(&w))
    }
}

/// Marginal-likelihood criterion for output channel `output` of `d`.
pub fn ss_negative_log_ml<T: Real>(
    d: &Dataset<T>,
    output: usize,
    lags: usize,
    order: KernelOrder,
    alpha: T,
    scale: T,
    sigma: T,
) -> Result<T> {
    if output >= d.outputs() {
        return Err(Error::Dimension(format!("output {output} out of range")));
    }
    let reg = build_regressor(d, lags);
    ChannelProblem::new(&reg, d, output, order).negative_log_ml(alpha, scale, sigma)
}

#[derive(Debug, Clone, Copy)]
pub struct SsOptions {
    pub order: KernelOrder,
    pub lags: usize,
    pub search: NelderMeadOptions,
}

impl SsOptions {
    pub fn new(order: KernelOrder, lags: usize) -> Self {
        Self {
            order,
            lags,
            search: NelderMeadOptions { max_evals: 600, initial_step: 0.1, f_tol: 1e-10, x_tol: 1e-6, restarts: 1 },
        }
    }

    pub fn alpha_bounds(&self) -> (f64, f64) {
        match self.order {
            KernelOrder::First => (0.5, 0.999),
            KernelOrder::Second => (0.6, 0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelHyper<T> {
    pub alpha: T,
    pub scale: T,
    /// Noise variance selected by the marginal likelihood.
    pub sigma: T,
    pub nll: T,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SsEstimate<T: Real> {
    pub theta: ImpulseResponse<T>,
    pub kernel: KernelModel<T>,
    /// Residual variance per output channel.
    pub sigma: Vec<T>,
    pub channels: Vec<ChannelHyper<T>>,
    /// Set when a hyperparameter search hit its budget without converging.
    pub warning: bool,
}

/// Posterior mean with pinned per-output hyperparameters.
pub fn ss_posterior_mean<T: Real>(d: &Dataset<T>, kernel: &KernelModel<T>, sigma_ml: &[T]) -> Result<ImpulseResponse<T>> {
    if kernel.outputs != d.outputs() || kernel.inputs != d.inputs() || sigma_ml.len() != d.outputs() {
        return Err(Error::Dimension("kernel model does not match dataset".into()));
    }
    let reg = build_regressor(d, kernel.lags);
    let width = reg.block_width();
    let mut theta = DVector::zeros(width * d.outputs());
    for i in 0..d.outputs() {
        let ch = kernel.channel(i, 0);
        let prob = ChannelProblem::new(&reg, d, i, kernel.order);
        theta.rows_mut(i * width, width).copy_from(&prob.posterior_mean(ch.alpha, ch.scale, sigma_ml[i])?);
    }
    ImpulseResponse::new(d.outputs(), d.inputs(), kernel.lags, theta)
}

/// Fits every output channel independently; all inputs of one output share
/// `(alpha, scale)`.
pub fn ss_estimate<T: Real>(d: &Dataset<T>, opts: &SsOptions) -> Result<SsEstimate<T>> {
    let reg = build_regressor(d, opts.lags);
    let (p, m) = (d.outputs(), d.inputs());
    let (a_lo, a_hi) = opts.alpha_bounds();
    let u2 = d.u().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d.u().len() as f64;

    let mut hypers = Vec::with_capacity(p);
    let mut warning = false;
    for i in 0..p {
        let prob = ChannelProblem::new(&reg, d, i, opts.order);
        let y2 = (prob.yty.as_f64() / d.samples() as f64).max(1e-300);
        let gram_trace = (1..=opts.lags).map(|k| 0.9f64.powi(k as i32)).sum::<f64>();
        let sigma0 = 0.5 * y2;
        let scale0 = (0.5 * y2 / (u2.max(1e-300) * gram_trace * m as f64)).max(1e-300);
        let decades = 6.0 * std::f64::consts::LN_10;
        let lower = [a_lo, scale0.ln() - decades, sigma0.ln() - decades];
        let upper = [a_hi, scale0.ln() + decades, sigma0.ln() + decades];

        let objective = |x: &[f64]| -> f64 {
            prob.negative_log_ml(T::cst(x[0]), T::cst(x[1].exp()), T::cst(x[2].exp()))
                .map(|v| v.as_f64())
                .unwrap_or(f64::INFINITY)
        };
        let mut best: Option<optim::Minimum> = None;
        for start_alpha in [0.7f64, 0.85, 0.95] {
            let x0 = [start_alpha.clamp(a_lo, a_hi), scale0.ln(), sigma0.ln()];
            let found = optim::minimize(objective, &x0, &lower, &upper, &opts.search);
            if best.as_ref().is_none_or(|b| found.value < b.value) {
                best = Some(found);
            }
        }
        let best = best.expect("at least one start");
        if !best.value.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "no finite marginal likelihood for output channel {i}"
            )));
        }
        if !best.converged {
            log::warn!("stable-spline search on output {i} stopped at its evaluation budget");
            warning = true;
        }
        hypers.push(ChannelHyper {
            alpha: T::cst(best.x[0]),
            scale: T::cst(best.x[1].exp()),
            sigma: T::cst(best.x[2].exp()),
            nll: T::cst(best.value),
            converged: best.converged,
        });
    }

    let channels = (0..p)
        .flat_map(|i| (0..m).map(move |_| i))
        .map(|i| ChannelKernel { alpha: hypers[i].alpha, scale: hypers[i].scale })
        .collect();
    let kernel = KernelModel::new(opts.order, opts.lags, p, m, channels)?;
    let sigma_ml: Vec<T> = hypers.iter().map(|h| h.sigma).collect();
    let theta = ss_posterior_mean(d, &kernel, &sigma_ml)?;
    let sigma = estimate_noise_variance(d, &theta)?;
    Ok(SsEstimate { theta, kernel, sigma, channels: hypers, warning })
}
