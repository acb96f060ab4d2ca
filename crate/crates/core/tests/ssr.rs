use hankel_ssr::estimators::{
    a_matrix, map_estimate, optimize_lambdas, q_saturation, q_threshold, rank_penalty_matrix, ss_negative_log_ml,
    ssr_fit, ssr_negative_log_ml, update_q, variational_bound_check, variational_rhs, LambdaBounds, SsrOptions,
    SsrProblem, StopReason,
};
use hankel_ssr::linalg::numerical_rank;
use hankel_ssr::optim::NelderMeadOptions;
use hankel_ssr::{build_regressor, stack_outputs, Dataset, HankelSpec, ImpulseResponse, KernelModel, KernelOrder};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = random_matrix(n, n, rng);
    &b * b.transpose() + DMatrix::identity(n, n) * 0.5
}

fn random_dataset(n: usize, p: usize, m: usize, rng: &mut ChaCha8Rng) -> Dataset<f64> {
    Dataset::new(random_matrix(n, m, rng), random_matrix(n, p, rng)).unwrap()
}

/// Outputs of the FIR model `theta` driven by white noise, plus optional noise.
fn fir_dataset(theta: &ImpulseResponse<f64>, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Dataset<f64> {
    let u = random_matrix(n, theta.inputs(), rng);
    let d0 = Dataset::new(u.clone(), DMatrix::zeros(n, theta.outputs())).unwrap();
    let y = build_regressor(&d0, theta.len()).predict(theta);
    let y = DMatrix::from_fn(n, theta.outputs(), |t, i| y[i * n + t] + noise * normal(rng));
    Dataset::new(u, y).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn dense_nll(d: &Dataset<f64>, a: &DMatrix<f64>, sigma: &[f64], lags: usize) -> f64 {
    let phi = build_regressor(d, lags).dense();
    let n = d.samples();
    let mut lambda = phi.clone() * a.clone().try_inverse().unwrap() * phi.transpose();
    for q in 0..n * d.outputs() {
        lambda[(q, q)] += sigma[q / n];
    }
    let y = stack_outputs(d);
    let chol = lambda.cholesky().unwrap();
    let ld: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    y.dot(&chol.solve(&y)) + ld
}

fn kernel(p: usize, m: usize, lags: usize) -> KernelModel<f64> {
    KernelModel::uniform(KernelOrder::First, lags, p, m, 0.8, 1.5).unwrap()
}

#[test]
fn a_matrix_without_rank_term_is_scaled_inverse_prior() {
    let spec = HankelSpec::<f64>::identity(6, 1, 1).unwrap();
    let k = kernel(1, 1, 6).assemble_prior().unwrap();
    let a = a_matrix(&DMatrix::identity(spec.hankel_rows(), spec.hankel_rows()), 0.0, 2.5, &k, &spec).unwrap();
    let want = k.try_inverse().unwrap() * 2.5;
    assert!((a - &want).norm() <= 1e-10 * want.norm());
}

#[test]
fn identity_weights_give_coefficient_multiplicities() {
    for t in [5usize, 6, 9, 12] {
        let spec = HankelSpec::<f64>::identity(t, 1, 1).unwrap();
        let (r, c) = (spec.shape.r, spec.shape.c);
        let a = a_matrix(&DMatrix::identity(r, r), 3.0, 0.0, &DMatrix::identity(t, t), &spec).unwrap();
        for i in 0..t {
            for j in 0..t {
                let k = i + 1;
                let want = if i == j { 3.0 * k.min(t - k + 1).min(r).min(c) as f64 } else { 0.0 };
                assert_eq!(a[(i, j)], want, "T={t} ({i},{j})");
            }
        }
    }
}

#[test]
fn rank_term_equals_weighted_hankel_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for &(t, p, m) in &[(7usize, 1usize, 1usize), (6, 2, 1), (5, 2, 3), (8, 3, 2)] {
        let shape = hankel_ssr::choose_hankel_shape(t, p, m).unwrap();
        let w1 = random_matrix(m * shape.c, m * shape.c, &mut rng);
        let w2 = random_matrix(p * shape.r, p * shape.r, &mut rng);
        let spec = HankelSpec::with_weights(t, p, m, shape, w1, w2).unwrap();
        let q = random_spd(p * shape.r, &mut rng);
        let theta = ImpulseResponse::new(p, m, t, DVector::from_fn(t * p * m, |_, _| normal(&mut rng))).unwrap();
        let h = spec.weighted_hankel(&theta).unwrap();
        let want = 1.7 * (&h * h.transpose() * &q).trace();
        let k = kernel(p, m, t).assemble_prior().unwrap();
        let a = a_matrix(&q, 1.7, 0.9, &k, &spec).unwrap();
        let got = (theta.theta().transpose() * (a - k.try_inverse().unwrap() * 0.9) * theta.theta())[0];
        assert!(rel(got, want) <= 1e-9, "{got} vs {want}");
        let a1 = rank_penalty_matrix(&q, &spec).unwrap();
        assert_eq!(a1, a1.transpose());
    }
}

#[test]
fn map_estimate_matches_augmented_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(n, t, p, m) in &[(30usize, 4usize, 1usize, 1usize), (25, 3, 2, 2), (40, 6, 2, 1)] {
        let d = random_dataset(n, p, m, &mut rng);
        let dim = t * p * m;
        let a = random_spd(dim, &mut rng);
        let sigma: Vec<f64> = (0..p).map(|i| 0.4 + 0.3 * i as f64).collect();
        let got = map_estimate(&d, &a, &sigma, t).unwrap();

        let phi = build_regressor(&d, t).dense();
        let y = stack_outputs(&d);
        let scale = DVector::from_fn(n * p, |q, _| 1.0 / sigma[q / n].sqrt());
        let r = a.clone().cholesky().unwrap().l().transpose();
        let mut stacked = DMatrix::zeros(n * p + dim, dim);
        let mut rhs = DVector::zeros(n * p + dim);
        for q in 0..n * p {
            stacked.row_mut(q).copy_from(&(phi.row(q) * scale[q]));
            rhs[q] = y[q] * scale[q];
        }
        stacked.view_mut((n * p, 0), (dim, dim)).copy_from(&r);
        let want = stacked.svd(true, true).solve(&rhs, 1e-14).unwrap();
        assert!((got.theta() - &want).norm() <= 1e-8 * want.norm());
    }
}

#[test]
fn map_estimate_of_zero_output_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Dataset::new(random_matrix(20, 1, &mut rng), DMatrix::zeros(20, 2)).unwrap();
    let a = random_spd(8, &mut rng);
    let got = map_estimate(&d, &a, &[1.0, 2.0], 4).unwrap();
    assert!(got.theta().iter().all(|&v| v == 0.0));
}

#[test]
fn map_estimate_unregularized_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = random_dataset(40, 1, 1, &mut rng);
    let phi = build_regressor(&d, 5).dense();
    let ls = phi.clone().svd(true, true).solve(&stack_outputs(&d), 1e-14).unwrap();
    let got = map_estimate(&d, &(DMatrix::identity(5, 5) * 1e-12), &[1.0], 5).unwrap();
    assert!((got.theta() - &ls).norm() <= 1e-8 * ls.norm());
}

#[test]
fn negative_log_ml_matches_dense_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(n, t, p, m) in &[(3usize, 2usize, 1usize, 1usize), (30, 5, 1, 1), (25, 4, 2, 2), (50, 6, 3, 1)] {
        let d = random_dataset(n, p, m, &mut rng);
        let spec = HankelSpec::identity(t, p, m).unwrap();
        let km = kernel(p, m, t);
        let sigma: Vec<f64> = (0..p).map(|i| 0.5 + 0.2 * i as f64).collect();
        let problem = SsrProblem::new(&d, &km, &sigma, spec.clone()).unwrap();
        let k = problem.prior().clone();
        let q = random_spd(spec.hankel_rows(), &mut rng);
        let prep = problem.prepare(&q).unwrap();
        for &(l1, l2) in &[(0.0, 1.0), (0.3, 2.0), (5.0, 0.1)] {
            let a = a_matrix(&q, l1, l2, &k, &spec).unwrap();
            let want = dense_nll(&d, &a, &sigma, t);
            let explicit = ssr_negative_log_ml(&d, &q, l1, l2, &k, &sigma, &spec).unwrap();
            let whitened = problem.negative_log_ml(&prep, l1, l2).unwrap();
            assert!(rel(explicit, want) <= 1e-10, "explicit {explicit} vs {want}");
            assert!(rel(whitened, want) <= 1e-8, "whitened {whitened} vs {want}");
            let e1 = map_estimate(&d, &a, &sigma, t).unwrap();
            let e2 = problem.estimate(&prep, l1, l2).unwrap();
            assert!((e1.theta() - e2.theta()).norm() <= 1e-8 * e1.theta().norm());
        }
    }
}

#[test]
fn without_rank_term_reduces_to_stable_spline_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = random_dataset(40, 1, 1, &mut rng);
    let (alpha, scale, sigma, l2) = (0.8, 1.5, 0.7, 2.5);
    let spec = HankelSpec::identity(8, 1, 1).unwrap();
    let k = KernelModel::uniform(KernelOrder::First, 8, 1, 1, alpha, scale).unwrap().assemble_prior().unwrap();
    let q = DMatrix::identity(spec.hankel_rows(), spec.hankel_rows());
    let got = ssr_negative_log_ml(&d, &q, 0.0, l2, &k, &[sigma], &spec).unwrap();
    let want = ss_negative_log_ml(&d, 0, 8, KernelOrder::First, alpha, scale / l2, sigma).unwrap();
    assert!(rel(got, want) <= 1e-10, "{got} vs {want}");
}

fn geometric(p: usize, m: usize, t: usize, poles: &[f64], rng: &mut ChaCha8Rng) -> ImpulseResponse<f64> {
    let b: Vec<DMatrix<f64>> = poles.iter().map(|_| random_matrix(p, m, rng)).collect();
    ImpulseResponse::from_fn(p, m, t, |k, i, j| poles.iter().zip(&b).map(|(a, bb)| bb[(i, j)] * a.powi(k as i32)).sum())
}

#[test]
fn ten_times_larger_lambda2_increases_evidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth = geometric(1, 1, 20, &[0.7], &mut rng);
    let d = fir_dataset(&truth, 200, 0.3, &mut rng);
    let spec = HankelSpec::identity(20, 1, 1).unwrap();
    let problem = SsrProblem::new(&d, &kernel(1, 1, 20), &[0.09], spec.clone()).unwrap();
    let q = update_q(&truth, &spec, 200).unwrap().q;
    let prep = problem.prepare(&q).unwrap();
    let bounds = LambdaBounds { lambda1: (1e-8, 1e6), lambda2: (1e-4, 1e4) };
    let found = optimize_lambdas(&problem, &prep, (1e-8, 1.0), &bounds, &NelderMeadOptions::default());
    assert!(found.nll <= found.initial_nll);
    let at = problem.negative_log_ml(&prep, found.lambda1, found.lambda2).unwrap();
    let above = problem.negative_log_ml(&prep, found.lambda1, found.lambda2 * 10.0).unwrap();
    assert!(above > at, "{above} vs {at}");
}

#[test]
fn q_update_constants() {
    // log(log 500) = 1.826901
    let th: f64 = q_threshold(500, 3);
    let nu: f64 = q_saturation(500, 3);
    assert!((th - 0.104697).abs() < 5e-7, "{th}");
    assert!((nu - 912.29).abs() < 5e-3, "{nu}");
}

#[test]
fn q_update_with_one_dominant_direction() {
    let t = 12;
    let raw = ImpulseResponse::from_fn(1, 1, t, |k, _, _| 0.5f64.powi(k as i32));
    let spec = HankelSpec::identity(t, 1, 1).unwrap();
    let norm = spec.hankel(&raw).unwrap().norm();
    let theta = ImpulseResponse::new(1, 1, t, raw.theta() / norm).unwrap();
    let upd = update_q(&theta, &spec, 500).unwrap();
    assert!((upd.singular_values[0] - 1.0).abs() < 1e-12);
    assert_eq!(upd.signal_rank, 1);
    let mut eig: Vec<f64> = upd.q.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((eig[0] - 1.0).abs() < 1e-9);
    for e in &eig[1..] {
        assert!((e - upd.saturation).abs() < 1e-9 * upd.saturation);
    }
    assert_eq!(upd.q, upd.q.transpose());
}

#[test]
fn q_update_rejects_short_records() {
    let spec = HankelSpec::<f64>::identity(6, 1, 1).unwrap();
    assert!(update_q(&ImpulseResponse::zeros(1, 1, 6), &spec, 15).is_err());
}

#[test]
fn variational_bound_is_tight_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = HankelSpec::identity(9, 1, 1).unwrap();
    let theta = ImpulseResponse::new(1, 1, 9, DVector::from_fn(9, |_, _| normal(&mut rng))).unwrap();
    let (lhs, rhs) = variational_bound_check(&theta, &spec).unwrap();
    assert!((rhs - lhs).abs() <= 1e-9 * lhs.abs().max(1.0));

    let h = spec.weighted_hankel(&theta).unwrap();
    let x = &h * h.transpose();
    let n = x.nrows() as f64;
    let gap = variational_rhs(&x, &(&x * 2.0)).unwrap() - lhs;
    assert!((gap - n * (2f64.ln() - 0.5)).abs() < 1e-9);
    for _ in 0..20 {
        let psi = random_spd(x.nrows(), &mut rng) * rng.random_range(0.1..10.0);
        assert!(variational_rhs(&x, &psi).unwrap() > lhs);
    }
}

#[test]
fn rank_penalty_improves_evidence_on_rank_one_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let truth = ImpulseResponse::from_fn(1, 1, 20, |k, _, _| 2.0 * 0.8f64.powi(k as i32));
    let d = fir_dataset(&truth, 150, 0.5, &mut rng);
    let spec = HankelSpec::identity(20, 1, 1).unwrap();
    let problem = SsrProblem::new(&d, &kernel(1, 1, 20), &[0.25], spec.clone()).unwrap();
    let l2_ss = problem.smoothness_only_lambda2(&NelderMeadOptions::default()).unwrap();
    let q = update_q(&truth, &spec, 150).unwrap().q;
    let prep = problem.prepare(&q).unwrap();
    let bounds = LambdaBounds { lambda1: (1e-8, 1e6), lambda2: (1e-3 * l2_ss, 1e6 * l2_ss) };
    let found = optimize_lambdas(&problem, &prep, (1e-8, l2_ss), &bounds, &NelderMeadOptions::default());
    let base = problem.negative_log_ml(&prep, 1e-8, l2_ss).unwrap();
    assert!(found.nll < base, "{} vs {base}", found.nll);
    assert!(found.lambda1 > 1e-6);
}

#[test]
fn fit_trace_decreases_and_terminates() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (p, m) = if seed % 2 == 0 { (1, 1) } else { (2, 2) };
        let truth = geometric(p, m, 15, &[0.75, -0.4], &mut rng);
        let d = fir_dataset(&truth, 120, 0.4, &mut rng);
        let opts = SsrOptions::new(KernelOrder::First, 15);
        let fit = ssr_fit(&d, &opts).unwrap();
        assert!(fit.trace.len() <= opts.max_iter + 1);
        for w in fit.trace.windows(2) {
            assert!(w[1].nll < w[0].nll, "seed {seed}");
        }
        assert!(fit.final_state().lambda2 >= fit.lambda2_floor);
        assert!(fit.stop != StopReason::Failure, "seed {seed}: {:?}", fit.diagnostics);
        assert_eq!(fit.estimate.theta(), fit.final_state().theta.theta());
    }
}

#[test]
fn no_rank_penalty_keeps_lambda1_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = geometric(1, 1, 15, &[0.6], &mut rng);
    let d = fir_dataset(&truth, 100, 0.3, &mut rng);
    let mut opts = SsrOptions::new(KernelOrder::First, 15);
    opts.rank_penalty = false;
    let fit = ssr_fit(&d, &opts).unwrap();
    assert!(fit.trace.iter().all(|s| s.lambda1 == 0.0));
}

#[test]
fn noiseless_low_order_systems_give_low_rank_hankel() {
    for (order, poles) in [(1usize, vec![0.8]), (2, vec![0.85, -0.5])] {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + order as u64);
        let truth = geometric(1, 1, 20, &poles, &mut rng);
        let d = fir_dataset(&truth, 200, 0.0, &mut rng);
        let fit = ssr_fit(&d, &SsrOptions::new(KernelOrder::First, 20)).unwrap();
        let h = fit.spec.hankel(&fit.estimate).unwrap();
        let s = hankel_ssr::linalg::singular_values(&h);
        assert_eq!(numerical_rank(&h, 1e-6), order, "singular values {s:?}");
    }
}


fn map_objective(d: &Dataset<f64>, a: &DMatrix<f64>, sigma: &[f64], lags: usize, theta: &DVector<f64>) -> f64 {
    let n = d.samples();
    let r = stack_outputs(d) - build_regressor(d, lags).apply(theta);
    let fit: f64 = r.iter().enumerate().map(|(q, v)| v * v / sigma[q / n]).sum();
    fit + (theta.transpose() * a * theta)[0]
}

#[test]
fn map_estimate_is_the_unique_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = random_dataset(30, 2, 1, &mut rng);
    let a = random_spd(10, &mut rng);
    let sigma = [0.6, 1.3];
    let theta = map_estimate(&d, &a, &sigma, 5).unwrap().into_theta();
    let base = map_objective(&d, &a, &sigma, 5, &theta);
    for _ in 0..20 {
        let delta = DVector::from_fn(10, |_, _| normal(&mut rng));
        let delta = delta.normalize() * 1e-3;
        assert!(map_objective(&d, &a, &sigma, 5, &(&theta + delta)) > base);
    }
}

#[test]
fn map_estimate_is_gaussian_posterior_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, t) = (12, 3);
    let d = random_dataset(n, 2, 1, &mut rng);
    let a = random_spd(2 * t, &mut rng);
    let sigma = [0.5, 0.9];
    let got = map_estimate(&d, &a, &sigma, t).unwrap();
    let phi = build_regressor(&d, t).dense();
    let prior = a.clone().try_inverse().unwrap();
    let mut cov_y = &phi * &prior * phi.transpose();
    for q in 0..2 * n {
        cov_y[(q, q)] += sigma[q / n];
    }
    let want = &prior * phi.transpose() * cov_y.try_inverse().unwrap() * stack_outputs(&d);
    assert!((got.theta() - &want).norm() <= 1e-9 * want.norm());
}

#[test]
fn log_surrogate_ranks_like_cardinality() {
    // sum_i log(|x_i| + eps) for x with s entries of magnitude c and the rest zero
    let eps = 1e-8f64;
    for c in [0.05f64, 0.5, 3.0] {
        for len in 1..=6usize {
            let score = |s: usize| (0..len).map(|i| if i < s { (c + eps).ln() } else { eps.ln() }).sum::<f64>();
            for s in 0..len {
                assert!(score(s) < score(s + 1), "c={c} len={len} s={s}");
            }
        }
    }
}

