//! Data generation for the Monte Carlo scenarios, output-error simulation
//! with per-channel SNR calibration, and the impulse-response fit metric.
//!
//! Generators work in `f64`; use [`Dataset::cast`] for other scalars.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::impulse::{ImpulseResponse, ImpulseResponseRecord};
use crate::scalar::Real;

/// `x(t+1) = A x(t) + B u(t)`, `z(t) = C x(t)`, from `x(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl TrueSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "A {:?}, B {:?}, C {:?} do not form a state-space model",
                a.shape(),
                b.shape(),
                c.shape()
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `g(k) = C A^(k-1) B` for `k = 1..=lags`.
    pub fn impulse_response(&self, lags: usize) -> ImpulseResponse<f64> {
        let (p, m) = (self.outputs(), self.inputs());
        let mut ir = ImpulseResponse::zeros(p, m, lags);
        let mut ak_b = self.b.clone();
        for k in 0..lags {
            let g = &self.c * &ak_b;
            for i in 0..p {
                for j in 0..m {
                    ir.set_coeff(k, i, j, g[(i, j)]);
                }
            }
            ak_b = &self.a * ak_b;
        }
        ir
    }

    /// Noise-free output for the input rows of `u` (N x m).
    pub fn simulate(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.ncols() != self.inputs() {
            return Err(Error::Dimension(format!("input has {} channels, system has {}", u.ncols(), self.inputs())));
        }
        let n = u.nrows();
        let mut z = DMatrix::zeros(n, self.outputs());
        let mut x = DVector::zeros(self.order());
        for t in 0..n {
            z.row_mut(t).copy_from(&(&self.c * &x).transpose());
            x = &self.a * x + &self.b * u.row(t).transpose();
        }
        Ok(z)
    }

    pub fn to_record(&self, lags: usize) -> TrueSystemRecord {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        TrueSystemRecord { a: rows(&self.a), b: rows(&self.b), c: rows(&self.c), theta0: (&self.impulse_response(lags)).into() }
    }
}

/// JSON form: matrices as arrays of rows, plus the true impulse response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSystemRecord {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub theta0: ImpulseResponseRecord,
}

impl TrueSystemRecord {
    pub fn to_system(&self) -> Result<TrueSystem> {
        let mat = |rows: &[Vec<f64>], name: &str| -> Result<DMatrix<f64>> {
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Format(format!("ragged rows in {name}")));
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        };
        TrueSystem::new(mat(&self.a, "A")?, mat(&self.b, "B")?, mat(&self.c, "C")?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::S1, Scenario::S2, Scenario::S3];

    pub fn index(self) -> u64 {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S3 => 3,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.index())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Scenario::S1),
            "s2" => Ok(Scenario::S2),
            "s3" => Ok(Scenario::S3),
            other => Err(Error::Parameter(format!("unknown scenario '{other}' (expected s1, s2 or s3)"))),
        }
    }
}

/// Measurement-noise setting for [`simulate_oe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseLevel {
    /// Per-channel SNR (ratio of standard deviations) drawn uniformly.
    Snr { low: f64, high: f64 },
    NoiseFree,
}

impl NoiseLevel {
    pub fn snr(low: f64, high: f64) -> Result<Self> {
        if !(low >= 1.0 && high >= low && high.is_finite()) {
            return Err(Error::Parameter(format!("SNR range [{low}, {high}] must satisfy 1 <= low <= high < inf")));
        }
        Ok(NoiseLevel::Snr { low, high })
    }
}

/// A generated system together with the input it is driven by.
#[derive(Debug, Clone)]
pub struct ScenarioDraw {
    pub system: TrueSystem,
    pub u: DMatrix<f64>,
    /// Scenario-specific parameter: the S1 cutoff, the S3 input filter poles, etc.
    pub note: String,
}

const BURN_IN: usize = 200;

fn white<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
}

/// Second-order section `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Direct form II transposed.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + s1;
                s1 = self.b[1] * v - self.a[0] * y + s2;
                s2 = self.b[2] * v - self.a[1] * y;
                y
            })
            .collect()
    }
}

/// Digital Butterworth low-pass of even order with cutoff `zeta` as a
/// fraction of the Nyquist frequency, by the bilinear transform.
pub fn butterworth_lowpass(order: usize, zeta: f64) -> Result<Vec<Biquad>> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::Parameter(format!("Butterworth order must be even and positive, got {order}")));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Parameter(format!("cutoff {zeta} must lie in (0, 1)")));
    }
    let k = (std::f64::consts::FRAC_PI_2 * zeta).tan();
    let sections = order / 2;
    Ok((1..=sections)
        .map(|s| {
            let q = 1.0 / (2.0 * ((2 * s - 1) as f64 * std::f64::consts::PI / (2 * order) as f64).sin());
            let norm = 1.0 + k / q + k * k;
            let b0 = k * k / norm;
            Biquad { b: [b0, 2.0 * b0, b0], a: [2.0 * (k * k - 1.0) / norm, (1.0 - k / q + k * k) / norm] }
        })
        .collect())
}

pub fn filter_cascade(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    sections.iter().fold(x.to_vec(), |acc, s| s.filter(&acc))
}

/// Cutoffs at the top of the drawn range are capped here; at 1 the
/// bilinear prewarp diverges and the filter would be the identity anyway.
pub const S1_MAX_CUTOFF: f64 = 0.99;

/// Fourth-order 3-output, 1-input system driven by low-pass filtered noise
/// with a cutoff drawn from [0.8, 1].
pub fn scenario_s1<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> ScenarioDraw {
    let a = DMatrix::from_row_slice(4, 4, &[0.8, 0.5, 0.0, 0.0, -0.5, 0.8, 0.0, 0.0, 0.0, 0.0, 0.2, 0.9, 0.0, 0.0, -0.9, 0.2]);
    let b = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 2.0, 0.0]);
    let c = DMatrix::from_row_slice(3, 4, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.1, 0.0, 0.1, 20.0, 0.0, 2.5, 0.0]);
    let zeta: f64 = rng.random_range(0.8..=1.0);
    let cutoff = zeta.min(S1_MAX_CUTOFF);
    let e = white(samples + BURN_IN, 1, rng);
    let sections = butterworth_lowpass(8, cutoff).expect("cutoff in range");
    let u = filter_cascade(&sections, e.as_slice());
    ScenarioDraw {
        system: TrueSystem::new(a, b, c).expect("fixed S1 model"),
        u: DMatrix::from_column_slice(samples, 1, &u[BURN_IN..]),
        note: format!("zeta={zeta:.6}"),
    }
}

/// Block-diagonal real-Jordan `A` of the given order with poles uniform in
/// the disc of radius `radius`: each 2x2 block holds a conjugate pair, a
/// trailing 1x1 block (or a coin flip) gives a real pole.
pub fn random_stable_dynamics<R: Rng + ?Sized>(order: usize, radius: f64, rng: &mut R) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(order, order);
    let mut i = 0;
    while i < order {
        if order - i >= 2 && rng.random_bool(0.5) {
            let r = radius * rng.random::<f64>().sqrt();
            let w = rng.random_range(0.0..std::f64::consts::PI);
            let (re, im) = (r * w.cos(), r * w.sin());
            a[(i, i)] = re;
            a[(i, i + 1)] = im;
            a[(i + 1, i)] = -im;
            a[(i + 1, i + 1)] = re;
            i += 2;
        } else {
            a[(i, i)] = rng.random_range(-radius..radius);
            i += 1;
        }
    }
    a
}

pub fn random_system<R: Rng + ?Sized>(order: usize, outputs: usize, inputs: usize, radius: f64, rng: &mut R) -> TrueSystem {
    let a = random_stable_dynamics(order, radius, rng);
    let b = white(order, inputs, rng);
    let c = white(outputs, order, rng);
    TrueSystem::new(a, b, c).expect("consistent dimensions")
}

pub const S2_RADIUS: f64 = 0.85;
pub const S3_RADIUS: f64 = 0.95;
pub const S3_FILTER_RADIUS: f64 = 0.9;
/// Input filters whose lag-1 autocorrelation is below this are redrawn.
pub const S3_MIN_LAG1: f64 = 0.1;

/// Random 3-output, 1-input system of order 1..=10 with poles in the 0.85
/// disc, driven by unit-variance white noise.
pub fn scenario_s2<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> ScenarioDraw {
    let order = rng.random_range(1..=10);
    let system = random_system(order, 3, 1, S2_RADIUS, rng);
    let u = white(samples, 1, rng);
    ScenarioDraw { system, u, note: format!("order={order}") }
}

/// Random SISO system of order 1..=30 with poles in the 0.95 disc, driven
/// by white noise through a random second-order all-pole filter.
pub fn scenario_s3<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> ScenarioDraw {
    let order = rng.random_range(1..=30);
    let system = random_system(order, 1, 1, S3_RADIUS, rng);
    let (a1, a2) = loop {
        let r = S3_FILTER_RADIUS * rng.random::<f64>().sqrt();
        let w = rng.random_range(0.0..std::f64::consts::PI);
        let (a1, a2) = (2.0 * r * w.cos(), -r * r);
        if (a1 / (1.0 - a2)).abs() >= S3_MIN_LAG1 {
            break (a1, a2);
        }
    };
    let e = white(samples + BURN_IN, 1, rng);
    let mut u = vec![0.0; samples + BURN_IN];
    for t in 0..u.len() {
        let y1 = if t >= 1 { u[t - 1] } else { 0.0 };
        let y2 = if t >= 2 { u[t - 2] } else { 0.0 };
        u[t] = e[t] + a1 * y1 + a2 * y2;
    }
    ScenarioDraw {
        system,
        u: DMatrix::from_column_slice(samples, 1, &u[BURN_IN..]),
        note: format!("order={order} ar=[{a1:.6},{a2:.6}]"),
    }
}

pub fn draw_scenario<R: Rng + ?Sized>(scenario: Scenario, samples: usize, rng: &mut R) -> ScenarioDraw {
    match scenario {
        Scenario::S1 => scenario_s1(samples, rng),
        Scenario::S2 => scenario_s2(samples, rng),
        Scenario::S3 => scenario_s3(samples, rng),
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Simulated output-error data and the SNRs targeted on each channel.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset<f64>,
    pub noise_free: DMatrix<f64>,
    /// Drawn SNR per output, empty when noise-free.
    pub snr: Vec<f64>,
}

/// Runs the system from rest and adds white Gaussian noise whose standard
/// deviation on channel i is `std(z_i) / SNR_i`.
pub fn simulate_oe<R: Rng + ?Sized>(sys: &TrueSystem, u: &DMatrix<f64>, noise: NoiseLevel, rng: &mut R) -> Result<Simulated> {
    let z = sys.simulate(u)?;
    let mut y = z.clone();
    let mut snr = Vec::new();
    if let NoiseLevel::Snr { low, high } = noise {
        for i in 0..z.ncols() {
            let target = if high > low { rng.random_range(low..=high) } else { low };
            let std = sample_std(z.column(i).as_slice()) / target;
            for t in 0..z.nrows() {
                let e: f64 = StandardNormal.sample(rng);
                y[(t, i)] += std * e;
            }
            snr.push(target);
        }
    }
    Ok(Simulated { data: Dataset::new(u.clone(), y)?, noise_free: z, snr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// Average over the channels that were scored.
    pub value: f64,
    /// `(output, input)` channels with a constant true response.
    pub excluded: Vec<(usize, usize)>,
}

/// Average impulse-response fit `100 (1 - |g - g_hat| / |g - mean(g)|)`
/// over the channels of `truth`.
pub fn fit_metric<T: Real>(estimate: &ImpulseResponse<T>, truth: &ImpulseResponse<T>) -> Result<Fit> {
    if estimate.outputs() != truth.outputs() || estimate.inputs() != truth.inputs() || estimate.len() != truth.len() {
        return Err(Error::Dimension("estimate and truth differ in shape".into()));
    }
    let mut total = 0.0;
    let mut scored = 0;
    let mut excluded = Vec::new();
    for i in 0..truth.outputs() {
        for j in 0..truth.inputs() {
            let g: Vec<f64> = truth.channel(i, j).iter().map(|v| v.as_f64()).collect();
            let h: Vec<f64> = estimate.channel(i, j).iter().map(|v| v.as_f64()).collect();
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            let denom = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
            if denom == 0.0 {
                excluded.push((i, j));
                continue;
            }
            let err = g.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            total += 100.0 * (1.0 - err / denom);
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Parameter("every true channel is constant; fit is undefined".into()));
    }
    if !excluded.is_empty() {
        log::warn!("fit metric skipped {} constant channel(s)", excluded.len());
    }
    Ok(Fit { value: total / scored as f64, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_regressor;
    use crate::linalg::numerical_rank;
    use crate::hankel::HankelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn s1_model_facts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = scenario_s1(500, &mut rng);
        let sys = &draw.system;
        assert_eq!((sys.outputs(), sys.inputs(), sys.order()), (3, 1, 4));
        assert!((sys.spectral_radius() - (0.89f64).sqrt()).abs() < 1e-12);
        let g = sys.impulse_response(80);
        assert_eq!(g.markov(0).as_slice(), &[3.0, 0.0, 25.0]);
        let h = HankelSpec::identity(80, 3, 1).unwrap().hankel(&g).unwrap();
        assert_eq!(numerical_rank(&h, 1e-8), 4);
        assert_eq!(draw.u.nrows(), 500);
    }

    #[test]
    fn butterworth_has_unit_dc_gain_and_attenuates_nyquist() {
        for zeta in [0.3, 0.8, 0.95] {
            let sections = butterworth_lowpass(8, zeta).unwrap();
            let gain = |w: f64| {
                sections.iter().fold(1.0, |acc, s| {
                    let z = nalgebra::Complex::from_polar(1.0, -w);
                    let num = s.b[0] + s.b[1] * z + s.b[2] * z * z;
                    let den = 1.0 + s.a[0] * z + s.a[1] * z * z;
                    acc * (num / den).norm()
                })
            };
            assert!((gain(0.0) - 1.0).abs() < 1e-9);
            assert!((gain(zeta * std::f64::consts::PI) - 0.5f64.sqrt()).abs() < 1e-9);
            assert!(gain(std::f64::consts::PI) < 1e-6);
        }
    }

    #[test]
    fn s2_draws_respect_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let d = scenario_s2(60, &mut rng);
            assert!(d.system.spectral_radius() <= S2_RADIUS);
            assert_eq!((d.system.outputs(), d.system.inputs()), (3, 1));
            counts[d.system.order() - 1] += 1;
            let g = d.system.impulse_response(50);
            let norms: Vec<f64> = (0..50).map(|k| g.markov(k).norm()).collect();
            let max = norms.iter().cloned().fold(0.0, f64::max);
            assert!(norms[49] <= 1e-3 * max, "tail {} of {max}", norms[49]);
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.1).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn s3_draws_respect_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut colored = 0;
        for _ in 0..200 {
            let d = scenario_s3(1000, &mut rng);
            assert!(d.system.spectral_radius() < S3_RADIUS);
            assert!(d.system.order() <= 30);
            assert_eq!((d.system.outputs(), d.system.inputs()), (1, 1));
            let u = d.u.column(0);
            let mean = u.mean();
            let c0: f64 = u.iter().map(|v| (v - mean).powi(2)).sum();
            let c1: f64 = (1..u.len()).map(|t| (u[t] - mean) * (u[t - 1] - mean)).sum();
            if (c1 / c0).abs() >= 0.05 {
                colored += 1;
            }
        }
        assert!(colored >= 180, "{colored} of 200");
    }

    #[test]
    fn noise_free_simulation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = scenario_s2(100, &mut rng);
        let sim = simulate_oe(&d.system, &d.u, NoiseLevel::NoiseFree, &mut rng).unwrap();
        assert_eq!(sim.data.y(), &sim.noise_free);
        assert!(sim.snr.is_empty());
    }

    #[test]
    fn impulse_input_reproduces_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = scenario_s1(10, &mut rng).system;
        let n = 40;
        let mut u = DMatrix::zeros(n, 1);
        u[(0, 0)] = 1.0;
        let sim = simulate_oe(&sys, &u, NoiseLevel::NoiseFree, &mut rng).unwrap();
        let g = sys.impulse_response(n - 1);
        for t in 1..n {
            for i in 0..3 {
                assert!((sim.data.y()[(t, i)] - g.coeff(t - 1, i, 0)).abs() < 1e-12);
            }
        }
        assert!(sim.data.y().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn realized_snr_is_close_to_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let d = scenario_s1(500, &mut rng);
            let sim = simulate_oe(&d.system, &d.u, NoiseLevel::snr(1.0, 4.0).unwrap(), &mut rng).unwrap();
            for i in 0..3 {
                let z = sim.noise_free.column(i);
                let e = sim.data.y().column(i) - z;
                let realized = sample_std(z.as_slice()) / sample_std(e.as_slice());
                assert!((realized / sim.snr[i] - 1.0).abs() <= 0.1, "{realized} vs {}", sim.snr[i]);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let d = scenario_s3(300, &mut rng);
            simulate_oe(&d.system, &d.u, NoiseLevel::snr(1.0, 10.0).unwrap(), &mut rng).unwrap().data
        };
        let (a, b) = (run(), run());
        assert_eq!(a.y(), b.y());
        assert_eq!(a.u(), b.u());
    }

    #[test]
    fn least_squares_recovers_noise_free_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = random_system(3, 1, 1, 0.6, &mut rng);
        let u = white(400, 1, &mut rng);
        let sim = simulate_oe(&sys, &u, NoiseLevel::NoiseFree, &mut rng).unwrap();
        // long enough that the truncated tail is negligible
        let lags = 60;
        let phi = build_regressor(&sim.data, lags).dense();
        let ls = phi.svd(true, true).solve(&sim.data.y().column(0).into_owned(), 1e-14).unwrap();
        let g = sys.impulse_response(lags);
        assert!((ls - g.theta()).amax() < 1e-6);
    }

    #[test]
    fn fit_metric_examples() {
        let truth = ImpulseResponse::new(1, 1, 2, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(fit_metric(&truth, &truth).unwrap().value, 100.0);
        let mean = ImpulseResponse::new(1, 1, 2, DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(fit_metric(&mean, &truth).unwrap().value, 0.0);
        let zero = ImpulseResponse::zeros(1, 1, 2);
        let f = fit_metric(&zero, &truth).unwrap().value;
        assert!((f - 100.0 * (1.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!((f + 41.42).abs() < 5e-3);
    }

    #[test]
    fn fit_metric_excludes_constant_channels_and_is_scale_invariant() {
        let truth = ImpulseResponse::from_fn(2, 1, 4, |k, i, _| if i == 0 { 0.5f64.powi(k as i32) } else { 1.0 });
        let est = ImpulseResponse::from_fn(2, 1, 4, |k, _, _| 0.4f64.powi(k as i32));
        let f = fit_metric(&est, &truth).unwrap();
        assert_eq!(f.excluded, vec![(1, 0)]);
        let scale = |ir: &ImpulseResponse<f64>| ImpulseResponse::new(2, 1, 4, ir.theta() * -3.0).unwrap();
        let g = fit_metric(&scale(&est), &scale(&truth)).unwrap();
        assert!((f.value - g.value).abs() < 1e-12);
        assert!(fit_metric(&ImpulseResponse::zeros(1, 1, 3), &ImpulseResponse::from_fn(1, 1, 3, |_, _, _| 2.0)).is_err());
    }

    #[test]
    fn system_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = scenario_s2(10, &mut rng).system;
        let rec = sys.to_record(5);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"A\"") && json.contains("\"theta0\""));
        let back: TrueSystemRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_system().unwrap(), sys);
    }
}
