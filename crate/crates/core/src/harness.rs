//! Monte Carlo runner: draws scenario runs, fits the requested estimators,
//! scores them against the true impulse response and summarizes the fits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{
    atom_estimate, estimate_noise_variance, ss_estimate, ssr_fit_from, AtomOptions, EstimateRecord, HankelWeighting,
    SsEstimate, SsOptions, SsrOptions, TraceEntry,
};
use crate::impulse::ImpulseResponse;
use crate::kernels::KernelOrder;
use crate::simulation::{draw_scenario, fit_metric, simulate_oe, NoiseLevel, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ss,
    Ssr,
    SsrWeighted,
    Atom,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ss => "ss",
            EstimatorKind::Ssr => "ssr",
            EstimatorKind::SsrWeighted => "ssr-weighted",
            EstimatorKind::Atom => "atom",
        }
    }

    /// Parses a comma-separated list, keeping the given order and dropping repeats.
    pub fn parse_list(s: &str) -> Result<Vec<EstimatorKind>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let k: EstimatorKind = part.parse()?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        if out.is_empty() {
            return Err(Error::Parameter("no estimator selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss" => Ok(EstimatorKind::Ss),
            "ssr" => Ok(EstimatorKind::Ssr),
            "ssr-weighted" | "ssr_weighted" | "ssrw" => Ok(EstimatorKind::SsrWeighted),
            "atom" => Ok(EstimatorKind::Atom),
            other => Err(Error::Parameter(format!("unknown estimator '{other}' (expected ss, ssr, ssr-weighted or atom)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub samples: usize,
    pub lags: usize,
    pub noise: NoiseLevel,
    pub seed: u64,
    pub runs: usize,
    pub kernel_order: KernelOrder,
}

impl ScenarioConfig {
    /// N = 500/500/1000, T = 80/50/60, SNR in [1,4]/[1,4]/[1,10], kernel
    /// order 1/2/1, 20 runs.
    pub fn defaults(scenario: Scenario) -> Self {
        let (samples, lags, high, order) = match scenario {
            Scenario::S1 => (500, 80, 4.0, KernelOrder::First),
            Scenario::S2 => (500, 50, 4.0, KernelOrder::Second),
            Scenario::S3 => (1000, 60, 10.0, KernelOrder::First),
        };
        Self {
            scenario,
            samples,
            lags,
            noise: NoiseLevel::Snr { low: 1.0, high },
            seed: 0,
            runs: 20,
            kernel_order: order,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.scenario {
            Scenario::S1 | Scenario::S2 => 3,
            Scenario::S3 => 1,
        }
    }

    pub fn validate(&self, estimators: &[EstimatorKind]) -> Result<()> {
        if self.samples < 16 {
            return Err(Error::Parameter(format!("N = {} is too small (need at least 16)", self.samples)));
        }
        if self.lags < 2 || self.lags >= self.samples {
            return Err(Error::Parameter(format!("T = {} must satisfy 2 <= T < N = {}", self.lags, self.samples)));
        }
        if self.runs == 0 {
            return Err(Error::Parameter("runs must be positive".into()));
        }
        if let NoiseLevel::Snr { low, high } = self.noise {
            NoiseLevel::snr(low, high)?;
        }
        if estimators.contains(&EstimatorKind::Atom) && self.outputs() != 1 {
            return Err(Error::Unsupported("ATOM is SISO-only".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one run, independent of how runs are scheduled.
pub fn run_seed(master: u64, scenario: Scenario, run: usize) -> u64 {
    mix(mix(mix(master) ^ scenario.index()) ^ run as u64)
}

/// One estimator's result on one dataset.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub estimate: ImpulseResponse<f64>,
    pub record: EstimateRecord,
    pub iterations: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub nll: Option<f64>,
}

/// Fits `kind`, reusing `ss` as the starting point of the rank-penalized
/// estimators when given.
pub fn fit_estimator(
    kind: EstimatorKind,
    data: &Dataset<f64>,
    lags: usize,
    order: KernelOrder,
    ss: Option<&SsEstimate<f64>>,
) -> Result<Fitted> {
    let get_ss = || -> Result<SsEstimate<f64>> {
        match ss {
            Some(s) => Ok(s.clone()),
            None => ss_estimate(data, &SsOptions::new(order, lags)),
        }
    };
    match kind {
        EstimatorKind::Ss => {
            let s = get_ss()?;
            let nll = s.channels.iter().map(|c| c.nll).sum();
            Ok(Fitted {
                record: EstimateRecord::new(kind.name(), &s.theta, Vec::new(), &s.sigma),
                estimate: s.theta,
                iterations: None,
                lambda1: None,
                lambda2: None,
                nll: Some(nll),
            })
        }
        EstimatorKind::Ssr | EstimatorKind::SsrWeighted => {
            let mut opts = SsrOptions::new(order, lags);
            if kind == EstimatorKind::SsrWeighted {
                opts.weighting = HankelWeighting::Surrogate;
            }
            let fit = ssr_fit_from(data, get_ss()?, &opts)?;
            for msg in &fit.diagnostics {
                log::warn!("{kind}: {msg}");
            }
            let trace: Vec<TraceEntry> = fit.trace.iter().map(TraceEntry::from).collect();
            let last = fit.final_state();
            Ok(Fitted {
                record: EstimateRecord::new(kind.name(), &fit.estimate, trace, &fit.ss.sigma),
                iterations: Some(fit.trace.len()),
                lambda1: Some(last.lambda1),
                lambda2: Some(last.lambda2),
                nll: Some(last.nll),
                estimate: fit.estimate,
            })
        }
        EstimatorKind::Atom => {
            let fit = atom_estimate(data, &AtomOptions::new(lags))?;
            let sigma = estimate_noise_variance(data, &fit.theta)?;
            Ok(Fitted {
                record: EstimateRecord::new(kind.name(), &fit.theta, Vec::new(), &sigma),
                estimate: fit.theta,
                iterations: None,
                lambda1: Some(fit.mu),
                lambda2: None,
                nll: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: EstimatorKind,
    pub fit: Option<f64>,
    /// Only recorded when timing is requested, so that reports stay reproducible.
    pub wall_ms: Option<f64>,
    pub iterations: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub nll: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub run: usize,
    pub seed: u64,
    pub outcomes: Vec<EstimatorOutcome>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.error.is_some())
    }

    pub fn fit(&self, kind: EstimatorKind) -> Option<f64> {
        self.outcomes.iter().find(|o| o.estimator == kind).and_then(|o| o.fit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyOptions {
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
    pub timing: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { workers: 1, timing: false }
    }
}

/// Dataset and truth of one run.
pub fn generate_run(config: &ScenarioConfig, run: usize) -> Result<(Dataset<f64>, crate::simulation::ScenarioDraw, u64)> {
    let seed = run_seed(config.seed, config.scenario, run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = draw_scenario(config.scenario, config.samples, &mut rng);
    let sim = simulate_oe(&draw.system, &draw.u, config.noise, &mut rng)?;
    Ok((sim.data, draw, seed))
}

pub fn run_single(config: &ScenarioConfig, estimators: &[EstimatorKind], run: usize, timing: bool) -> RunReport {
    let seed = run_seed(config.seed, config.scenario, run);
    let (data, draw) = match generate_run(config, run) {
        Ok((d, draw, _)) => (d, draw),
        Err(e) => {
            let outcomes = estimators
                .iter()
                .map(|&k| EstimatorOutcome {
                    estimator: k,
                    fit: None,
                    wall_ms: None,
                    iterations: None,
                    lambda1: None,
                    lambda2: None,
                    nll: None,
                    error: Some(format!("data generation: {e}")),
                })
                .collect();
            return RunReport { scenario: config.scenario, run, seed, outcomes };
        }
    };
    let truth = draw.system.impulse_response(config.lags);
    log::debug!("{} run {run}: seed {seed}, {}", config.scenario, draw.note);

    // the stable-spline fit seeds the rank-penalized estimators
    let needs_ss = estimators.iter().any(|k| matches!(k, EstimatorKind::Ss | EstimatorKind::Ssr | EstimatorKind::SsrWeighted));
    let start = Instant::now();
    let ss = if needs_ss { Some(ss_estimate(&data, &SsOptions::new(config.kernel_order, config.lags))) } else { None };
    let ss_ms = start.elapsed().as_secs_f64() * 1e3;

    let outcomes = estimators
        .iter()
        .map(|&kind| {
            let start = Instant::now();
            let result = match (&ss, kind) {
                (Some(Err(e)), EstimatorKind::Ss | EstimatorKind::Ssr | EstimatorKind::SsrWeighted) => Err(e.clone_message()),
                (Some(Ok(s)), _) => fit_estimator(kind, &data, config.lags, config.kernel_order, Some(s)),
                _ => fit_estimator(kind, &data, config.lags, config.kernel_order, None),
            };
            let mut ms = start.elapsed().as_secs_f64() * 1e3;
            if kind != EstimatorKind::Atom {
                ms += ss_ms;
            }
            let wall_ms = timing.then_some(ms);
            match result.and_then(|f| fit_metric(&f.estimate, &truth).map(|m| (f, m))) {
                Ok((f, m)) => EstimatorOutcome {
                    estimator: kind,
                    fit: Some(m.value),
                    wall_ms,
                    iterations: f.iterations,
                    lambda1: f.lambda1,
                    lambda2: f.lambda2,
                    nll: f.nll,
                    error: None,
                },
                Err(e) => {
                    log::warn!("{} run {run}: {kind} failed: {e}", config.scenario);
                    EstimatorOutcome {
                        estimator: kind,
                        fit: None,
                        wall_ms,
                        iterations: None,
                        lambda1: None,
                        lambda2: None,
                        nll: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    RunReport { scenario: config.scenario, run, seed, outcomes }
}

/// Runs `config.runs` Monte Carlo runs on a pool of `opts.workers` threads.
/// Reports come back sorted by run index; per-estimator failures are
/// recorded in the reports rather than aborting the study.
pub fn run_study(config: &ScenarioConfig, estimators: &[EstimatorKind], opts: &StudyOptions) -> Result<Vec<RunReport>> {
    config.validate(estimators)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    let reports: Vec<RunReport> = pool.install(|| {
        (0..config.runs).into_par_iter().map(|run| run_single(config, estimators, run, opts.timing)).collect()
    });
    Ok(reports)
}

/// Fraction of runs in which every estimator succeeded.
pub fn completeness(reports: &[RunReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().filter(|r| !r.failed()).count() as f64 / reports.len() as f64
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme values within 1.5 IQR of the quartiles.
    pub lo_whisker: f64,
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
    pub n: usize,
}

/// Returns `None` for empty input.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
    let outliers = v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect();
    Some(BoxStats {
        median,
        q1,
        q3,
        lo_whisker: inside.first().copied().unwrap_or(median),
        hi_whisker: inside.last().copied().unwrap_or(median),
        outliers,
        n: v.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    #[serde(flatten)]
    pub stats: Option<BoxStats>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Option<Scenario>,
    pub runs: usize,
    pub completeness: f64,
    pub estimators: BTreeMap<EstimatorKind, EstimatorSummary>,
}

impl Summary {
    pub fn median(&self, kind: EstimatorKind) -> Option<f64> {
        self.estimators.get(&kind).and_then(|s| s.stats.as_ref()).map(|s| s.median)
    }
}

pub fn aggregate(reports: &[RunReport]) -> Summary {
    let mut fits: BTreeMap<EstimatorKind, (Vec<f64>, usize)> = BTreeMap::new();
    for r in reports {
        for o in &r.outcomes {
            let entry = fits.entry(o.estimator).or_default();
            match o.fit {
                Some(f) => entry.0.push(f),
                None => entry.1 += 1,
            }
        }
    }
    let scenario = reports.first().map(|r| r.scenario).filter(|s| reports.iter().all(|r| r.scenario == *s));
    Summary {
        scenario,
        runs: reports.len(),
        completeness: completeness(reports),
        estimators: fits
            .into_iter()
            .map(|(k, (v, failures))| (k, EstimatorSummary { stats: box_stats(&v), failures }))
            .collect(),
    }
}

/// One row per run and estimator: `scenario,run,seed,estimator,fit,wall_ms,iters,lambda1,lambda2,nll`.
/// Missing values are left empty.
pub fn write_runs_csv<W: Write>(reports: &[RunReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "run", "seed", "estimator", "fit", "wall_ms", "iters", "lambda1", "lambda2", "nll"])?;
    let num = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.run);
    for r in sorted {
        for o in &r.outcomes {
            out.write_record([
                r.scenario.to_string(),
                r.run.to_string(),
                r.seed.to_string(),
                o.estimator.to_string(),
                num(o.fit),
                num(o.wall_ms),
                o.iterations.map(|i| i.to_string()).unwrap_or_default(),
                num(o.lambda1),
                num(o.lambda2),
                num(o.nll),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    scenario: Scenario,
    run: usize,
    seed: u64,
    estimator: EstimatorKind,
    fit: Option<f64>,
    wall_ms: Option<f64>,
    iters: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    nll: Option<f64>,
}

/// Reads a file written by [`write_runs_csv`]. Failure messages are not
/// stored in the CSV; failed rows come back with a generic error.
pub fn read_runs_csv<R: std::io::Read>(r: R) -> Result<Vec<RunReport>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut reports: Vec<RunReport> = Vec::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        let outcome = EstimatorOutcome {
            estimator: row.estimator,
            fit: row.fit,
            wall_ms: row.wall_ms,
            iterations: row.iters,
            lambda1: row.lambda1,
            lambda2: row.lambda2,
            nll: row.nll,
            error: row.fit.is_none().then(|| "failed".to_string()),
        };
        match reports.iter_mut().find(|r| r.run == row.run && r.scenario == row.scenario) {
            Some(rep) => rep.outcomes.push(outcome),
            None => reports.push(RunReport { scenario: row.scenario, run: row.run, seed: row.seed, outcomes: vec![outcome] }),
        }
    }
    Ok(reports)
}

/// Plain-text table of medians, one column per estimator.
pub fn median_table(summary: &Summary) -> String {
    let label = summary.scenario.map(|s| s.to_string().to_uppercase()).unwrap_or_else(|| "mixed".into());
    let mut header = format!("{:<10}", "scenario");
    let mut row = format!("{:<10}", label);
    for (k, s) in &summary.estimators {
        header.push_str(&format!("{:>14}", k.name().to_uppercase()));
        let cell = s.stats.as_ref().map(|b| format!("{:.2}", b.median)).unwrap_or_else(|| "-".into());
        row.push_str(&format!("{cell:>14}"));
    }
    format!(
        "{header}\n{row}\nmedian fit over {} runs, {:.0}% complete\n",
        summary.runs,
        100.0 * summary.completeness
    )
}
