use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hankel_ssr::harness::{
    aggregate, fit_estimator, generate_run, median_table, read_runs_csv, run_study, write_runs_csv, EstimatorKind,
    ScenarioConfig, StudyOptions,
};
use hankel_ssr::simulation::{fit_metric, Scenario, TrueSystemRecord};
use hankel_ssr::{Dataset, Error, KernelOrder};

/// Failed-run fraction above which `benchmark` exits with code 4.
const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Parser, Debug)]
#[command(name = "hankel-ssr", version, about = "Impulse-response estimation with stable-spline and Hankel rank priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenario datasets and their true systems.
    Simulate(SimulateArgs),
    /// Fit one dataset and write the estimate as JSON.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study and print the median fits.
    Benchmark(BenchmarkArgs),
    /// Recompute the summary of a per-run CSV written by `benchmark`.
    Summarize(SummarizeArgs),
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Number of samples (default: 500 for s1/s2, 1000 for s3).
    #[arg(long)]
    n: Option<usize>,
    /// Impulse-response length (default: 80/50/60 for s1/s2/s3).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stable-spline kernel order, 1 or 2 (default: 2 for s2, else 1).
    #[arg(long)]
    kernel_order: Option<u8>,
}

impl ScenarioArgs {
    fn config(&self, runs: usize) -> Result<ScenarioConfig, CliError> {
        let mut cfg = ScenarioConfig::defaults(self.scenario);
        if let Some(n) = self.n {
            cfg.samples = n;
        }
        if let Some(t) = self.t {
            cfg.lags = t;
        }
        if let Some(k) = self.kernel_order {
            cfg.kernel_order = KernelOrder::from_number(k).map_err(CliError::usage)?;
        }
        cfg.seed = self.seed;
        cfg.runs = runs;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Dataset CSV (columns t,u1..um,y1..yp).
    data: PathBuf,
    #[arg(long, alias = "estimators", default_value = "ssr")]
    estimator: String,
    /// Use the weighted Hankel matrix for ssr.
    #[arg(long)]
    weighted: bool,
    /// Impulse-response length; defaults to that of a co-located system file.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 1)]
    kernel_order: u8,
    /// Output file or directory (default: next to the dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value = "ss,ssr")]
    estimators: String,
    /// Replace ssr by its weighted-Hankel variant.
    #[arg(long)]
    weighted: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Record wall-clock times in the CSV (output is then no longer reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    /// Per-run CSV written by `benchmark`.
    runs_csv: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Io(anyhow::Error),
    Usage(anyhow::Error),
    Failures(String),
    Other(anyhow::Error),
}

impl CliError {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError::Usage(e.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Io(_) => 2,
            CliError::Usage(_) => 3,
            CliError::Failures(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => CliError::Io(e.into()),
            Error::Unsupported(_) | Error::Parameter(_) | Error::Dimension(_) => CliError::Usage(e.into()),
            other => CliError::Other(other.into()),
        }
    }
}

fn io_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Io(e.into())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display())).map_err(io_err)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(io_err)
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = args.scenario.config(args.runs)?;
    cfg.validate(&[])?;
    create_dir(&args.out)?;
    for run in 0..args.runs {
        let (data, draw, seed) = generate_run(&cfg, run)?;
        let stem = format!("{}-seed{}-run{:03}", cfg.scenario, cfg.seed, run);
        let csv_path = args.out.join(format!("{stem}.csv"));
        data.write_csv_path(&csv_path).with_context(|| format!("cannot write {}", csv_path.display())).map_err(io_err)?;
        write_file(&args.out.join(format!("{stem}.system.json")), &to_json(&draw.system.to_record(cfg.lags)))?;
        log::info!("{stem}: run seed {seed}, {}", draw.note);
        println!("{}", csv_path.display());
    }
    Ok(())
}

/// `foo.csv` -> `foo.system.json`
fn system_path(data: &Path) -> PathBuf {
    data.with_extension("system.json")
}

fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let mut kind: EstimatorKind = args.estimator.parse()?;
    if args.weighted {
        if kind != EstimatorKind::Ssr && kind != EstimatorKind::SsrWeighted {
            return Err(CliError::usage(anyhow::anyhow!("--weighted applies to ssr only")));
        }
        kind = EstimatorKind::SsrWeighted;
    }
    let data = Dataset::<f64>::read_csv_path(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))
        .map_err(io_err)?;
    if kind == EstimatorKind::Atom && (data.outputs() != 1 || data.inputs() != 1) {
        return Err(Error::Unsupported("ATOM is SISO-only".into()).into());
    }
    let sys_path = system_path(&args.data);
    let truth = if sys_path.exists() {
        let text = fs::read_to_string(&sys_path).with_context(|| format!("cannot read {}", sys_path.display())).map_err(io_err)?;
        let rec: TrueSystemRecord = serde_json::from_str(&text)
            .with_context(|| format!("malformed system file {}", sys_path.display()))
            .map_err(io_err)?;
        Some(rec.theta0.to_impulse_response::<f64>()?)
    } else {
        None
    };
    let lags = match (args.t, &truth) {
        (Some(t), _) => t,
        (None, Some(g)) => g.len(),
        (None, None) => return Err(CliError::usage(anyhow::anyhow!("--t is required when no system file sits next to the dataset"))),
    };
    let order = KernelOrder::from_number(args.kernel_order).map_err(CliError::usage)?;
    let fitted = fit_estimator(kind, &data, lags, order, None)?;

    let out = match &args.out {
        Some(p) if p.is_dir() => p.join(estimate_name(&args.data, kind)),
        Some(p) => p.clone(),
        None => args.data.with_file_name(estimate_name(&args.data, kind)),
    };
    write_file(&out, &to_json(&fitted.record))?;
    println!("estimate written to {}", out.display());
    if let Some(iters) = fitted.iterations {
        println!("accepted iterations: {iters}");
    }
    match truth {
        Some(g) if g.len() == lags && g.outputs() == data.outputs() && g.inputs() == data.inputs() => {
            let f = fit_metric(&fitted.estimate, &g)?;
            println!("fit: {:.6}", f.value);
        }
        Some(_) => log::warn!("true system has a different shape or length; fit not computed"),
        None => {}
    }
    Ok(())
}

fn estimate_name(data: &Path, kind: EstimatorKind) -> String {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    format!("{stem}.{kind}.json")
}

fn benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let cfg = args.scenario.config(args.runs)?;
    let mut estimators = EstimatorKind::parse_list(&args.estimators)?;
    if args.weighted {
        for k in estimators.iter_mut() {
            if *k == EstimatorKind::Ssr {
                *k = EstimatorKind::SsrWeighted;
            }
        }
        estimators.dedup();
    }
    cfg.validate(&estimators)?;
    create_dir(&args.out)?;
    let opts = StudyOptions { workers: args.workers, timing: args.timing };
    let reports = run_study(&cfg, &estimators, &opts)?;

    let stem = format!("{}-seed{}", cfg.scenario, cfg.seed);
    let mut csv = Vec::new();
    write_runs_csv(&reports, &mut csv)?;
    write_file(&args.out.join(format!("{stem}.runs.csv")), &csv)?;
    let summary = aggregate(&reports);
    write_file(&args.out.join(format!("{stem}.summary.json")), &to_json(&summary))?;
    print!("{}", median_table(&summary));

    let failed = reports.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs had estimator failures", reports.len());
    }
    if failed as f64 > MAX_FAILED_FRACTION * reports.len() as f64 {
        return Err(CliError::Failures(format!("{failed} of {} runs failed", reports.len())));
    }
    Ok(())
}

fn summarize(args: &SummarizeArgs) -> Result<(), CliError> {
    let file = fs::File::open(&args.runs_csv).with_context(|| format!("cannot open {}", args.runs_csv.display())).map_err(io_err)?;
    let reports = read_runs_csv(file)?;
    if reports.is_empty() {
        return Err(CliError::usage(anyhow::anyhow!("{} has no runs", args.runs_csv.display())));
    }
    let summary = aggregate(&reports);
    print!("{}", median_table(&summary));
    let mut out = std::io::stdout().lock();
    out.write_all(&to_json(&summary)).map_err(io_err)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HANKEL_SSR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Summarize(a) => summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Io(err) | CliError::Usage(err) | CliError::Other(err) => format!("{err:#}"),
                CliError::Failures(s) => s.clone(),
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
