use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riskmon::corruption::{corruption_grid, CorruptionSpec, RunSpec};
use riskmon::io::{Calibration, ExperimentConfig, FrameLog, GridConfig, RiskRow};
use riskmon::pipeline;
use riskmon::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MALFORMED: u8 = 4;

#[derive(Parser)]
#[command(name = "riskmon", version, about = "Localization risk monitoring for stereo sliding-window bundle adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate runs, write frame logs and risk traces.
    Simulate(SimulateArgs),
    /// Replay frame logs through the monitor.
    Monitor(MonitorArgs),
    /// Calibrate the risk threshold from clean frame logs.
    Calibrate(CalibrateArgs),
    /// Score stored runs: AUC, hazard deciles, lead times, stop policy.
    Evaluate(EvaluateArgs),
    /// Time identical runs with and without the monitor.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for batch work; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Corruption grid (TOML); runs the full grid instead of one run.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Use this threshold instead of calibrating on clean replicas.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[command(flatten)]
    common: Common,
    /// Frame logs or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Threshold and monitor settings; runs uncalibrated when absent.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory for the risk traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Clean frame logs or directories containing them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory; receives calibration.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of frame logs and risk traces.
    runs: PathBuf,
    /// Threshold file; defaults to calibration.toml in the runs directory.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Timed repetitions; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Optional output directory; receives bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::InsufficientCalibrationData(_) => EXIT_CONFIG,
                Error::Diverged { .. } => EXIT_DIVERGED,
                Error::MalformedRecord { .. } | Error::AsymmetricMatrix { .. } | Error::UnsupportedSchema { .. } | Error::Io(_) => {
                    EXIT_MALFORMED
                }
                _ => EXIT_FAILURE,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Diverged(m) => write!(f, "{m}"),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Monitor(a) => monitor(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("riskmon: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn jobs(requested: Option<usize>) -> Result<usize, Error> {
    match requested {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Expands directories to the frame logs they contain, sorted.
fn collect_logs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.to_string_lossy().ends_with(".frames.jsonl"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no frame logs found".into()));
    }
    Ok(out)
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut config = load_config(a.common.config.as_deref())?;
    let jobs = jobs(a.common.jobs)?;
    if let Some(seed) = a.seed {
        config.scenario.seed = seed;
    }
    let grid = a.grid.as_deref().map(GridConfig::load).transpose()?;
    let runs: Vec<RunSpec> = match &grid {
        Some(g) => corruption_grid(&g.kinds, &g.severities, &g.seeds, g.window, g.ramp_frames),
        None => {
            let seed = config.scenario.seed;
            let corruption = config.corruption.clone().unwrap_or_else(|| CorruptionSpec::clean(seed));
            vec![RunSpec { scenario_seed: seed, corruption }]
        }
    };
    for r in &runs {
        r.corruption.validate(config.scenario.num_frames)?;
    }
    create_dir(&a.out)?;

    let calibration = match &a.calibration {
        Some(p) => {
            let c = Calibration::load(p)?;
            config.monitor = c.monitor.clone();
            c
        }
        None => {
            let seeds: Vec<u64> = match &grid {
                Some(g) => g.seeds.clone(),
                None => vec![config.scenario.seed],
            };
            pipeline::calibrate_seeds(&config, &seeds, jobs)?
        }
    };
    calibration.save(&a.out.join("calibration.toml"))?;

    let outputs = pipeline::run_batch(&config, &runs, Some(calibration.threshold), jobs)?;
    let mut diverged = Vec::new();
    for o in &outputs {
        pipeline::write_run(&a.out, o)?;
        let warnings = o.entries.iter().filter(|e| e.warning()).count();
        let status = if o.diverged() { "diverged" } else { "completed" };
        println!("{}\t{} frames\t{warnings} warnings\t{status}", o.tag(), o.log.frames.len());
        if o.diverged() {
            diverged.push(o.tag());
        }
    }
    // A grid expects some runs to fail; only a single run reports divergence.
    if grid.is_none() {
        if let Some(tag) = diverged.first() {
            return Err(Failure::Diverged(format!("backend diverged in run {tag}; partial logs written")));
        }
    }
    Ok(())
}

fn monitor(a: MonitorArgs) -> CliResult {
    let config = load_config(a.common.config.as_deref())?;
    let (monitor_config, threshold) = match &a.calibration {
        Some(p) => {
            let c = Calibration::load(p)?;
            (c.monitor, Some(c.threshold))
        }
        None => (config.monitor, None),
    };
    let logs = collect_logs(&a.inputs)?;
    create_dir(&a.out)?;
    for path in logs {
        let log = FrameLog::load(&path)?;
        let rows: Vec<RiskRow> = pipeline::replay(&log, &monitor_config, threshold)?.iter().map(RiskRow::from).collect();
        let out = pipeline::risk_csv_path(&a.out, &log.header.run_tag);
        riskmon::io::save_risk_csv(&out, &rows)?;
        let warnings = rows.iter().filter(|r| r.warning()).count();
        println!("{}\t{} frames\t{warnings} warnings", log.header.run_tag, rows.len());
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> CliResult {
    let config = load_config(a.common.config.as_deref())?;
    let mut logs = Vec::new();
    for path in collect_logs(&a.inputs)? {
        let log = FrameLog::load(&path)?;
        if log.header.corruption.as_ref().is_some_and(|c| !c.is_identity()) {
            eprintln!("riskmon: skipping corrupted log {}", path.display());
            continue;
        }
        logs.push(log);
    }
    if logs.is_empty() {
        return Err(Error::Config("no clean frame logs to calibrate on".into()).into());
    }
    let calibration = pipeline::calibrate(&logs, &config.monitor)?;
    create_dir(&a.out)?;
    calibration.save(&a.out.join("calibration.toml"))?;
    println!("threshold {} from {} samples over {} runs", calibration.threshold, calibration.samples, calibration.clean_runs);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let config = load_config(a.common.config.as_deref())?;
    let calibration_path = a.calibration.clone().unwrap_or_else(|| a.runs.join("calibration.toml"));
    let calibration = Calibration::load(&calibration_path)?;
    let report = pipeline::evaluate_dir(&a.runs, calibration.threshold, &config.evaluation)?;
    create_dir(&a.out)?;
    pipeline::write_report(&a.out, &report)?;
    for (indicator, auc) in &report.auc_per_indicator {
        match auc {
            Some(v) => println!("auc\t{}\t{v:.4}", indicator.name()),
            None => println!("auc\t{}\tn/a", indicator.name()),
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let config = load_config(a.common.config.as_deref())?;
    let report = pipeline::bench(&config, a.seed, a.repeats)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    println!("{json}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        std::fs::write(dir.join("bench.json"), json + "\n").map_err(Error::from)?;
    }
    Ok(())
}
