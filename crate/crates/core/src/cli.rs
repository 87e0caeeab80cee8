//! Command-line front end. Exit codes: 0 success, 2 user or configuration
//! error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ClassifierSpec, ConfigError, LineConfig, Scenario};
use crate::conveyor::SimError;
use crate::eventlog::{parse_log, write_log};
use crate::experiment::{
    report_from_log, run_once, run_experiment, summary_csv, sweep, sweep_csv, ExperimentError,
    RunReport, RunSpec, SweepParameter,
};
use crate::scheduler::{CommandSink, FileSink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lentil-sort", version, about = "Lentil sorting line simulator")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its report, event log and valve commands.
    Simulate(RunArgs),
    /// Run the ten-run mixture experiment.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Repeat the experiment over values of one line parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// belt_speed, pulse_ms, nozzle_offset_mm or detection_latency_ms.
        #[arg(long)]
        param: String,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a config (and optional scenario) and list every violation.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Recompute a run report from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// oracle, calibrated, or a confusion-matrix file. Overrides the scenario.
    #[arg(long)]
    classifier: Option<String>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn user(message: impl ToString) -> Self {
        Self {
            code: EXIT_USER,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::user(e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::EmptyMixture
            | ExperimentError::NoRuns
            | ExperimentError::NoValues
            | ExperimentError::UnsortedValues
            | ExperimentError::UnknownParameter(_)
            | ExperimentError::Sim(SimError::Config(_))
            | ExperimentError::Sim(SimError::OverCapacity { .. }) => Failure::user(e),
            _ => Failure::runtime(e),
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let mut stdout = io::stdout().lock();
    let mut out: Box<dyn Write> = if cli.quiet {
        Box::new(io::sink())
    } else {
        Box::new(&mut stdout)
    };
    match dispatch(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Simulate(args) => simulate(&args, out),
        Command::Experiment { run, runs, jobs } => experiment(&run, runs, jobs, out),
        Command::Sweep {
            run,
            param,
            values,
            runs,
            jobs,
        } => {
            let parameter: SweepParameter = param.parse()?;
            let (scenario, spec) = load_run(&run)?;
            let dir = prepare_out(&run.out)?;
            let report = sweep(&spec, parameter, &values, runs, scenario.seed, jobs)?;
            let csv = sweep_csv(&report);
            write_file(&dir.join("sweep.csv"), &csv)?;
            write_file(&dir.join("sweep.json"), &to_json(&report)?)?;
            emit(out, &csv)
        }
        Command::ValidateConfig { config, scenario } => {
            let scenario = load_scenario(config.as_deref(), scenario.as_deref())?;
            scenario.config.validate()?;
            scenario.classifier.build()?;
            emit(out, &format!("ok: config {}\n", scenario.config.digest()))
        }
        Command::Replay {
            log,
            config,
            scenario,
            out: out_dir,
        } => {
            let scenario = load_scenario(config.as_deref(), scenario.as_deref())?;
            let text = fs::read_to_string(&log)
                .map_err(|e| Failure::user(format!("cannot read {}: {e}", log.display())))?;
            let records = parse_log(&text).map_err(Failure::runtime)?;
            let report = report_from_log(&records)?;
            let digest = scenario.config.digest();
            if report.config_digest != digest {
                return Err(Failure::user(format!(
                    "log was produced with config {}, but the given config is {digest}",
                    report.config_digest
                )));
            }
            if let Some(dir) = out_dir {
                let dir = prepare_out(&dir)?;
                write_reports(&dir, &report)?;
            }
            emit(out, &summary_csv(std::slice::from_ref(&report)))
        }
    }
}

fn simulate(args: &RunArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let (scenario, spec) = load_run(args)?;
    let dir = prepare_out(&args.out)?;
    let run = run_once(&spec, scenario.seed)?;
    write_reports(&dir, &run.report)?;
    write_file(&dir.join("events.log"), &write_log(&run.log))?;
    let mut sink = FileSink::new(Vec::new());
    for cmd in run.simulation.fired_commands() {
        sink.send(cmd).map_err(Failure::runtime)?;
    }
    let commands = String::from_utf8(sink.into_inner()).expect("command log is ASCII");
    write_file(&dir.join("commands.csv"), &format!("fire_at_s,nozzle,pulse_ms\n{commands}"))?;
    emit(out, &summary_csv(std::slice::from_ref(&run.report)))
}

fn experiment(args: &RunArgs, runs: usize, jobs: usize, out: &mut dyn Write) -> Result<(), Failure> {
    let (scenario, spec) = load_run(args)?;
    let dir = prepare_out(&args.out)?;
    let summary = run_experiment(&spec, runs, scenario.seed, jobs)?;
    write_file(&dir.join("summary.csv"), &summary_csv(&summary.reports))?;
    write_file(&dir.join("report.json"), &to_json(&summary)?)?;
    emit(
        out,
        &format!(
            "separation_accuracy: {:.3} ± {:.3}\nthroughput_g_per_min: {:.3}\n",
            summary.mean_accuracy, summary.std_accuracy, summary.mean_throughput
        ),
    )
}

fn load_scenario(config: Option<&Path>, scenario: Option<&Path>) -> Result<Scenario, Failure> {
    let base = match config {
        Some(p) => LineConfig::load(p)?,
        None => LineConfig::default(),
    };
    Ok(match scenario {
        Some(p) => Scenario::load(p, &base)?,
        None => Scenario::with_config(base),
    })
}

fn load_run(args: &RunArgs) -> Result<(Scenario, RunSpec), Failure> {
    let mut scenario = load_scenario(args.config.as_deref(), args.scenario.as_deref())?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(c) = &args.classifier {
        scenario.classifier = ClassifierSpec::parse(c, None);
    }
    scenario.config.validate()?;
    let classifier = scenario.classifier.build()?;
    let spec = RunSpec {
        config: scenario.config.clone(),
        mixture: scenario.mixture,
        classifier,
        classifier_label: scenario.classifier.label(),
    };
    Ok((scenario, spec))
}

/// Creates the output directory and checks it is writable before any
/// simulation time is spent.
fn prepare_out(dir: &Path) -> Result<PathBuf, Failure> {
    let unusable = |e: io::Error| {
        Failure::user(format!("output directory {} is not usable: {e}", dir.display()))
    };
    fs::create_dir_all(dir).map_err(unusable)?;
    let probe = dir.join(".write-check");
    fs::write(&probe, b"").map_err(unusable)?;
    let _ = fs::remove_file(&probe);
    Ok(dir.to_path_buf())
}

fn write_reports(dir: &Path, report: &RunReport) -> Result<(), Failure> {
    write_file(&dir.join("summary.csv"), &summary_csv(std::slice::from_ref(report)))?;
    write_file(&dir.join("report.json"), &to_json(report)?)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(Failure::runtime)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(Failure::runtime)
}
