//! Separation experiments: single runs, the ten-run mixture experiment,
//! parameter sweeps, and rebuilding a run report from its event log.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, GrainClass, Mixture};
use crate::conveyor::{BinRecord, Route, SimError, Simulation};
use crate::eventlog::{EventKind, EventRecord, LogError};
use crate::geometry::NUM_CLASSES;
use crate::LineConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("mixture is empty")]
    EmptyMixture,
    #[error("need at least one run")]
    NoRuns,
    #[error("sweep needs at least one value")]
    NoValues,
    #[error("sweep values must be strictly increasing")]
    UnsortedValues,
    #[error("unknown sweep parameter {0:?}")]
    UnknownParameter(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Everything needed to start a run apart from the seed.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub config: LineConfig,
    pub mixture: Mixture,
    pub classifier: Classifier,
    /// Short classifier name recorded in reports and logs.
    pub classifier_label: String,
}

impl RunSpec {
    pub fn new(config: LineConfig, classifier: Classifier, label: &str) -> Self {
        Self {
            config,
            mixture: Mixture::REFERENCE,
            classifier,
            classifier_label: label.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub classifier: String,
    pub seed: u64,
    pub bins: Vec<BinRecord>,
    pub separation_accuracy: f64,
    pub throughput_g_per_min: f64,
    pub late_command_count: u64,
    /// Per true class: `[accepted, ejected]`.
    pub routing: [[u32; 2]; NUM_CLASSES],
    pub first_feed_s: f64,
    pub last_bin_s: f64,
    pub binned_mass_g: f64,
}

/// Good goes to accept, everything else to any eject bin.
pub fn correctly_routed(record: &BinRecord) -> bool {
    match record.routed_to {
        Route::Accept => record.true_class == GrainClass::Good,
        Route::Eject(_) => record.true_class != GrainClass::Good,
    }
}

/// Binned mass per minute from first feed to last bin. Zero, with a
/// warning, when nothing was binned.
pub fn throughput(report: &RunReport) -> f64 {
    throughput_of(report.binned_mass_g, report.first_feed_s, report.last_bin_s)
}

fn throughput_of(mass_g: f64, first_feed_s: f64, last_bin_s: f64) -> f64 {
    let minutes = (last_bin_s - first_feed_s) / 60.0;
    if mass_g <= 0.0 || !(minutes > 0.0) {
        log::warn!("no grains binned; throughput reported as 0");
        return 0.0;
    }
    mass_g / minutes
}

struct ReportInputs<'a> {
    config_digest: String,
    classifier: String,
    seed: u64,
    bins: Vec<BinRecord>,
    masses: &'a [f64],
    first_feed_s: Option<f64>,
    late_command_count: u64,
}

fn assemble(inputs: ReportInputs<'_>) -> RunReport {
    let mut bins = inputs.bins;
    bins.sort_by_key(|b| b.grain_id);
    let mut routing = [[0u32; 2]; NUM_CLASSES];
    for b in &bins {
        let col = usize::from(matches!(b.routed_to, Route::Eject(_)));
        routing[b.true_class.index()][col] += 1;
    }
    let correct = bins.iter().filter(|b| correctly_routed(b)).count();
    let separation_accuracy = if bins.is_empty() {
        0.0
    } else {
        correct as f64 / bins.len() as f64
    };
    let binned_mass_g: f64 = bins.iter().map(|b| inputs.masses[b.grain_id as usize]).sum();
    let first_feed_s = inputs.first_feed_s.unwrap_or(0.0);
    let last_bin_s = bins.iter().map(|b| b.exit_time).fold(first_feed_s, f64::max);
    RunReport {
        config_digest: inputs.config_digest,
        classifier: inputs.classifier,
        seed: inputs.seed,
        separation_accuracy,
        throughput_g_per_min: throughput_of(binned_mass_g, first_feed_s, last_bin_s),
        late_command_count: inputs.late_command_count,
        routing,
        first_feed_s,
        last_bin_s,
        binned_mass_g,
        bins,
    }
}

/// A finished run: its report and the full event log.
pub struct RunOutput {
    pub report: RunReport,
    pub log: Vec<EventRecord>,
    pub simulation: Simulation,
}

pub fn run_once(spec: &RunSpec, seed: u64) -> Result<RunOutput, ExperimentError> {
    if spec.mixture.total() == 0 {
        return Err(ExperimentError::EmptyMixture);
    }
    let mut sim = Simulation::new(
        spec.config.clone(),
        &spec.mixture,
        spec.classifier.clone(),
        seed,
    )?;
    sim.label_classifier(&spec.classifier_label);
    sim.run_to_completion()?;
    let log = sim.log().to_vec();
    let masses: Vec<f64> = sim.grains().iter().map(|g| g.mass_g).collect();
    let report = assemble(ReportInputs {
        config_digest: spec.config.digest(),
        classifier: crate::config::sanitize(&spec.classifier_label),
        seed,
        bins: sim.bins().to_vec(),
        masses: &masses,
        first_feed_s: sim.first_feed_time(),
        late_command_count: sim.scheduler_stats().late_commands,
    });
    Ok(RunOutput {
        report,
        log,
        simulation: sim,
    })
}

/// Rebuilds a run report from an event log alone.
pub fn report_from_log(log: &[EventRecord]) -> Result<RunReport, ExperimentError> {
    let bad = |line: usize, reason: &str| {
        ExperimentError::Log(LogError {
            line,
            reason: reason.to_string(),
        })
    };
    let header = log
        .first()
        .filter(|r| r.kind == EventKind::RunStart)
        .ok_or_else(|| bad(1, "log does not start with RunStart"))?;
    let seed = header
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(1, "RunStart without seed"))?;
    let config_digest = header
        .get("config")
        .ok_or_else(|| bad(1, "RunStart without config digest"))?
        .to_string();
    let classifier = header.get("classifier").unwrap_or("unknown").to_string();

    let mut classes: Vec<Option<GrainClass>> = Vec::new();
    let mut masses: Vec<f64> = Vec::new();
    let mut first_feed = None;
    let mut late = 0u64;
    let mut bins = Vec::new();
    for (i, r) in log.iter().enumerate() {
        let line = i + 1;
        match r.kind {
            EventKind::FeedGrain => {
                let id = r.grain.ok_or_else(|| bad(line, "FeedGrain without grain id"))? as usize;
                let class: GrainClass = r
                    .get("class")
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad(line, "FeedGrain without class"))?;
                let mass: f64 = r
                    .get("mass_g")
                    .and_then(|m| m.parse().ok())
                    .ok_or_else(|| bad(line, "FeedGrain without mass"))?;
                if classes.len() <= id {
                    classes.resize(id + 1, None);
                    masses.resize(id + 1, 0.0);
                }
                classes[id] = Some(class);
                masses[id] = mass;
                first_feed.get_or_insert(r.time);
            }
            EventKind::LateCommand => late += 1,
            EventKind::GrainBinned => {
                let id = r.grain.ok_or_else(|| bad(line, "GrainBinned without grain id"))?;
                let true_class = classes
                    .get(id as usize)
                    .copied()
                    .flatten()
                    .ok_or_else(|| bad(line, "grain binned before it was fed"))?;
                let routed_to = r
                    .get("bin")
                    .and_then(Route::parse)
                    .ok_or_else(|| bad(line, "GrainBinned without valid bin"))?;
                bins.push(BinRecord {
                    grain_id: id,
                    true_class,
                    routed_to,
                    exit_time: r.time,
                });
            }
            _ => {}
        }
    }
    Ok(assemble(ReportInputs {
        config_digest,
        classifier,
        seed,
        bins,
        masses: &masses,
        first_feed_s: first_feed,
        late_command_count: late,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mean_accuracy: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std_accuracy: f64,
    pub mean_throughput: f64,
    pub reports: Vec<RunReport>,
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs seeds `base_seed..base_seed + n_runs`, `jobs` at a time. Results
/// are ordered by seed whatever the completion order.
pub fn run_experiment(
    spec: &RunSpec,
    n_runs: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<ExperimentSummary, ExperimentError> {
    if n_runs == 0 {
        return Err(ExperimentError::NoRuns);
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|k| base_seed + k).collect();
    let one = |seed: &u64| run_once(spec, *seed).map(|o| o.report);
    let reports: Vec<RunReport> = if jobs <= 1 {
        seeds.iter().map(one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ExperimentError::Pool(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(one).collect::<Result<_, _>>())?
    };
    let acc: Vec<f64> = reports.iter().map(|r| r.separation_accuracy).collect();
    let thr: Vec<f64> = reports.iter().map(|r| r.throughput_g_per_min).collect();
    let (mean_accuracy, std_accuracy) = mean_and_sample_std(&acc);
    let (mean_throughput, _) = mean_and_sample_std(&thr);
    Ok(ExperimentSummary {
        mean_accuracy,
        std_accuracy,
        mean_throughput,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    BeltSpeed,
    PulseMs,
    NozzleOffsetMm,
    DetectionLatencyMs,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::BeltSpeed => "belt_speed",
            SweepParameter::PulseMs => "pulse_ms",
            SweepParameter::NozzleOffsetMm => "nozzle_offset_mm",
            SweepParameter::DetectionLatencyMs => "detection_latency_ms",
        }
    }

    /// Config for one sweep point. Sweeping the nozzle offset changes what
    /// the controller assumes while the rig keeps the base offset.
    pub fn apply(self, base: &LineConfig, value: f64) -> LineConfig {
        let mut c = base.clone();
        match self {
            SweepParameter::BeltSpeed => c.belt_speed = value,
            SweepParameter::PulseMs => c.pulse_ms = value,
            SweepParameter::NozzleOffsetMm => {
                c.actual_nozzle_offset_mm = Some(base.physical_nozzle_offset_mm());
                c.nozzle_offset_mm = value;
            }
            SweepParameter::DetectionLatencyMs => c.detection_latency_ms = value,
        }
        c
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            SweepParameter::BeltSpeed,
            SweepParameter::PulseMs,
            SweepParameter::NozzleOffsetMm,
            SweepParameter::DetectionLatencyMs,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| ExperimentError::UnknownParameter(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_throughput: f64,
    pub late_commands: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(
    spec: &RunSpec,
    parameter: SweepParameter,
    values: &[f64],
    runs_per_value: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<SweepReport, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::NoValues);
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ExperimentError::UnsortedValues);
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let point = RunSpec {
            config: parameter.apply(&spec.config, value),
            ..spec.clone()
        };
        let s = run_experiment(&point, runs_per_value, base_seed, jobs)?;
        rows.push(SweepRow {
            value,
            mean_accuracy: s.mean_accuracy,
            std_accuracy: s.std_accuracy,
            mean_throughput: s.mean_throughput,
            late_commands: s.reports.iter().map(|r| r.late_command_count).sum(),
        });
    }
    Ok(SweepReport { parameter, rows })
}

pub const SUMMARY_HEADER: &str = "seed,accuracy,throughput,late_commands";

pub fn summary_row(r: &RunReport) -> String {
    format!(
        "{},{:.6},{:.6},{}",
        r.seed, r.separation_accuracy, r.throughput_g_per_min, r.late_command_count
    )
}

pub fn summary_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&summary_row(r));
        out.push('\n');
    }
    out
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = format!(
        "{},mean_accuracy,std_accuracy,mean_throughput,late_commands\n",
        report.parameter
    );
    for row in &report.rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            row.value, row.mean_accuracy, row.std_accuracy, row.mean_throughput, row.late_commands
        ));
    }
    out
}
