//! Command implementations behind the `accel-resilience` binary. Each
//! command writes CSV files into the configured output directory; identical
//! configs produce byte-identical files.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rayon::prelude::*;

use crate::abft::write_detection_trace;
use crate::checkpoint::write_recovery_trace;
use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::fault::{write_fault_trace, FaultPlan};
use crate::memsim::SimReport;
use crate::workload::{
    characterize_bits, characterize_blocks, characterize_steps, clean_run, relative_l2, run_denoise,
    self_correction_trace, write_characterization, RunOutput, ToyModel,
};

pub const REPORT_FILE: &str = "report.csv";
pub const FAULT_TRACE_FILE: &str = "fault_trace.csv";
pub const DETECTION_TRACE_FILE: &str = "detection_trace.csv";
pub const RECOVERY_TRACE_FILE: &str = "recovery_trace.csv";
pub const DEVIATION_FILE: &str = "deviation.csv";

/// Reads and validates a config file; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => parse_config(""),
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_once(cfg: &RunConfig, model: &ToyModel, plan: &FaultPlan) -> Result<RunOutput> {
    let schedule = cfg.build_schedule(model)?;
    run_denoise(model, plan, &schedule, &cfg.sim_config()?)
}

/// Runs the configured simulation and writes the report, the three event
/// traces, and the per-step deviation from the clean run.
pub fn cmd_run(cfg: &RunConfig) -> Result<SimReport> {
    let model = cfg.build_model()?;
    let out = run_once(cfg, &model, &cfg.fault_plan()?)?;
    let clean = clean_run(&model)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;

    let (path, w) = create(dir, REPORT_FILE)?;
    out.report.write_csv(w).map_err(|e| with_path(e, &path))?;
    let (path, w) = create(dir, FAULT_TRACE_FILE)?;
    write_fault_trace(w, &out.traces.faults).map_err(|e| with_path(e, &path))?;
    let (path, w) = create(dir, DETECTION_TRACE_FILE)?;
    write_detection_trace(w, &out.traces.detections).map_err(|e| with_path(e, &path))?;
    let (path, w) = create(dir, RECOVERY_TRACE_FILE)?;
    write_recovery_trace(w, &out.traces.recoveries).map_err(|e| with_path(e, &path))?;

    let (path, w) = create(dir, DEVIATION_FILE)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["step", "relative_l2"])?;
    for (step, (f, c)) in out.trajectory.states.iter().zip(&clean.states).enumerate() {
        csv.write_record([step.to_string(), relative_l2(f, c).to_string()])?;
    }
    csv.flush().map_err(|e| Error::io(&path, e))?;
    Ok(out.report)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CharacterizeMode {
    Bit,
    Step,
    Block,
    #[value(name = "selfcorrect")]
    SelfCorrect,
}

impl CharacterizeMode {
    pub fn name(self) -> &'static str {
        match self {
            CharacterizeMode::Bit => "bit",
            CharacterizeMode::Step => "step",
            CharacterizeMode::Block => "block",
            CharacterizeMode::SelfCorrect => "selfcorrect",
        }
    }
}

/// Runs one characterization experiment and writes
/// `characterize_<mode>.csv`.
pub fn cmd_characterize(cfg: &RunConfig, mode: CharacterizeMode) -> Result<PathBuf> {
    let model = cfg.build_model()?;
    let c = &cfg.characterize;
    let rows = match mode {
        CharacterizeMode::Bit => {
            let bits = c.bits.clone().unwrap_or_else(|| (0..32).collect());
            characterize_bits(&model, &bits, c.trials, c.seed)?
        }
        CharacterizeMode::Step => {
            let steps = c.steps.clone().unwrap_or_else(|| (0..model.steps()).collect());
            characterize_steps(&model, &steps, c.trials, c.bit, c.seed)?
        }
        CharacterizeMode::Block => {
            let blocks = c.blocks.clone().unwrap_or_else(|| cfg.block_names());
            characterize_blocks(&model, &blocks, c.trials, c.step, c.bit, c.seed)?
        }
        CharacterizeMode::SelfCorrect => self_correction_trace(&model, c.trace_step, c.trace_bit, c.seed)?.rows(),
    };
    ensure_dir(&cfg.out_dir)?;
    let (path, w) = create(&cfg.out_dir, &format!("characterize_{}.csv", mode.name()))?;
    write_characterization(w, &rows).map_err(|e| with_path(e, &path))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// BER of the aggressive operating point.
    Ber,
    /// Detection threshold, given as a bit position.
    Theta,
    /// Checkpoint interval.
    Interval,
    /// Systolic array edge length.
    #[value(name = "array_size")]
    ArraySize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Ber => "ber",
            SweepAxis::Theta => "theta",
            SweepAxis::Interval => "interval",
            SweepAxis::ArraySize => "array_size",
        }
    }
}

/// One row of a sweep table: trial means at one axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub trials: usize,
    pub mean_deviation: f64,
    pub stddev: f64,
    pub mean_energy_j: f64,
    pub mean_latency_s: f64,
    pub checkpoint_bytes: f64,
    pub recovery_bytes: f64,
    pub masked_elements: f64,
    pub extra_macs: f64,
}

fn whole(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidParameter(format!("{} sweep needs whole numbers, got {v}", axis.name())))
    }
}

/// Config for one sweep point; the result is re-validated.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Ber => {
            let name = c.aggressive_point.clone();
            let point = c.points.iter_mut().find(|p| p.name == name);
            point.expect("validated config names its aggressive point").ber = value;
        }
        SweepAxis::Theta => {
            let bit = whole(axis, value)?;
            if bit > 62 {
                return Err(Error::InvalidParameter(format!("theta bit {bit} outside [0, 62]")));
            }
            c.theta = 1i64 << bit;
        }
        SweepAxis::Interval => c.interval = whole(axis, value)?,
        SweepAxis::ArraySize => c.accel.array_size = whole(axis, value)?,
    }
    parse_config(&crate::config::render_config(&c))
}

/// Runs `cfg.characterize.trials` seeded runs per value; seeds are shared
/// across values. Writes `sweep_<axis>.csv` and returns the rows.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<(PathBuf, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    let model = cfg.build_model()?;
    let clean = clean_run(&model)?;
    let trials = cfg.characterize.trials;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let point = sweep_point(cfg, axis, value)?;
        let runs: Vec<(f64, SimReport)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut c = point.clone();
                c.seed = cfg.seed.wrapping_add(t as u64);
                let out = run_once(&c, &model, &c.fault_plan()?)?;
                Ok((relative_l2(out.trajectory.final_state(), clean.final_state()), out.report))
            })
            .collect::<Result<_>>()?;
        let n = trials as f64;
        let mean = |f: &dyn Fn(&(f64, SimReport)) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let dev = mean(&|r| r.0);
        let var = if trials > 1 {
            runs.iter().map(|r| (r.0 - dev).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(SweepRow {
            value,
            trials,
            mean_deviation: dev,
            stddev: var.sqrt(),
            mean_energy_j: mean(&|r| r.1.total_energy_j()),
            mean_latency_s: mean(&|r| r.1.total_latency_s()),
            checkpoint_bytes: mean(&|r| r.1.checkpoint_bytes as f64),
            recovery_bytes: mean(&|r| r.1.recovery_bytes as f64),
            masked_elements: mean(&|r| r.1.masked_elements as f64),
            extra_macs: mean(&|r| r.1.extra_macs as f64),
        });
    }
    ensure_dir(&cfg.out_dir)?;
    let (path, w) = create(&cfg.out_dir, &format!("sweep_{}.csv", axis.name()))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "axis",
        "value",
        "trials",
        "mean_deviation",
        "stddev",
        "energy_total_j",
        "latency_total_s",
        "bytes_checkpoint_write",
        "bytes_recovery_read",
        "masked_elements",
        "extra_macs",
    ])?;
    for r in &rows {
        csv.write_record([
            axis.name().to_string(),
            r.value.to_string(),
            r.trials.to_string(),
            r.mean_deviation.to_string(),
            r.stddev.to_string(),
            r.mean_energy_j.to_string(),
            r.mean_latency_s.to_string(),
            r.checkpoint_bytes.to_string(),
            r.recovery_bytes.to_string(),
            r.masked_elements.to_string(),
            r.extra_macs.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io(&path, e))?;
    Ok((path, rows))
}

/// Pretty-prints a report CSV as aligned `counter  value` lines.
pub fn cmd_report(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let counters = SimReport::read_counters(file)?;
    let width = counters.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in counters {
        let shown = match v.parse::<f64>() {
            Ok(x) if v.contains(['.', 'e']) => format!("{x:.6e}"),
            _ => v,
        };
        writeln!(out, "{k:<width$}  {shown:>16}").expect("writing to a String");
    }
    Ok(out)
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub fn print(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}
