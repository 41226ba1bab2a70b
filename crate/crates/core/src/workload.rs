//! Synthetic iterative-denoising workload and the resilience experiments
//! run on it.
//!
//! The toy model keeps a `dim x dim` real state `X`. Each step runs one
//! embedding GEMM on a per-step conditioning matrix `C_t`, then a chain of
//! body blocks, each consuming the previous block's output plus the
//! embedding:
//!
//! ```text
//! e   = C_t W_emb
//! h_0 = X_t
//! h_k = (h_{k-1} + e) W_k            k = 1..depth
//! X_{t+1} = X_t + a_t (h_depth - X_t),   a_t = damping / (1 + t)
//! ```
//!
//! Every body weight is a scaled random orthogonal matrix with gain below
//! one, so the map is a contraction toward a fixed point set mostly by the
//! embedding. The decaying step size makes early steps move the state the
//! most, and the contraction makes later steps shrink earlier
//! perturbations. Every GEMM runs on INT8 operands with INT32
//! accumulation. Activation scales and output ranges are calibrated once
//! on a fault-free pass, as a deployed INT8 pipeline would be, so a
//! corrupted value saturates instead of rescaling the whole tensor.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::abft::{
    build_mask, detect_tile, estimate_ber, tile_checksums, CorrectionMask, DetectionEvent, DetectionSample,
};
use crate::checkpoint::{
    recover, recovery_traffic, CheckpointKey, CheckpointStore, RecoveryContext, RecoveryEvent, RecoveryPolicy,
};
use crate::dvfs::{monitor_step, DvfsSchedule, MonitorState, OperatingPoint};
use crate::error::{Error, Result};
use crate::fault::{faults_for_op, inject, FaultPlan, FaultRecord, WORD_BITS};
use crate::memsim::{account, AccelConfig, EnergyModel, GemmRecord, LayoutDescriptor, LayoutKind, MemConfig, SimReport};
use crate::tensor::{absmax_scale, gemm_exact, quantize, tile_partition, AccTensor, QuantTensor};

pub const EMBED_BLOCK: &str = "embed";
const OUTPUT_ROLE: &str = "out";
/// Margin applied to calibrated ranges.
const CALIBRATION_HEADROOM: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockRole {
    Embedding,
    Body,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub role: BlockRole,
    pub weight: QuantTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub depth: usize,
    pub steps: usize,
    pub damping: f64,
    /// Spectral gain of each body weight; must be below one.
    pub body_gain: f64,
    /// Gain of the embedding weight.
    pub embed_gain: f64,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 4,
            steps: 20,
            damping: 0.5,
            body_gain: 0.5,
            embed_gain: 3.0,
            seed: 7,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.steps == 0 {
            return Err(Error::InvalidParameter("dim, depth and steps must be >= 1".into()));
        }
        if self.dim > crate::tensor::MAX_INNER_DIM {
            return Err(Error::InnerDimTooLarge(self.dim));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must lie in (0, 1), got {}",
                self.damping
            )));
        }
        if !(self.body_gain > 0.0 && self.body_gain < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "body gain must lie in (0, 1), got {}",
                self.body_gain
            )));
        }
        if !(self.embed_gain > 0.0 && self.embed_gain.is_finite()) {
            return Err(Error::InvalidParameter("embedding gain must be positive".into()));
        }
        Ok(())
    }
}

/// Desk-scale stand-in for a diffusion backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub params: ModelParams,
    /// `blocks[0]` is the embedding; the rest are body blocks in order.
    pub blocks: Vec<Block>,
    init: Vec<f64>,
    cond: Vec<f64>,
    calibration: Option<Calibration>,
}

/// Static per-block input scales and output saturation bounds.
#[derive(Debug, Clone, PartialEq)]
struct Calibration {
    input_scale: Vec<f64>,
    output_bound: Vec<f64>,
}

pub fn build_toy_model(dim: usize, depth: usize, steps: usize, seed: u64) -> Result<ToyModel> {
    ToyModel::build(ModelParams {
        dim,
        depth,
        steps,
        seed,
        ..ModelParams::default()
    })
}

fn orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // Gram-Schmidt on Gaussian rows; retry the (measure-zero) degenerate case
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// Largest singular value by power iteration on `W^T W`.
fn spectral_norm(w: &[f64], dim: usize) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let wv: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| w[i * dim + j] * v[j]).sum()).collect();
        let wtwv: Vec<f64> = (0..dim).map(|j| (0..dim).map(|i| w[i * dim + j] * wv[i]).sum()).collect();
        let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        v = wtwv.into_iter().map(|x| x / norm).collect();
    }
    sigma
}

impl ToyModel {
    pub fn build(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let dim = params.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut blocks = Vec::with_capacity(params.depth + 1);
        let mut gain_bound = 1.0;
        for idx in 0..=params.depth {
            let (name, role, gain) = if idx == 0 {
                (EMBED_BLOCK.to_string(), BlockRole::Embedding, params.embed_gain)
            } else {
                (format!("blk{}", idx - 1), BlockRole::Body, params.body_gain)
            };
            let w: Vec<f64> = orthogonal(&mut rng, dim).into_iter().map(|x| x * gain).collect();
            let weight = quantize(dim, dim, &w, absmax_scale(&w))?;
            if role == BlockRole::Body {
                gain_bound *= spectral_norm(&weight.dequantize(), dim);
            }
            blocks.push(Block { name, role, weight });
        }
        if gain_bound >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "quantized body chain is not contractive (gain bound {gain_bound})"
            )));
        }
        let init = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        let cond = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut model = Self {
            params,
            blocks,
            init,
            cond,
            calibration: None,
        };
        model.calibration = Some(model.calibrate()?);
        Ok(model)
    }

    /// Fault-free pass with dynamic absmax scales, recording the largest
    /// input and output magnitude seen by each block.
    fn calibrate(&self) -> Result<Calibration> {
        let n = self.blocks.len();
        let mut input_max = vec![0.0f64; n];
        let mut output_max = vec![0.0f64; n];
        let mut state = self.init.clone();
        for step in 0..self.steps() {
            state = advance(self, step, &state, |idx, a, w| {
                input_max[idx] = input_max[idx].max(a.scale() * 127.0);
                let out = clean_gemm(self, idx, a, w)?;
                output_max[idx] = out.iter().fold(output_max[idx], |m, v| m.max(v.abs()));
                Ok(out)
            })?;
        }
        let positive = |m: f64| if m > 0.0 { m * CALIBRATION_HEADROOM } else { 1.0 };
        Ok(Calibration {
            input_scale: input_max.into_iter().map(|m| positive(m) / 127.0).collect(),
            output_bound: output_max.into_iter().map(positive).collect(),
        })
    }

    fn input_scale(&self, idx: usize, values: &[f64]) -> f64 {
        match &self.calibration {
            Some(c) => c.input_scale[idx],
            None => absmax_scale(values),
        }
    }

    /// Saturation bound applied to block `idx`'s dequantized output.
    pub fn output_bound(&self, idx: usize) -> f64 {
        self.calibration.as_ref().map_or(f64::INFINITY, |c| c.output_bound[idx])
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn block_names(&self) -> Vec<(String, BlockRole)> {
        self.blocks.iter().map(|b| (b.name.clone(), b.role)).collect()
    }

    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.init
    }

    pub fn step_size(&self, step: usize) -> f64 {
        self.params.damping / (1.0 + step as f64)
    }

    /// Conditioning input of the embedding GEMM at `step`: a fixed random
    /// pattern plus a small sinusoidal timestep feature per column.
    pub fn conditioning(&self, step: usize) -> Vec<f64> {
        let dim = self.dim();
        let phase = std::f64::consts::PI * (step + 1) as f64 / (self.steps() + 1) as f64;
        (0..dim * dim)
            .map(|i| self.cond[i] + 0.1 * (phase + (i % dim) as f64).sin())
            .collect()
    }

    /// MACs in one step.
    pub fn macs_per_step(&self) -> u64 {
        let d = self.dim() as u64;
        d * d * d * self.blocks.len() as u64
    }
}

/// Output of one GEMM after any fault handling, as the next layer sees it:
/// dequantized and saturated to `±bound`.
pub(crate) fn dequantize_output(acc: &AccTensor, a: &QuantTensor, w: &QuantTensor, bound: f64) -> Vec<f64> {
    let s = a.scale() * w.scale();
    acc.data().iter().map(|&v| (v as f64 * s).clamp(-bound, bound)).collect()
}

/// Runs one denoising step. `gemm` receives the block index, the quantized
/// activation and the block weight, and returns the dequantized output.
fn advance<F>(model: &ToyModel, step: usize, state: &[f64], mut gemm: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &QuantTensor, &QuantTensor) -> Result<Vec<f64>>,
{
    let dim = model.dim();
    let cond = model.conditioning(step);
    let qc = quantize(dim, dim, &cond, model.input_scale(0, &cond))?;
    let emb = gemm(0, &qc, &model.blocks[0].weight)?;
    let mut h = state.to_vec();
    for idx in 1..model.blocks.len() {
        let input: Vec<f64> = h.iter().zip(&emb).map(|(x, e)| x + e).collect();
        let qa = quantize(dim, dim, &input, model.input_scale(idx, &input))?;
        h = gemm(idx, &qa, &model.blocks[idx].weight)?;
    }
    let a = model.step_size(step);
    Ok(state.iter().zip(&h).map(|(x, y)| x + a * (y - x)).collect())
}

fn clean_gemm(model: &ToyModel, idx: usize, a: &QuantTensor, w: &QuantTensor) -> Result<Vec<f64>> {
    Ok(dequantize_output(&gemm_exact(a, w)?, a, w, model.output_bound(idx)))
}

/// Per-step state snapshots plus per-step fault-handling counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` states, starting with the initial state.
    pub states: Vec<Vec<f64>>,
    pub events: Vec<StepEvents>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub faults: u64,
    pub flagged_rows: u64,
    pub masked: u64,
    pub dropped: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Fault-free reference run.
pub fn clean_run(model: &ToyModel) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(model.steps() + 1);
    states.push(model.init.clone());
    for step in 0..model.steps() {
        let next = advance(model, step, &states[step], |idx, a, w| clean_gemm(model, idx, a, w))?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        events: vec![StepEvents::default(); model.steps()],
    })
}

/// Relative L2 distance `|faulty - clean| / |clean|`; absolute when the
/// clean vector is zero.
pub fn relative_l2(faulty: &[f64], clean: &[f64]) -> f64 {
    let diff = faulty.iter().zip(clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = clean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// Layout used for checkpoints in DRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointLayout {
    RowMajor,
    TilePacked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub ladder: Vec<OperatingPoint>,
    pub target_ber: f64,
    pub band: f64,
    pub window: usize,
    pub start: usize,
}

/// Everything `run_denoise` needs besides the model and the fault plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub accel: AccelConfig,
    pub mem: MemConfig,
    pub energy: EnergyModel,
    pub abft: bool,
    pub theta: i64,
    pub interval: usize,
    pub policy: RecoveryPolicy,
    pub layout: CheckpointLayout,
    pub checkpoint_embedding: bool,
    pub monitor: Option<MonitorConfig>,
    /// Keep per-event traces and every post-recovery GEMM output.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            accel: AccelConfig::default(),
            mem: MemConfig::default(),
            energy: EnergyModel::default(),
            abft: true,
            theta: crate::abft::DEFAULT_THETA,
            interval: 10,
            policy: RecoveryPolicy::Rollback,
            layout: CheckpointLayout::TilePacked,
            checkpoint_embedding: true,
            monitor: None,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTraces {
    pub faults: Vec<FaultRecord>,
    pub detections: Vec<DetectionEvent>,
    pub recoveries: Vec<RecoveryEvent>,
    /// Post-recovery output of every GEMM, in execution order.
    pub outputs: Vec<(usize, String, AccTensor)>,
    /// Monitor rung after each step, when the monitor is enabled.
    pub rungs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: SimReport,
    pub records: Vec<GemmRecord>,
    pub traces: RunTraces,
}

struct Runner<'a> {
    model: &'a ToyModel,
    plan: &'a FaultPlan,
    schedule: &'a DvfsSchedule,
    cfg: &'a SimConfig,
    store: CheckpointStore,
    monitor: Option<MonitorState>,
    samples: Vec<DetectionSample>,
    records: Vec<GemmRecord>,
    traces: RunTraces,
    step_events: StepEvents,
}

impl Runner<'_> {
    fn layout(&self, rows: usize, cols: usize) -> Result<LayoutDescriptor> {
        let kind = match self.cfg.layout {
            CheckpointLayout::RowMajor => LayoutKind::RowMajor,
            CheckpointLayout::TilePacked => LayoutKind::TilePacked(self.cfg.accel.tiles()),
        };
        LayoutDescriptor::new(kind, 4, rows, cols, &self.cfg.mem)
    }

    fn gemm(&mut self, step: usize, idx: usize, a: &QuantTensor, w: &QuantTensor) -> Result<Vec<f64>> {
        let block = &self.model.blocks[idx];
        let nominal = self.schedule.is_sensitive(step, &block.name);
        let point = match (&self.monitor, nominal) {
            (Some(m), false) => m.point().clone(),
            _ => self.schedule.lookup_op_point(step, &block.name).clone(),
        };
        let tiles = self.cfg.accel.tiles();
        let exact = gemm_exact(a, w)?;
        let (rows, cols) = (exact.rows(), exact.cols());
        let faults = faults_for_op(self.plan, step, &block.name, rows, cols, tiles, point.ber)?;
        let observed = inject(&exact, &faults)?;

        let mut record = GemmRecord {
            step,
            block: block.name.clone(),
            nominal,
            frequency_ghz: point.frequency_ghz,
            energy_per_mac_pj: point.energy_per_mac_pj,
            macs: crate::tensor::gemm_macs(rows, a.cols(), cols),
            abft: self.cfg.abft,
            faults: faults.len() as u64,
            ..Default::default()
        };

        let mut mask = CorrectionMask::default();
        let mut tile_masks = Vec::new();
        if self.cfg.abft {
            for tile in tile_partition(rows, cols, tiles) {
                let checks = tile_checksums(a, w, &tile)?;
                let det = detect_tile(&observed, &tile, &checks, self.cfg.theta)?;
                if !nominal {
                    self.samples.push(DetectionSample::from_result(&det, tile.rows.len(), tile.cols.len()));
                }
                if det.is_clean() {
                    continue;
                }
                record.flagged_rows += det.rows.len() as u64;
                record.flagged_cols += det.cols.len() as u64;
                record.flagged_tiles += 1;
                if self.cfg.trace {
                    self.traces.detections.push(DetectionEvent {
                        step,
                        block: block.name.clone(),
                        tile_row: tile.tile_row,
                        tile_col: tile.tile_col,
                        flagged_rows: det.flagged_rows().collect(),
                        flagged_cols: det.flagged_cols().collect(),
                    });
                }
                let tile_mask = build_mask(&det);
                mask.positions.extend(tile_mask.positions.iter().copied());
                tile_masks.push(tile_mask);
            }
        }

        let key = CheckpointKey::new(block.name.clone(), OUTPUT_ROLE);
        let ctx = RecoveryContext {
            checkpoint: self.store.get(&key).map(|c| &c.tensor),
            clean: &exact,
            tiles,
            inner_dim: a.cols(),
        };
        let outcome = recover(&observed, &mask, self.cfg.policy, &ctx)?;
        record.masked = mask.len() as u64;
        record.extra_macs = outcome.cost.extra_macs;
        record.dropped = outcome.dropped.len() as u64;

        if self.cfg.policy == RecoveryPolicy::Rollback && !mask.is_empty() {
            let layout = self.layout(rows, cols)?;
            for tile_mask in &tile_masks {
                let (r, b) = recovery_traffic(tile_mask, &layout)?;
                record.recovery_rows += r;
                record.recovery_bytes += b;
            }
        }
        if self.cfg.trace && !mask.is_empty() {
            self.traces.recoveries.push(RecoveryEvent {
                step,
                block: block.name.clone(),
                policy: self.cfg.policy,
                masked_count: mask.len(),
                rows_activated: record.recovery_rows,
                bytes_read: record.recovery_bytes,
            });
        }

        let mut consumed = outcome.tensor;
        for &(r, c) in &outcome.dropped {
            consumed.set(r, c, 0);
        }
        let checkpointed = block.role == BlockRole::Body || self.cfg.checkpoint_embedding;
        if self.cfg.policy == RecoveryPolicy::Rollback && checkpointed {
            record.checkpoint_bytes = self.store.maybe_checkpoint(step, &key, &consumed);
        }

        self.step_events.faults += record.faults;
        self.step_events.flagged_rows += record.flagged_rows;
        self.step_events.masked += record.masked;
        self.step_events.dropped += record.dropped;
        let out = dequantize_output(&consumed, a, w, self.model.output_bound(idx));
        if self.cfg.trace {
            self.traces.faults.extend(faults);
            self.traces.outputs.push((step, block.name.clone(), consumed));
        }
        self.records.push(record);
        Ok(out)
    }

    fn end_of_step(&mut self) -> Result<()> {
        if let Some(state) = self.monitor.take() {
            let window = state.window;
            let next = if self.samples.len() >= window {
                let estimate = estimate_ber(&self.samples, window, self.cfg.theta)?;
                self.samples.clear();
                monitor_step(state, estimate)
            } else {
                state
            };
            self.traces.rungs.push(next.current);
            self.monitor = Some(next);
        }
        Ok(())
    }
}

/// Full pipeline: per step and block, pick the operating point, run the
/// GEMM, inject faults at that point's BER, check with ABFT, recover, and
/// checkpoint on the interval. The BER monitor, if enabled, only changes
/// the aggressive point between steps.
pub fn run_denoise(
    model: &ToyModel,
    plan: &FaultPlan,
    schedule: &DvfsSchedule,
    cfg: &SimConfig,
) -> Result<RunOutput> {
    plan.validate()?;
    if schedule.steps != model.steps() {
        return Err(Error::Shape(format!(
            "schedule covers {} steps, model runs {}",
            schedule.steps,
            model.steps()
        )));
    }
    if cfg.theta <= 0 {
        return Err(Error::InvalidParameter("ABFT threshold must be positive".into()));
    }
    let monitor = match &cfg.monitor {
        Some(m) => Some(MonitorState::new(m.target_ber, m.band, m.ladder.clone(), m.start, m.window)?),
        None => None,
    };
    let mut runner = Runner {
        model,
        plan,
        schedule,
        cfg,
        store: CheckpointStore::new(cfg.interval)?,
        monitor,
        samples: Vec::new(),
        records: Vec::new(),
        traces: RunTraces::default(),
        step_events: StepEvents::default(),
    };
    let mut states = Vec::with_capacity(model.steps() + 1);
    let mut events = Vec::with_capacity(model.steps());
    states.push(model.init.clone());
    for step in 0..model.steps() {
        runner.step_events = StepEvents::default();
        let next = advance(model, step, &states[step], |idx, a, w| runner.gemm(step, idx, a, w))?;
        runner.end_of_step()?;
        events.push(runner.step_events);
        states.push(next);
    }
    let report = account(&runner.records, &cfg.accel, &cfg.mem, &cfg.energy);
    Ok(RunOutput {
        trajectory: Trajectory { states, events },
        report,
        records: runner.records,
        traces: runner.traces,
    })
}

/// Replays the run from `start` (using the clean prefix) with single
/// targeted flips and no fault handling. Returns states `start+1..=T`.
fn replay_with_flips(
    model: &ToyModel,
    clean: &Trajectory,
    start: usize,
    flips: &[FaultRecord],
) -> Result<Vec<Vec<f64>>> {
    let mut state = clean.states[start].clone();
    let mut out = Vec::with_capacity(model.steps() - start);
    for step in start..model.steps() {
        state = advance(model, step, &state, |idx, a, w| {
            let name = &model.blocks[idx].name;
            let exact = gemm_exact(a, w)?;
            let here: Vec<FaultRecord> = flips
                .iter()
                .filter(|f| f.step == step && &f.block == name)
                .cloned()
                .collect();
            let acc = if here.is_empty() { exact } else { inject(&exact, &here)? };
            Ok(dequantize_output(&acc, a, w, model.output_bound(idx)))
        })?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Final relative deviation caused by one flip.
pub fn single_flip_deviation(model: &ToyModel, clean: &Trajectory, flip: &FaultRecord) -> Result<f64> {
    model.block_index(&flip.block)?;
    if flip.step >= model.steps() || flip.row >= model.dim() || flip.col >= model.dim() || flip.bit as u32 >= WORD_BITS {
        return Err(Error::InvalidParameter(format!("flip {flip:?} outside the workload")));
    }
    let states = replay_with_flips(model, clean, flip.step, std::slice::from_ref(flip))?;
    Ok(relative_l2(states.last().expect("at least one replayed step"), clean.final_state()))
}

/// One row of a characterization table.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterizationRow {
    pub mode: &'static str,
    pub key: String,
    pub trials: usize,
    pub mean_deviation: f64,
    pub stddev: f64,
}

fn summarize(mode: &'static str, key: String, samples: &[f64]) -> CharacterizationRow {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    CharacterizationRow {
        mode,
        key,
        trials: samples.len(),
        mean_deviation: mean,
        stddev: var.sqrt(),
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::InvalidParameter("trials must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Runs `trials` flips in parallel; the returned order is the trial order.
fn run_trials<F>(model: &ToyModel, clean: &Trajectory, trials: usize, make_flip: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> FaultRecord + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| single_flip_deviation(model, clean, &make_flip(t)))
        .collect()
}

/// Mean final deviation per flipped bit. Each trial flips one bit at a
/// random (step, block, row, col); the positions are shared across bits.
pub fn characterize_bits(model: &ToyModel, bits: &[u8], trials: usize, seed: u64) -> Result<Vec<CharacterizationRow>> {
    check_trials(trials)?;
    if let Some(&b) = bits.iter().find(|&&b| b as u32 >= WORD_BITS) {
        return Err(Error::InvalidBit(b));
    }
    let clean = clean_run(model)?;
    let (steps, nblocks, dim) = (model.steps(), model.blocks.len(), model.dim());
    bits.iter()
        .map(|&bit| {
            let devs = run_trials(model, &clean, trials, |t| {
                let mut rng = trial_rng(seed, t);
                FaultRecord {
                    step: rng.random_range(0..steps),
                    block: model.blocks[rng.random_range(0..nblocks)].name.clone(),
                    row: rng.random_range(0..dim),
                    col: rng.random_range(0..dim),
                    bit,
                }
            })?;
            Ok(summarize("bit", bit.to_string(), &devs))
        })
        .collect()
}

/// Mean final deviation per injection step at a fixed bit; block and
/// position are random per trial and shared across steps.
pub fn characterize_steps(
    model: &ToyModel,
    steps: &[usize],
    trials: usize,
    bit: u8,
    seed: u64,
) -> Result<Vec<CharacterizationRow>> {
    check_trials(trials)?;
    if let Some(&s) = steps.iter().find(|&&s| s >= model.steps()) {
        return Err(Error::InvalidParameter(format!("step {s} outside 0..{}", model.steps())));
    }
    let clean = clean_run(model)?;
    let (nblocks, dim) = (model.blocks.len(), model.dim());
    steps
        .iter()
        .map(|&step| {
            let devs = run_trials(model, &clean, trials, |t| {
                let mut rng = trial_rng(seed, t);
                FaultRecord {
                    step,
                    block: model.blocks[rng.random_range(0..nblocks)].name.clone(),
                    row: rng.random_range(0..dim),
                    col: rng.random_range(0..dim),
                    bit,
                }
            })?;
            Ok(summarize("step", step.to_string(), &devs))
        })
        .collect()
}

/// Mean final deviation per block at a fixed step and bit; positions are
/// random per trial and shared across blocks.
pub fn characterize_blocks(
    model: &ToyModel,
    blocks: &[String],
    trials: usize,
    step: usize,
    bit: u8,
    seed: u64,
) -> Result<Vec<CharacterizationRow>> {
    check_trials(trials)?;
    for b in blocks {
        model.block_index(b)?;
    }
    if step >= model.steps() {
        return Err(Error::InvalidParameter(format!("step {step} outside 0..{}", model.steps())));
    }
    let clean = clean_run(model)?;
    let dim = model.dim();
    blocks
        .iter()
        .map(|block| {
            let devs = run_trials(model, &clean, trials, |t| {
                let mut rng = trial_rng(seed, t);
                FaultRecord {
                    step,
                    block: block.clone(),
                    row: rng.random_range(0..dim),
                    col: rng.random_range(0..dim),
                    bit,
                }
            })?;
            Ok(summarize("block", block.clone(), &devs))
        })
        .collect()
}

/// Per-step deviation of one tracked state element after a single flip.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCorrectionTrace {
    pub row: usize,
    pub col: usize,
    /// `|faulty - clean|` of the tracked element after each step.
    pub deviation: Vec<f64>,
    /// Clean value of the tracked element after each step.
    pub clean: Vec<f64>,
}

/// Flips `bit` in the last body block's output at a seeded position at
/// `inject_step` and tracks that state element through the rest of the run.
pub fn self_correction_trace(model: &ToyModel, inject_step: usize, bit: u8, seed: u64) -> Result<SelfCorrectionTrace> {
    if inject_step >= model.steps() {
        return Err(Error::InvalidParameter(format!(
            "injection step {inject_step} outside 0..{}",
            model.steps()
        )));
    }
    if bit as u32 >= WORD_BITS {
        return Err(Error::InvalidBit(bit));
    }
    let clean = clean_run(model)?;
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (row, col) = (rng.random_range(0..dim), rng.random_range(0..dim));
    let flip = FaultRecord {
        step: inject_step,
        block: model.blocks.last().expect("model has blocks").name.clone(),
        row,
        col,
        bit,
    };
    let replayed = replay_with_flips(model, &clean, inject_step, std::slice::from_ref(&flip))?;
    let idx = row * dim + col;
    let mut deviation = vec![0.0; inject_step];
    deviation.extend(
        replayed
            .iter()
            .zip(&clean.states[inject_step + 1..])
            .map(|(f, c)| (f[idx] - c[idx]).abs()),
    );
    let clean_values = clean.states[1..].iter().map(|s| s[idx]).collect();
    Ok(SelfCorrectionTrace {
        row,
        col,
        deviation,
        clean: clean_values,
    })
}

impl SelfCorrectionTrace {
    pub fn rows(&self) -> Vec<CharacterizationRow> {
        self.deviation
            .iter()
            .enumerate()
            .map(|(step, &d)| CharacterizationRow {
                mode: "selfcorrect",
                key: step.to_string(),
                trials: 1,
                mean_deviation: d,
                stddev: 0.0,
            })
            .collect()
    }
}

/// Writes the `mode,key,trials,mean_deviation,stddev` table.
pub fn write_characterization<W: Write>(writer: W, rows: &[CharacterizationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "key", "trials", "mean_deviation", "stddev"])?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.key.clone(),
            r.trials.to_string(),
            r.mean_deviation.to_string(),
            r.stddev.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("characterization", e))?;
    Ok(())
}
