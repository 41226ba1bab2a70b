//! Operating points, the resilience-aware (step, block) schedule and the
//! BER-monitor feedback controller.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abft::{compute_checksums, detect, estimate_ber, DetectionSample};
use crate::error::{Error, Result};
use crate::fault::{check_probability, inject, sample_faults};
use crate::tensor::{gemm_exact, QuantTensor};
use crate::workload::BlockRole;

pub const NOMINAL_VOLTAGE: f64 = 0.9;
pub const NOMINAL_FREQUENCY_GHZ: f64 = 2.0;
/// Per-MAC energy of an INT8 MAC with INT32 accumulation at nominal voltage.
pub const NOMINAL_ENERGY_PER_MAC_PJ: f64 = 0.25;
pub const TARGET_BER: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub name: String,
    pub voltage: f64,
    pub frequency_ghz: f64,
    pub ber: f64,
    pub energy_per_mac_pj: f64,
}

/// Dynamic energy scaling: `e_nom * (v / v_nom)^2`.
pub fn scaled_energy_per_mac(voltage: f64, nominal_energy_pj: f64, nominal_voltage: f64) -> f64 {
    nominal_energy_pj * (voltage / nominal_voltage).powi(2)
}

impl OperatingPoint {
    pub fn new(name: impl Into<String>, voltage: f64, frequency_ghz: f64, ber: f64, energy_per_mac_pj: f64) -> Result<Self> {
        let point = Self {
            name: name.into(),
            voltage,
            frequency_ghz,
            ber,
            energy_per_mac_pj,
        };
        point.validate()?;
        Ok(point)
    }

    /// Point whose per-MAC energy follows the default V^2 model.
    pub fn with_scaled_energy(name: impl Into<String>, voltage: f64, frequency_ghz: f64, ber: f64) -> Result<Self> {
        Self::new(
            name,
            voltage,
            frequency_ghz,
            ber,
            scaled_energy_per_mac(voltage, NOMINAL_ENERGY_PER_MAC_PJ, NOMINAL_VOLTAGE),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voltage > 0.0 && self.frequency_ghz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "operating point `{}` needs positive voltage and frequency",
                self.name
            )));
        }
        if !(self.energy_per_mac_pj >= 0.0 && self.energy_per_mac_pj.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "operating point `{}` has invalid energy per MAC",
                self.name
            )));
        }
        check_probability(self.ber)
    }

    pub fn nominal() -> Self {
        Self::with_scaled_energy("nominal", NOMINAL_VOLTAGE, NOMINAL_FREQUENCY_GHZ, 0.0).unwrap()
    }

    pub fn undervolted() -> Self {
        Self::with_scaled_energy("undervolt", 0.68, 2.0, TARGET_BER).unwrap()
    }

    pub fn overclocked() -> Self {
        Self::with_scaled_energy("overclock", 0.88, 3.5, TARGET_BER).unwrap()
    }
}

/// The three built-in points: nominal, undervolted and overclocked.
pub fn default_table() -> Vec<OperatingPoint> {
    vec![
        OperatingPoint::nominal(),
        OperatingPoint::undervolted(),
        OperatingPoint::overclocked(),
    ]
}

/// Which (step, block) pairs run at the nominal point.
#[derive(Debug, Clone, PartialEq)]
pub struct DvfsSchedule {
    pub steps: usize,
    pub sensitive_steps: BTreeSet<usize>,
    pub sensitive_blocks: BTreeSet<String>,
    pub nominal: OperatingPoint,
    pub aggressive: OperatingPoint,
}

/// Schedule knobs. `None` overrides fall back to the defaults: the first
/// `early_steps` steps and every embedding block are sensitive.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub early_steps: usize,
    pub step_override: Option<Vec<Range<usize>>>,
    pub block_override: Option<Vec<String>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            early_steps: 2,
            step_override: None,
            block_override: None,
        }
    }
}

pub fn build_schedule(
    steps: usize,
    blocks: &[(String, BlockRole)],
    config: &ScheduleConfig,
    nominal: OperatingPoint,
    aggressive: OperatingPoint,
) -> Result<DvfsSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParameter("schedule needs at least one step".into()));
    }
    let sensitive_steps = match &config.step_override {
        Some(ranges) => ranges.iter().flat_map(|r| r.clone()).filter(|&s| s < steps).collect(),
        None => (0..config.early_steps.min(steps)).collect(),
    };
    let sensitive_blocks = match &config.block_override {
        Some(names) => {
            for name in names {
                if !blocks.iter().any(|(b, _)| b == name) {
                    return Err(Error::UnknownBlock(name.clone()));
                }
            }
            names.iter().cloned().collect()
        }
        None => blocks
            .iter()
            .filter(|(_, role)| *role == BlockRole::Embedding)
            .map(|(name, _)| name.clone())
            .collect(),
    };
    Ok(DvfsSchedule {
        steps,
        sensitive_steps,
        sensitive_blocks,
        nominal,
        aggressive,
    })
}

impl DvfsSchedule {
    /// Every pair runs at `point`.
    pub fn uniform(steps: usize, point: OperatingPoint) -> Self {
        Self {
            steps,
            sensitive_steps: (0..steps).collect(),
            sensitive_blocks: BTreeSet::new(),
            nominal: point.clone(),
            aggressive: point,
        }
    }

    pub fn is_sensitive(&self, step: usize, block: &str) -> bool {
        self.sensitive_steps.contains(&step) || self.sensitive_blocks.contains(block)
    }

    pub fn lookup_op_point(&self, step: usize, block: &str) -> &OperatingPoint {
        if self.is_sensitive(step, block) {
            &self.nominal
        } else {
            &self.aggressive
        }
    }
}

/// BER monitor: walks a ladder of operating points, safest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    pub target_ber: f64,
    pub band: f64,
    pub ladder: Vec<OperatingPoint>,
    pub current: usize,
    /// GEMM tiles per estimate.
    pub window: usize,
}

impl MonitorState {
    pub fn new(target_ber: f64, band: f64, ladder: Vec<OperatingPoint>, start: usize, window: usize) -> Result<Self> {
        if ladder.is_empty() {
            return Err(Error::InvalidParameter("monitor ladder is empty".into()));
        }
        if !(band > 0.0) || window == 0 {
            return Err(Error::InvalidParameter("monitor band must be > 0 and window >= 1".into()));
        }
        check_probability(target_ber)?;
        Ok(Self {
            target_ber,
            band,
            current: start.min(ladder.len() - 1),
            ladder,
            window,
        })
    }

    pub fn point(&self) -> &OperatingPoint {
        &self.ladder[self.current]
    }
}

/// One controller update from an estimate covering a full window:
/// too many errors moves one rung safer, too few moves one rung more
/// aggressive, in-band holds.
pub fn monitor_step(mut state: MonitorState, observed_estimate: f64) -> MonitorState {
    if observed_estimate > state.target_ber * state.band {
        state.current = state.current.saturating_sub(1);
    } else if observed_estimate < state.target_ber / state.band && state.current + 1 < state.ladder.len() {
        state.current += 1;
    }
    state
}

/// Drives the monitor against synthetic 32x32 GEMMs whose true BER is the
/// table BER of the rung currently selected. Returns the rung index after
/// each window.
pub fn closed_loop(mut state: MonitorState, windows: usize, theta: i64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let operand = |rng: &mut ChaCha8Rng| {
        QuantTensor::new(32, 32, (0..1024).map(|_| rng.random()).collect(), 1.0)
    };
    let a = operand(&mut rng)?;
    let b = operand(&mut rng)?;
    let clean = gemm_exact(&a, &b)?;
    let checks = compute_checksums(&a, &b)?;
    let mut trace = Vec::with_capacity(windows);
    for _ in 0..windows {
        let ber = state.point().ber;
        let mut samples = Vec::with_capacity(state.window);
        for _ in 0..state.window {
            let faults = sample_faults(32, 32, ber, 0, "monitor", &mut rng)?;
            let det = detect(&inject(&clean, &faults)?, &checks, theta)?;
            samples.push(DetectionSample::from_result(&det, 32, 32));
        }
        let estimate = estimate_ber(&samples, state.window, theta)?;
        state = monitor_step(state, estimate);
        trace.push(state.current);
    }
    Ok(trace)
}
