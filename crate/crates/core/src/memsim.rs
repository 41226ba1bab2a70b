//! DRAM layout and row-activation model plus the analytic energy/latency
//! accounting that folds a per-GEMM trace into a [`SimReport`].
//!
//! Throughput is `macs / (arrays * edge^2 * f)`; there is no cycle-level
//! pipeline model. Checkpoint writes are charged energy but never latency.
//! Recovery reads are charged latency only for the part that exceeds the
//! compute time of the GEMM they are recovering.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{TileRange, TileSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    RowMajor,
    TilePacked(TileSpec),
}

/// Placement of one matrix in DRAM, starting at a row-aligned base address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutDescriptor {
    pub kind: LayoutKind,
    pub element_bytes: usize,
    pub rows: usize,
    pub cols: usize,
    pub dram_row_bytes: usize,
    pub cache_line_bytes: usize,
}

impl LayoutDescriptor {
    pub fn new(
        kind: LayoutKind,
        element_bytes: usize,
        rows: usize,
        cols: usize,
        mem: &MemConfig,
    ) -> Result<Self> {
        if element_bytes != 1 && element_bytes != 4 {
            return Err(Error::InvalidParameter(format!(
                "element size must be 1 or 4 bytes, got {element_bytes}"
            )));
        }
        mem.validate()?;
        Ok(Self {
            kind,
            element_bytes,
            rows,
            cols,
            dram_row_bytes: mem.dram_row_bytes,
            cache_line_bytes: mem.cache_line_bytes,
        })
    }

    pub fn byte_len(&self) -> usize {
        self.rows * self.cols * self.element_bytes
    }

    /// Byte offset of element `(row, col)`.
    pub fn address_of(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::OutOfBounds {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        let elem = match self.kind {
            LayoutKind::RowMajor => row * self.cols + col,
            LayoutKind::TilePacked(t) => {
                let (tr, lr) = (row / t.tile_rows, row % t.tile_rows);
                let (tc, lc) = (col / t.tile_cols, col % t.tile_cols);
                // height of this tile strip and width of this tile, both
                // truncated at the matrix edge
                let strip = t.tile_rows.min(self.rows - tr * t.tile_rows);
                let width = t.tile_cols.min(self.cols - tc * t.tile_cols);
                let strip_base = tr * t.tile_rows * self.cols;
                let tile_base = strip_base + strip * tc * t.tile_cols;
                tile_base + lr * width + lc
            }
        };
        Ok(elem * self.element_bytes)
    }

    fn distinct_units<I>(&self, access: I, unit: usize) -> Result<usize>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut seen = BTreeSet::new();
        for (r, c) in access {
            let addr = self.address_of(r, c)?;
            // an element may straddle a unit boundary only if element_bytes
            // does not divide the unit, which power-of-two units exclude
            seen.insert(addr / unit);
        }
        Ok(seen.len())
    }

    /// Distinct DRAM rows touched by the accessed elements.
    pub fn count_row_activations<I>(&self, access: I) -> Result<usize>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        self.distinct_units(access, self.dram_row_bytes)
    }

    /// Distinct cache lines touched by the accessed elements.
    pub fn count_cache_lines<I>(&self, access: I) -> Result<usize>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        self.distinct_units(access, self.cache_line_bytes)
    }
}

/// All elements of one tile, row by row.
pub fn tile_elements(tile: &TileRange) -> impl Iterator<Item = (usize, usize)> + '_ {
    tile.rows
        .clone()
        .flat_map(move |r| tile.cols.clone().map(move |c| (r, c)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemConfig {
    pub dram_row_bytes: usize,
    pub cache_line_bytes: usize,
    pub activation_energy_pj: f64,
    pub byte_energy_pj: f64,
    pub bandwidth_bytes_per_s: f64,
    pub activation_latency_ns: f64,
}

impl Default for MemConfig {
    /// HBM2-class stack: 2 KiB rows, 64 B lines, 256 GB/s.
    fn default() -> Self {
        Self {
            dram_row_bytes: 2048,
            cache_line_bytes: 64,
            activation_energy_pj: 1000.0,
            byte_energy_pj: 31.2,
            bandwidth_bytes_per_s: 256e9,
            activation_latency_ns: 30.0,
        }
    }
}

impl MemConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dram_row_bytes.is_power_of_two() || !self.cache_line_bytes.is_power_of_two() {
            return Err(Error::InvalidParameter(
                "DRAM row and cache line sizes must be powers of two".into(),
            ));
        }
        let positive = [
            self.activation_energy_pj,
            self.byte_energy_pj,
            self.bandwidth_bytes_per_s,
            self.activation_latency_ns,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("memory energies, bandwidth and latency must be positive".into()));
        }
        Ok(())
    }

    /// Row activations needed to stream `bytes` contiguous bytes from a
    /// row-aligned base.
    pub fn contiguous_rows(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.dram_row_bytes as u64)
    }

    pub fn transfer_time_s(&self, rows: u64, bytes: u64) -> f64 {
        rows as f64 * self.activation_latency_ns * 1e-9 + bytes as f64 / self.bandwidth_bytes_per_s
    }

    pub fn transfer_energy_j(&self, rows: u64, bytes: u64) -> f64 {
        (rows as f64 * self.activation_energy_pj + bytes as f64 * self.byte_energy_pj) * 1e-12
    }
}

/// Compute fabric: `arrays` systolic arrays of `array_size x array_size` MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccelConfig {
    pub arrays: usize,
    pub array_size: usize,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            arrays: 64,
            array_size: 32,
        }
    }
}

impl AccelConfig {
    pub fn peak_macs_per_cycle(&self) -> f64 {
        (self.arrays * self.array_size * self.array_size) as f64
    }

    pub fn compute_time_s(&self, macs: u64, frequency_ghz: f64) -> f64 {
        macs as f64 / (self.peak_macs_per_cycle() * frequency_ghz * 1e9)
    }

    pub fn tiles(&self) -> TileSpec {
        TileSpec {
            tile_rows: self.array_size,
            tile_cols: self.array_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    /// ABFT wrapper energy as a fraction of the wrapped compute energy.
    pub abft_overhead: f64,
    /// Constant background power charged over the total latency.
    pub static_power_w: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            abft_overhead: 0.063,
            static_power_w: 0.0,
        }
    }
}

/// Everything the accountant needs to know about one executed GEMM.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GemmRecord {
    pub step: usize,
    pub block: String,
    pub nominal: bool,
    pub frequency_ghz: f64,
    pub energy_per_mac_pj: f64,
    pub macs: u64,
    pub extra_macs: u64,
    pub abft: bool,
    pub checkpoint_bytes: u64,
    pub recovery_rows: u64,
    pub recovery_bytes: u64,
    pub faults: u64,
    pub flagged_rows: u64,
    pub flagged_cols: u64,
    pub flagged_tiles: u64,
    pub masked: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub compute: f64,
    pub abft_overhead: f64,
    pub dram_write_checkpoint: f64,
    pub dram_read_recovery: f64,
    pub other: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.abft_overhead + self.dram_write_checkpoint + self.dram_read_recovery + self.other
    }
}

/// Aggregated outcome of one simulated run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimReport {
    pub energy: EnergyBreakdown,
    pub compute_latency_s: f64,
    pub exposed_recovery_latency_s: f64,
    pub hidden_recovery_latency_s: f64,
    pub gemms: u64,
    pub nominal_gemms: u64,
    pub macs: u64,
    pub extra_macs: u64,
    pub checkpoint_rows_activated: u64,
    pub recovery_rows_activated: u64,
    pub checkpoint_bytes: u64,
    pub recovery_bytes: u64,
    pub faults_injected: u64,
    pub flagged_rows: u64,
    pub flagged_cols: u64,
    pub flagged_tiles: u64,
    pub masked_elements: u64,
    pub dropped_elements: u64,
}

impl SimReport {
    pub fn total_energy_j(&self) -> f64 {
        self.energy.total()
    }

    pub fn total_latency_s(&self) -> f64 {
        self.compute_latency_s + self.exposed_recovery_latency_s
    }

    pub fn rows_activated(&self) -> u64 {
        self.checkpoint_rows_activated + self.recovery_rows_activated
    }

    pub fn bytes_moved(&self) -> u64 {
        self.checkpoint_bytes + self.recovery_bytes
    }

    /// Stable `(name, value)` counters, in output order.
    pub fn counters(&self) -> Vec<(&'static str, String)> {
        let e = &self.energy;
        vec![
            ("energy_total_j", self.total_energy_j().to_string()),
            ("energy_compute_j", e.compute.to_string()),
            ("energy_abft_overhead_j", e.abft_overhead.to_string()),
            ("energy_dram_write_checkpoint_j", e.dram_write_checkpoint.to_string()),
            ("energy_dram_read_recovery_j", e.dram_read_recovery.to_string()),
            ("energy_other_j", e.other.to_string()),
            ("latency_total_s", self.total_latency_s().to_string()),
            ("latency_compute_s", self.compute_latency_s.to_string()),
            ("latency_exposed_recovery_s", self.exposed_recovery_latency_s.to_string()),
            ("latency_hidden_recovery_s", self.hidden_recovery_latency_s.to_string()),
            ("gemms", self.gemms.to_string()),
            ("gemms_nominal", self.nominal_gemms.to_string()),
            ("macs", self.macs.to_string()),
            ("extra_macs", self.extra_macs.to_string()),
            ("rows_activated", self.rows_activated().to_string()),
            ("rows_activated_checkpoint", self.checkpoint_rows_activated.to_string()),
            ("rows_activated_recovery", self.recovery_rows_activated.to_string()),
            ("bytes_moved", self.bytes_moved().to_string()),
            ("bytes_checkpoint_write", self.checkpoint_bytes.to_string()),
            ("bytes_recovery_read", self.recovery_bytes.to_string()),
            ("faults_injected", self.faults_injected.to_string()),
            ("flagged_rows", self.flagged_rows.to_string()),
            ("flagged_cols", self.flagged_cols.to_string()),
            ("flagged_tiles", self.flagged_tiles.to_string()),
            ("masked_elements", self.masked_elements.to_string()),
            ("dropped_elements", self.dropped_elements.to_string()),
        ]
    }

    /// Writes the flat `counter,value` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["counter", "value"])?;
        for (name, value) in self.counters() {
            w.write_record([name, value.as_str()])?;
        }
        w.flush().map_err(|e| Error::io("report", e))?;
        Ok(())
    }

    /// Reads a report CSV back into `(counter, value)` pairs, preserving order.
    pub fn read_counters<R: Read>(reader: R) -> Result<Vec<(String, String)>> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["counter", "value"] {
            return Err(Error::InvalidParameter("report CSV must have header `counter,value`".into()));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            out.push((rec[0].to_string(), rec[1].to_string()));
        }
        Ok(out)
    }
}

impl fmt::Display for SimReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = &self.energy;
        let total = self.total_energy_j();
        let pct = |v: f64| if total > 0.0 { 100.0 * v / total } else { 0.0 };
        writeln!(f, "energy   {:>12.4e} J", total)?;
        for (name, v) in [
            ("compute", e.compute),
            ("abft overhead", e.abft_overhead),
            ("checkpoint write", e.dram_write_checkpoint),
            ("recovery read", e.dram_read_recovery),
            ("other", e.other),
        ] {
            writeln!(f, "  {name:<18}{v:>12.4e} J  {:>6.2}%", pct(v))?;
        }
        writeln!(f, "latency  {:>12.4e} s", self.total_latency_s())?;
        writeln!(f, "  {:<18}{:>12.4e} s", "compute", self.compute_latency_s)?;
        writeln!(f, "  {:<18}{:>12.4e} s", "exposed recovery", self.exposed_recovery_latency_s)?;
        writeln!(f, "  {:<18}{:>12.4e} s", "hidden recovery", self.hidden_recovery_latency_s)?;
        writeln!(f, "gemms    {} ({} nominal)", self.gemms, self.nominal_gemms)?;
        writeln!(f, "macs     {} (+{} recovery)", self.macs, self.extra_macs)?;
        writeln!(
            f,
            "dram     {} rows, {} B checkpoint write, {} B recovery read",
            self.rows_activated(),
            self.checkpoint_bytes,
            self.recovery_bytes
        )?;
        write!(
            f,
            "faults   {} injected, {} rows / {} cols flagged in {} tiles, {} masked, {} dropped",
            self.faults_injected,
            self.flagged_rows,
            self.flagged_cols,
            self.flagged_tiles,
            self.masked_elements,
            self.dropped_elements
        )
    }
}

/// Folds a GEMM trace into a report.
pub fn account<'a, I>(trace: I, accel: &AccelConfig, mem: &MemConfig, energy: &EnergyModel) -> SimReport
where
    I: IntoIterator<Item = &'a GemmRecord>,
{
    let mut r = SimReport::default();
    for g in trace {
        let macs = g.macs + g.extra_macs;
        let compute_s = accel.compute_time_s(macs, g.frequency_ghz);
        let compute_j = macs as f64 * g.energy_per_mac_pj * 1e-12;
        r.energy.compute += compute_j;
        if g.abft {
            r.energy.abft_overhead += compute_j * energy.abft_overhead;
        }

        let ckpt_rows = mem.contiguous_rows(g.checkpoint_bytes);
        r.energy.dram_write_checkpoint += mem.transfer_energy_j(ckpt_rows, g.checkpoint_bytes);
        r.energy.dram_read_recovery += mem.transfer_energy_j(g.recovery_rows, g.recovery_bytes);

        let retrieval_s = mem.transfer_time_s(g.recovery_rows, g.recovery_bytes);
        let exposed = (retrieval_s - compute_s).max(0.0);
        r.compute_latency_s += compute_s;
        r.exposed_recovery_latency_s += exposed;
        r.hidden_recovery_latency_s += retrieval_s - exposed;

        r.gemms += 1;
        r.nominal_gemms += g.nominal as u64;
        r.macs += g.macs;
        r.extra_macs += g.extra_macs;
        r.checkpoint_rows_activated += ckpt_rows;
        r.recovery_rows_activated += g.recovery_rows;
        r.checkpoint_bytes += g.checkpoint_bytes;
        r.recovery_bytes += g.recovery_bytes;
        r.faults_injected += g.faults;
        r.flagged_rows += g.flagged_rows;
        r.flagged_cols += g.flagged_cols;
        r.flagged_tiles += g.flagged_tiles;
        r.masked_elements += g.masked;
        r.dropped_elements += g.dropped;
    }
    r.energy.other = energy.static_power_w * r.total_latency_s();
    r
}
