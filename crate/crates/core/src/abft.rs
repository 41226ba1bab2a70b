//! Checksum-based large-error detection for GEMM tiles.
//!
//! Reference row and column sums are computed from the (error-free)
//! operands in 64-bit arithmetic; only the product path is corruptible.
//! A row or column is flagged when its observed sum differs from the
//! reference by at least `theta`. The correction mask is the Cartesian
//! product of flagged rows and columns.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::error::{Error, Result};
use crate::fault::WORD_BITS;
use crate::tensor::{AccTensor, QuantTensor, TileRange};

/// Default detection threshold: a flip of bit 10.
pub const DEFAULT_THETA: i64 = 1 << 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChecksumSet {
    pub row_ref: Vec<i64>,
    pub col_ref: Vec<i64>,
}

/// Expected row and column sums of `a * b`, via `a * (b 1)` and `(1^T a) b`.
pub fn compute_checksums(a: &QuantTensor, b: &QuantTensor) -> Result<ChecksumSet> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot checksum {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let b_row_sums: Vec<i64> = (0..k)
        .map(|kk| (0..n).map(|j| b.get(kk, j) as i64).sum())
        .collect();
    let a_col_sums: Vec<i64> = (0..k)
        .map(|kk| (0..m).map(|i| a.get(i, kk) as i64).sum())
        .collect();
    let row_ref = (0..m)
        .map(|i| (0..k).map(|kk| a.get(i, kk) as i64 * b_row_sums[kk]).sum())
        .collect();
    let col_ref = (0..n)
        .map(|j| (0..k).map(|kk| a_col_sums[kk] * b.get(kk, j) as i64).sum())
        .collect();
    Ok(ChecksumSet { row_ref, col_ref })
}

/// Checksums for one output tile of `a * b`.
pub fn tile_checksums(a: &QuantTensor, b: &QuantTensor, tile: &TileRange) -> Result<ChecksumSet> {
    compute_checksums(&a.row_slice(tile.rows.clone()), &b.col_slice(tile.cols.clone()))
}

/// Flagged rows and columns with their signed discrepancies
/// (observed minus reference).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectionResult {
    pub rows: BTreeMap<usize, i64>,
    pub cols: BTreeMap<usize, i64>,
}

impl DetectionResult {
    pub fn flagged_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn flagged_cols(&self) -> impl Iterator<Item = usize> + '_ {
        self.cols.keys().copied()
    }

    pub fn is_clean(&self) -> bool {
        self.rows.is_empty() && self.cols.is_empty()
    }
}

/// Compares the full `observed` tensor against `checks`.
pub fn detect(observed: &AccTensor, checks: &ChecksumSet, theta: i64) -> Result<DetectionResult> {
    let whole = TileRange {
        tile_row: 0,
        tile_col: 0,
        rows: 0..observed.rows(),
        cols: 0..observed.cols(),
    };
    detect_tile(observed, &whole, checks, theta)
}

/// Compares the `tile` region of `observed` against that tile's checksums.
/// Reported indices are in the coordinates of `observed`.
pub fn detect_tile(
    observed: &AccTensor,
    tile: &TileRange,
    checks: &ChecksumSet,
    theta: i64,
) -> Result<DetectionResult> {
    if checks.row_ref.len() != tile.rows.len() || checks.col_ref.len() != tile.cols.len() {
        return Err(Error::Shape(format!(
            "checksums cover {}x{} but tile is {}x{}",
            checks.row_ref.len(),
            checks.col_ref.len(),
            tile.rows.len(),
            tile.cols.len()
        )));
    }
    if tile.rows.end > observed.rows() || tile.cols.end > observed.cols() {
        return Err(Error::Shape("tile exceeds observed tensor".into()));
    }
    let mut col_sums = vec![0i64; tile.cols.len()];
    let mut result = DetectionResult::default();
    for (li, i) in tile.rows.clone().enumerate() {
        let mut row_sum = 0i64;
        for (lj, j) in tile.cols.clone().enumerate() {
            let v = observed.get(i, j) as i64;
            row_sum += v;
            col_sums[lj] += v;
        }
        let diff = row_sum - checks.row_ref[li];
        if diff.abs() >= theta {
            result.rows.insert(i, diff);
        }
    }
    for (lj, j) in tile.cols.clone().enumerate() {
        let diff = col_sums[lj] - checks.col_ref[lj];
        if diff.abs() >= theta {
            result.cols.insert(j, diff);
        }
    }
    Ok(result)
}

/// Positions to overwrite during recovery.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectionMask {
    pub positions: BTreeSet<(usize, usize)>,
}

impl CorrectionMask {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.positions.contains(&(row, col))
    }
}

pub fn build_mask(det: &DetectionResult) -> CorrectionMask {
    let positions = det
        .flagged_rows()
        .flat_map(|r| det.flagged_cols().map(move |c| (r, c)))
        .collect();
    CorrectionMask { positions }
}

/// Number of bit positions whose single flip moves a value by at least
/// `theta`, i.e. bits `b` with `2^b >= theta`.
pub fn detectable_bits(theta: i64) -> u32 {
    (0..WORD_BITS).filter(|&b| (1i64 << b) >= theta).count() as u32
}

/// What the BER monitor retains from one checked GEMM tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionSample {
    pub rows: usize,
    pub cols: usize,
    pub flagged_rows: usize,
}

impl DetectionSample {
    pub fn from_result(det: &DetectionResult, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            flagged_rows: det.rows.len(),
        }
    }
}

fn window_slice(history: &[DetectionSample], window: usize) -> Result<&[DetectionSample]> {
    if window == 0 {
        return Err(Error::InvalidParameter("estimation window must be >= 1".into()));
    }
    Ok(&history[history.len().saturating_sub(window)..])
}

/// Flagged rows over the window divided by the number of monitored bits
/// that a single flip could push over `theta`:
/// `events / (elements * 32 * detectable_fraction)`.
pub fn raw_ber_estimate(history: &[DetectionSample], window: usize, theta: i64) -> Result<f64> {
    let recent = window_slice(history, window)?;
    let events: usize = recent.iter().map(|s| s.flagged_rows).sum();
    let bits: f64 = recent
        .iter()
        .map(|s| (s.rows * s.cols) as f64 * detectable_bits(theta) as f64)
        .sum();
    Ok(if events == 0 || bits == 0.0 { 0.0 } else { events as f64 / bits })
}

/// Per-bit BER estimate from row flags over the most recent `window`
/// samples.
///
/// A row is flagged when at least one of its `cols * d` detectable bits
/// flipped (`d` = [`detectable_bits`]), so the pooled flagged-row fraction
/// `f` satisfies `f = 1 - (1 - p)^(cols * d)`. Inverting that gives the
/// estimate. For sparse flags this equals [`raw_ber_estimate`] to first
/// order; unlike the raw count it does not saturate once most rows carry
/// more than one flip. A fully flagged window is clamped to
/// `f = 1 - 1 / (2 * rows)`.
pub fn estimate_ber(history: &[DetectionSample], window: usize, theta: i64) -> Result<f64> {
    let recent = window_slice(history, window)?;
    let rows: usize = recent.iter().map(|s| s.rows).sum();
    let flagged: usize = recent.iter().map(|s| s.flagged_rows.min(s.rows)).sum();
    let d = detectable_bits(theta) as f64;
    if flagged == 0 || rows == 0 || d == 0.0 {
        return Ok(0.0);
    }
    let bits_per_row = recent.iter().map(|s| (s.rows * s.cols) as f64 * d).sum::<f64>() / rows as f64;
    let frac = (flagged as f64 / rows as f64).min(1.0 - 0.5 / rows as f64);
    Ok(-((-frac).ln_1p() / bits_per_row).exp_m1())
}

/// One row of the detection trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionEvent {
    pub step: usize,
    pub block: String,
    pub tile_row: usize,
    pub tile_col: usize,
    pub flagged_rows: Vec<usize>,
    pub flagged_cols: Vec<usize>,
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes the `step,block,tile_row,tile_col,flagged_rows,flagged_cols` trace.
pub fn write_detection_trace<W: Write>(writer: W, events: &[DetectionEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "block", "tile_row", "tile_col", "flagged_rows", "flagged_cols"])?;
    for e in events {
        w.write_record([
            e.step.to_string(),
            e.block.clone(),
            e.tile_row.to_string(),
            e.tile_col.to_string(),
            join_indices(&e.flagged_rows),
            join_indices(&e.flagged_cols),
        ])?;
    }
    w.flush().map_err(|e| Error::io("detection trace", e))?;
    Ok(())
}
