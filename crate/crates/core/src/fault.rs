//! Uniform random bit-flip model and targeted injection into INT32 GEMM
//! outputs.
//!
//! BER is a per-bit probability: an `rows x cols` output exposes
//! `rows * cols * 32` independent bit positions. Random fault streams are
//! drawn from a ChaCha generator keyed by `(seed, step, block, tile)`, so
//! any single GEMM tile's faults can be regenerated without replaying the
//! rest of the run.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
use crate::tensor::{tile_partition, AccTensor, TileSpec};

pub const WORD_BITS: u32 = 32;

/// One injected bit flip.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultRecord {
    pub step: usize,
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub bit: u8,
}

impl FaultRecord {
    pub fn new(step: usize, block: impl Into<String>, row: usize, col: usize, bit: u8) -> Result<Self> {
        if bit as u32 >= WORD_BITS {
            return Err(Error::InvalidBit(bit));
        }
        Ok(Self {
            step,
            block: block.into(),
            row,
            col,
            bit,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultMode {
    /// Every GEMM flips bits at the BER of the operating point it runs at.
    OperatingPoint,
    /// Every GEMM flips bits at a fixed BER, ignoring the schedule.
    Random { ber: f64 },
    /// Only the listed flips are applied.
    Targeted { records: Vec<FaultRecord> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlan {
    pub mode: FaultMode,
    pub seed: u64,
}

impl FaultPlan {
    pub fn operating_point(seed: u64) -> Self {
        Self {
            mode: FaultMode::OperatingPoint,
            seed,
        }
    }

    pub fn random(ber: f64, seed: u64) -> Result<Self> {
        check_probability(ber)?;
        Ok(Self {
            mode: FaultMode::Random { ber },
            seed,
        })
    }

    pub fn targeted(records: Vec<FaultRecord>) -> Self {
        Self {
            mode: FaultMode::Targeted { records },
            seed: 0,
        }
    }

    pub fn fault_free() -> Self {
        Self {
            mode: FaultMode::Random { ber: 0.0 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            FaultMode::OperatingPoint => Ok(()),
            FaultMode::Random { ber } => check_probability(*ber),
            FaultMode::Targeted { records } => records.iter().try_for_each(|r| {
                if (r.bit as u32) < WORD_BITS {
                    Ok(())
                } else {
                    Err(Error::InvalidBit(r.bit))
                }
            }),
        }
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// FNV-1a over the block name; stable across platforms and releases.
pub fn block_key(block: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in block.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for one `(seed, step, block, tile)` cell of the fault space.
pub fn fault_stream(seed: u64, step: usize, block: &str, tile: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    key[16..24].copy_from_slice(&block_key(block).to_le_bytes());
    key[24..32].copy_from_slice(&(tile as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draws independent per-bit flips over a `rows x cols` INT32 tensor.
/// The result is sorted by `(row, col, bit)`.
pub fn sample_faults<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ber: f64,
    step: usize,
    block: &str,
    rng: &mut R,
) -> Result<Vec<FaultRecord>> {
    check_probability(ber)?;
    let total = (rows * cols) as u64 * WORD_BITS as u64;
    let mut out = Vec::new();
    if ber == 0.0 || total == 0 {
        return Ok(out);
    }
    // Skip over the gaps between flips instead of drawing every bit.
    let gaps = Geometric::new(ber).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut pos: u64 = 0;
    loop {
        pos = pos.saturating_add(gaps.sample(rng));
        if pos >= total {
            break;
        }
        let elem = (pos / WORD_BITS as u64) as usize;
        out.push(FaultRecord {
            step,
            block: block.to_string(),
            row: elem / cols,
            col: elem % cols,
            bit: (pos % WORD_BITS as u64) as u8,
        });
        pos += 1;
    }
    Ok(out)
}

/// XORs each listed bit into the two's-complement pattern of its element.
pub fn inject(tensor: &AccTensor, faults: &[FaultRecord]) -> Result<AccTensor> {
    let mut out = tensor.clone();
    inject_in_place(&mut out, faults)?;
    Ok(out)
}

pub fn inject_in_place(tensor: &mut AccTensor, faults: &[FaultRecord]) -> Result<()> {
    for f in faults {
        tensor.check_index(f.row, f.col)?;
        if f.bit as u32 >= WORD_BITS {
            return Err(Error::InvalidBit(f.bit));
        }
    }
    for f in faults {
        let v = tensor.get(f.row, f.col) as u32 ^ (1u32 << f.bit);
        tensor.set(f.row, f.col, v as i32);
    }
    Ok(())
}

/// Faults a plan assigns to one GEMM output. `point_ber` is the BER of the
/// operating point the GEMM runs at; it is used only in
/// [`FaultMode::OperatingPoint`]. Random streams are drawn per output tile.
pub fn faults_for_op(
    plan: &FaultPlan,
    step: usize,
    block: &str,
    rows: usize,
    cols: usize,
    tiles: TileSpec,
    point_ber: f64,
) -> Result<Vec<FaultRecord>> {
    let ber = match &plan.mode {
        FaultMode::Targeted { records } => {
            return Ok(records
                .iter()
                .filter(|r| r.step == step && r.block == block)
                .cloned()
                .collect());
        }
        FaultMode::Random { ber } => *ber,
        FaultMode::OperatingPoint => point_ber,
    };
    check_probability(ber)?;
    if ber == 0.0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (idx, tile) in tile_partition(rows, cols, tiles).iter().enumerate() {
        let mut rng = fault_stream(plan.seed, step, block, idx);
        let local = sample_faults(tile.rows.len(), tile.cols.len(), ber, step, block, &mut rng)?;
        out.extend(local.into_iter().map(|mut f| {
            f.row += tile.rows.start;
            f.col += tile.cols.start;
            f
        }));
    }
    out.sort();
    Ok(out)
}

/// Writes the `step,block,row,col,bit` trace.
pub fn write_fault_trace<W: Write>(writer: W, records: &[FaultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "block", "row", "col", "bit"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.block.clone(),
            r.row.to_string(),
            r.col.to_string(),
            r.bit.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("fault trace", e))?;
    Ok(())
}
