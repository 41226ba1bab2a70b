//! Interval checkpointing of GEMM outputs and mask-directed recovery.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::abft::CorrectionMask;
use crate::error::{Error, Result};
use crate::memsim::LayoutDescriptor;
use crate::tensor::{tile_partition, AccTensor, TileSpec};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CheckpointKey {
    pub block: String,
    pub role: String,
}

impl CheckpointKey {
    pub fn new(block: impl Into<String>, role: impl Into<String>) -> Self {
        Self {
            block: block.into(),
            role: role.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub step: usize,
    pub tensor: AccTensor,
}

/// Latest checkpoint per `(block, role)`, refreshed every `interval` steps.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    interval: usize,
    slots: BTreeMap<CheckpointKey, Checkpoint>,
}

impl CheckpointStore {
    pub fn new(interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidParameter("interval must be >= 1".into()));
        }
        Ok(Self {
            interval,
            slots: BTreeMap::new(),
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn is_capture_step(&self, step: usize) -> bool {
        step % self.interval == 0
    }

    /// Stores a copy of `output` if `step` is on the interval. Returns the
    /// number of bytes offloaded to DRAM.
    pub fn maybe_checkpoint(&mut self, step: usize, key: &CheckpointKey, output: &AccTensor) -> u64 {
        if !self.is_capture_step(step) {
            return 0;
        }
        self.slots.insert(
            key.clone(),
            Checkpoint {
                step,
                tensor: output.clone(),
            },
        );
        output.byte_len()
    }

    pub fn get(&self, key: &CheckpointKey) -> Option<&Checkpoint> {
        self.slots.get(key)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecoveryPolicy {
    /// Overwrite masked positions with checkpoint values.
    Rollback,
    /// Overwrite masked positions with zero.
    ZeroOut,
    /// Leave masked positions but drop them when the output is consumed.
    Skip,
    /// Recompute the affected tiles exactly.
    Recompute,
    /// Detect only.
    None,
}

impl RecoveryPolicy {
    pub const ALL: [RecoveryPolicy; 5] = [
        RecoveryPolicy::Rollback,
        RecoveryPolicy::ZeroOut,
        RecoveryPolicy::Skip,
        RecoveryPolicy::Recompute,
        RecoveryPolicy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecoveryPolicy::Rollback => "rollback",
            RecoveryPolicy::ZeroOut => "zero_out",
            RecoveryPolicy::Skip => "skip",
            RecoveryPolicy::Recompute => "recompute",
            RecoveryPolicy::None => "none",
        }
    }
}

impl fmt::Display for RecoveryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecoveryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecoveryPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown recovery policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryCost {
    pub extra_macs: u64,
    /// Checkpoint bytes requested before coalescing; see [`recovery_traffic`].
    pub extra_dram_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryOutcome {
    pub tensor: AccTensor,
    pub cost: RecoveryCost,
    /// Positions whose contribution the consumer must treat as zero
    /// (only populated by [`RecoveryPolicy::Skip`]).
    pub dropped: Vec<(usize, usize)>,
}

/// Inputs shared by every policy for one GEMM output.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryContext<'a> {
    pub checkpoint: Option<&'a AccTensor>,
    /// Fault-free product, available to the recompute policy only.
    pub clean: &'a AccTensor,
    pub tiles: TileSpec,
    pub inner_dim: usize,
}

/// Applies `policy` to the masked positions of `current`. Positions outside
/// the mask are returned bit-identical.
pub fn recover(
    current: &AccTensor,
    mask: &CorrectionMask,
    policy: RecoveryPolicy,
    ctx: &RecoveryContext<'_>,
) -> Result<RecoveryOutcome> {
    for &(r, c) in &mask.positions {
        current.check_index(r, c)?;
    }
    if !ctx.clean.same_shape(current) {
        return Err(Error::Shape("clean reference does not match current output".into()));
    }
    let mut out = RecoveryOutcome {
        tensor: current.clone(),
        cost: RecoveryCost::default(),
        dropped: Vec::new(),
    };
    if mask.is_empty() {
        return Ok(out);
    }
    match policy {
        RecoveryPolicy::Rollback => {
            let ckpt = ctx
                .checkpoint
                .ok_or_else(|| Error::MissingCheckpoint("no checkpoint captured".into()))?;
            if !ckpt.same_shape(current) {
                return Err(Error::MissingCheckpoint(format!(
                    "checkpoint is {}x{}, output is {}x{}",
                    ckpt.rows(),
                    ckpt.cols(),
                    current.rows(),
                    current.cols()
                )));
            }
            for &(r, c) in &mask.positions {
                out.tensor.set(r, c, ckpt.get(r, c));
            }
            out.cost.extra_dram_bytes = 4 * mask.len() as u64;
        }
        RecoveryPolicy::ZeroOut => {
            for &(r, c) in &mask.positions {
                out.tensor.set(r, c, 0);
            }
        }
        RecoveryPolicy::Skip => {
            out.dropped = mask.positions.iter().copied().collect();
        }
        RecoveryPolicy::Recompute => {
            for &(r, c) in &mask.positions {
                out.tensor.set(r, c, ctx.clean.get(r, c));
            }
            let touched = tile_partition(current.rows(), current.cols(), ctx.tiles)
                .into_iter()
                .filter(|t| mask.positions.iter().any(|&(r, c)| t.contains(r, c)));
            out.cost.extra_macs = touched.map(|t| (t.len() * ctx.inner_dim) as u64).sum();
        }
        RecoveryPolicy::None => {}
    }
    Ok(out)
}

/// DRAM rows activated and bytes read to fetch the masked checkpoint
/// elements, with adjacent elements coalesced into cache lines.
pub fn recovery_traffic(mask: &CorrectionMask, layout: &LayoutDescriptor) -> Result<(u64, u64)> {
    let positions = mask.positions.iter().copied();
    let rows = layout.count_row_activations(positions.clone())? as u64;
    let lines = layout.count_cache_lines(positions)? as u64;
    Ok((rows, lines * layout.cache_line_bytes as u64))
}

/// One row of the recovery trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryEvent {
    pub step: usize,
    pub block: String,
    pub policy: RecoveryPolicy,
    pub masked_count: usize,
    pub rows_activated: u64,
    pub bytes_read: u64,
}

/// Writes the `step,block,policy,masked_count,rows_activated,bytes_read` trace.
pub fn write_recovery_trace<W: Write>(writer: W, events: &[RecoveryEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "block", "policy", "masked_count", "rows_activated", "bytes_read"])?;
    for e in events {
        w.write_record([
            e.step.to_string(),
            e.block.clone(),
            e.policy.to_string(),
            e.masked_count.to_string(),
            e.rows_activated.to_string(),
            e.bytes_read.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("recovery trace", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memsim::{LayoutKind, MemConfig};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn mask(positions: &[(usize, usize)]) -> CorrectionMask {
        CorrectionMask {
            positions: positions.iter().copied().collect(),
        }
    }

    fn tensor(rows: usize, cols: usize, base: i32) -> AccTensor {
        AccTensor::new(rows, cols, (0..(rows * cols) as i32).map(|v| v + base).collect()).unwrap()
    }

    fn ctx<'a>(ckpt: Option<&'a AccTensor>, clean: &'a AccTensor) -> RecoveryContext<'a> {
        RecoveryContext {
            checkpoint: ckpt,
            clean,
            tiles: TileSpec::square(2).unwrap(),
            inner_dim: 8,
        }
    }

    #[test]
    fn capture_only_on_interval() {
        let mut store = CheckpointStore::new(10).unwrap();
        let key = CheckpointKey::new("blk0", "out");
        let t = tensor(4, 4, 0);
        assert_eq!(store.maybe_checkpoint(0, &key, &t), 64);
        assert_eq!(store.get(&key).unwrap().step, 0);
        assert_eq!(store.maybe_checkpoint(7, &key, &tensor(4, 4, 100)), 0);
        assert_eq!(store.get(&key).unwrap().tensor, t);
    }

    #[test]
    fn twenty_steps_capture_twice() {
        let mut store = CheckpointStore::new(10).unwrap();
        let key = CheckpointKey::new("blk0", "out");
        let t = AccTensor::zeros(64, 64);
        let total: u64 = (0..20).map(|s| store.maybe_checkpoint(s, &key, &t)).sum();
        assert_eq!(total, 2 * 16384);
        assert_eq!(store.get(&key).unwrap().step, 10);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn zero_interval_rejected() {
        assert!(CheckpointStore::new(0).is_err());
    }

    #[test]
    fn empty_mask_is_a_no_op_for_every_policy() {
        let cur = tensor(3, 3, 0);
        let other = tensor(3, 3, 50);
        for policy in RecoveryPolicy::ALL {
            let out = recover(&cur, &mask(&[]), policy, &ctx(Some(&other), &other)).unwrap();
            assert_eq!(out.tensor, cur);
            assert_eq!(out.cost, RecoveryCost::default());
            assert!(out.dropped.is_empty());
        }
    }

    #[test]
    fn rollback_single_overwrite() {
        let cur = tensor(3, 3, 0);
        let mut ckpt = AccTensor::zeros(3, 3);
        ckpt.set(0, 1, 7);
        let out = recover(&cur, &mask(&[(0, 1)]), RecoveryPolicy::Rollback, &ctx(Some(&ckpt), &cur)).unwrap();
        let mut expected = cur.clone();
        expected.set(0, 1, 7);
        assert_eq!(out.tensor, expected);
        assert_eq!(out.cost.extra_macs, 0);
        assert_eq!(out.cost.extra_dram_bytes, 4);
    }

    #[test]
    fn rollback_requires_matching_checkpoint() {
        let cur = tensor(3, 3, 0);
        let m = mask(&[(1, 1)]);
        assert!(matches!(
            recover(&cur, &m, RecoveryPolicy::Rollback, &ctx(None, &cur)),
            Err(Error::MissingCheckpoint(_))
        ));
        let wrong = AccTensor::zeros(2, 3);
        assert!(matches!(
            recover(&cur, &m, RecoveryPolicy::Rollback, &ctx(Some(&wrong), &cur)),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn zero_out_and_skip() {
        let cur = tensor(3, 3, 1);
        let m = mask(&[(0, 1), (2, 1)]);
        let out = recover(&cur, &m, RecoveryPolicy::ZeroOut, &ctx(None, &cur)).unwrap();
        assert_eq!(out.tensor.get(0, 1), 0);
        assert_eq!(out.tensor.get(2, 1), 0);
        assert_eq!(out.tensor.data().iter().filter(|&&v| v == 0).count(), 2);

        let out = recover(&cur, &m, RecoveryPolicy::Skip, &ctx(None, &cur)).unwrap();
        assert_eq!(out.tensor, cur);
        assert_eq!(out.dropped, vec![(0, 1), (2, 1)]);
    }

    #[test]
    fn recompute_restores_clean_and_charges_tiles() {
        let clean = tensor(4, 4, 0);
        let cur = tensor(4, 4, 1000);
        // (0,1) and (1,0) share tile (0,0); (3,3) is in tile (1,1)
        let m = mask(&[(0, 1), (1, 0), (3, 3)]);
        let out = recover(&cur, &m, RecoveryPolicy::Recompute, &ctx(None, &clean)).unwrap();
        for &(r, c) in &m.positions {
            assert_eq!(out.tensor.get(r, c), clean.get(r, c));
        }
        assert_eq!(out.tensor.get(2, 2), cur.get(2, 2));
        assert_eq!(out.cost.extra_macs, 2 * 4 * 8);
    }

    #[test]
    fn recover_rejects_out_of_bounds_mask() {
        let cur = tensor(2, 2, 0);
        assert!(recover(&cur, &mask(&[(2, 0)]), RecoveryPolicy::ZeroOut, &ctx(None, &cur)).is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in RecoveryPolicy::ALL {
            assert_eq!(p.name().parse::<RecoveryPolicy>().unwrap(), p);
        }
        assert!("undo".parse::<RecoveryPolicy>().is_err());
    }

    fn layout(kind: LayoutKind, rows: usize, cols: usize) -> LayoutDescriptor {
        LayoutDescriptor::new(kind, 4, rows, cols, &MemConfig::default()).unwrap()
    }

    #[test]
    fn traffic_examples() {
        let packed = layout(LayoutKind::TilePacked(TileSpec::square(32).unwrap()), 64, 64);
        assert_eq!(recovery_traffic(&mask(&[]), &packed).unwrap(), (0, 0));
        // adjacent: one line
        assert_eq!(recovery_traffic(&mask(&[(0, 0), (0, 1)]), &packed).unwrap(), (1, 64));
        // same tile, different lines
        assert_eq!(recovery_traffic(&mask(&[(0, 0), (5, 7)]), &packed).unwrap(), (1, 128));

        let full: Vec<_> = (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).collect();
        let row_major = layout(LayoutKind::RowMajor, 64, 64);
        assert_eq!(recovery_traffic(&mask(&full), &row_major).unwrap(), (4, 4096));
        assert_eq!(recovery_traffic(&mask(&full), &packed).unwrap(), (2, 4096));
    }

    #[test]
    fn recovery_trace_layout() {
        let mut buf = Vec::new();
        let ev = RecoveryEvent {
            step: 12,
            block: "blk3".into(),
            policy: RecoveryPolicy::Rollback,
            masked_count: 4,
            rows_activated: 1,
            bytes_read: 128,
        };
        write_recovery_trace(&mut buf, &[ev]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,block,policy,masked_count,rows_activated,bytes_read\n12,blk3,rollback,4,1,128\n"
        );
    }

    proptest! {
        #[test]
        fn recovery_only_touches_masked_positions(
            seed in any::<i32>(),
            picks in proptest::collection::btree_set((0usize..5, 0usize..6), 0..12),
            which in 0usize..5
        ) {
            let cur = tensor(5, 6, seed / 2);
            let ckpt = tensor(5, 6, -7);
            let clean = tensor(5, 6, 3);
            let m = CorrectionMask { positions: picks.iter().copied().collect::<BTreeSet<_>>() };
            let policy = RecoveryPolicy::ALL[which];
            let out = recover(&cur, &m, policy, &ctx(Some(&ckpt), &clean)).unwrap();
            for r in 0..5 {
                for c in 0..6 {
                    if !m.contains(r, c) {
                        prop_assert_eq!(out.tensor.get(r, c), cur.get(r, c));
                    }
                }
            }
            if policy == RecoveryPolicy::Recompute {
                for &(r, c) in &m.positions {
                    prop_assert_eq!(out.tensor.get(r, c), clean.get(r, c));
                }
            }
        }

        #[test]
        fn offloaded_bytes_follow_interval(steps in 1usize..120, interval in 1usize..25) {
            let mut store = CheckpointStore::new(interval).unwrap();
            let key = CheckpointKey::new("b", "out");
            let t = AccTensor::zeros(8, 4);
            let total: u64 = (0..steps).map(|s| store.maybe_checkpoint(s, &key, &t)).sum();
            prop_assert_eq!(total, steps.div_ceil(interval) as u64 * t.byte_len());
        }
    }
}
