use accel_resilience::abft::{build_mask, compute_checksums, detect, DEFAULT_THETA};
use accel_resilience::checkpoint::RecoveryPolicy;
use accel_resilience::dvfs::{build_schedule, DvfsSchedule, OperatingPoint, ScheduleConfig};
use accel_resilience::fault::{inject, sample_faults, FaultPlan, FaultRecord};
use accel_resilience::memsim::AccelConfig;
use accel_resilience::tensor::{gemm_exact, QuantTensor};
use accel_resilience::workload::{
    clean_run, relative_l2, run_denoise, CheckpointLayout, ModelParams, MonitorConfig, SimConfig, ToyModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ToyModel {
    ToyModel::build(ModelParams::default()).unwrap()
}

fn schedule(m: &ToyModel) -> DvfsSchedule {
    build_schedule(
        m.steps(),
        &m.block_names(),
        &ScheduleConfig::default(),
        OperatingPoint::nominal(),
        OperatingPoint::undervolted(),
    )
    .unwrap()
}

fn final_deviation(m: &ToyModel, plan: &FaultPlan, cfg: &SimConfig) -> f64 {
    let clean = clean_run(m).unwrap();
    let out = run_denoise(m, plan, &schedule(m), cfg).unwrap();
    relative_l2(out.trajectory.final_state(), clean.final_state())
}

#[test]
fn rollback_beats_no_recovery_for_a_mid_run_high_bit_flip() {
    let m = model();
    let plan = FaultPlan::targeted(vec![FaultRecord::new(10, "blk1", 7, 9, 20).unwrap()]);
    let none = final_deviation(&m, &plan, &SimConfig { policy: RecoveryPolicy::None, ..SimConfig::default() });
    let rollback = final_deviation(&m, &plan, &SimConfig::default());
    assert!(none > 0.0);
    assert!(rollback < none, "rollback {rollback} vs none {none}");
}

#[test]
fn recompute_restores_clean_run_when_flips_do_not_alias() {
    // four flips per tile with distinct rows, columns and bits: no checksum cancels,
    // so the Cartesian mask (4 x 4 per GEMM) covers all of them
    let m = model();
    let mut flips = Vec::new();
    for step in [2, 6, 11, 19] {
        for (k, block) in ["blk0", "blk2", "blk3"].iter().enumerate() {
            for i in 0..4 {
                flips.push(FaultRecord::new(step, *block, 8 * i + k, 31 - 8 * i - k, 10 + 5 * i as u8).unwrap());
            }
        }
    }
    let plan = FaultPlan::targeted(flips);
    let cfg = SimConfig { policy: RecoveryPolicy::Recompute, ..SimConfig::default() };
    let clean = clean_run(&m).unwrap();
    let out = run_denoise(&m, &plan, &schedule(&m), &cfg).unwrap();
    assert_eq!(out.trajectory.states, clean.states);
    assert_eq!(out.report.masked_elements, 16 * 12);
}

#[test]
fn recompute_residual_is_exactly_the_unmasked_flips() {
    // at high BER the only error recompute leaves is flips the mask missed:
    // sub-threshold flips and large flips whose row or column sums cancel
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a = QuantTensor::new(32, 32, (0..1024).map(|_| rng.random()).collect(), 1.0).unwrap();
        let b = QuantTensor::new(32, 32, (0..1024).map(|_| rng.random()).collect(), 1.0).unwrap();
        let clean = gemm_exact(&a, &b).unwrap();
        let faults = sample_faults(32, 32, 3e-3, 0, "blk0", &mut rng).unwrap();
        let observed = inject(&clean, &faults).unwrap();
        let mask = build_mask(&detect(&observed, &compute_checksums(&a, &b).unwrap(), DEFAULT_THETA).unwrap());
        let mut recomputed = observed.clone();
        for &(r, c) in &mask.positions {
            recomputed.set(r, c, clean.get(r, c));
        }
        let escaped: Vec<FaultRecord> = faults.iter().filter(|f| !mask.contains(f.row, f.col)).cloned().collect();
        assert_eq!(recomputed, inject(&clean, &escaped).unwrap());
    }
}

#[test]
fn rollback_writes_the_checkpoint_values() {
    let m = model();
    let flip = FaultRecord::new(7, "blk1", 3, 4, 24).unwrap();
    let cfg = SimConfig { interval: 5, trace: true, ..SimConfig::default() };
    let out = run_denoise(&m, &FaultPlan::targeted(vec![flip]), &schedule(&m), &cfg).unwrap();
    let clean = run_denoise(&m, &FaultPlan::fault_free(), &schedule(&m), &cfg).unwrap();
    let output = |o: &accel_resilience::workload::RunOutput, step: usize| {
        o.traces
            .outputs
            .iter()
            .find(|(s, b, _)| *s == step && b == "blk1")
            .map(|(_, _, t)| t.clone())
            .unwrap()
    };
    // checkpoint was captured at step 5; its error at the repaired position is
    // exactly the clean step-5 to step-7 difference
    let repaired = output(&out, 7).get(3, 4);
    assert_eq!(repaired, output(&clean, 5).get(3, 4));
    let error = (repaired as i64 - output(&clean, 7).get(3, 4) as i64).abs();
    let drift = (output(&clean, 7).get(3, 4) as i64 - output(&clean, 5).get(3, 4) as i64).abs();
    assert_eq!(error, drift);
    assert_eq!(out.report.masked_elements, 1);
}

#[test]
fn invariants_hold_at_each_array_size() {
    let m = model();
    let clean = clean_run(&m).unwrap();
    for size in [16, 32, 64] {
        let accel = AccelConfig { array_size: size, ..AccelConfig::default() };
        for policy in RecoveryPolicy::ALL {
            let cfg = SimConfig { accel: accel.clone(), policy, ..SimConfig::default() };
            let free = run_denoise(&m, &FaultPlan::fault_free(), &schedule(&m), &cfg).unwrap();
            assert_eq!(free.trajectory.states, clean.states, "size {size} {policy}");
            let faulty = run_denoise(&m, &FaultPlan::operating_point(4), &schedule(&m), &cfg).unwrap();
            let r = &faulty.report;
            assert_eq!(r.gemms, 100);
            assert_eq!(r.nominal_gemms, 28);
            assert!(r.masked_elements > 0);
            let sum = r.energy.compute
                + r.energy.abft_overhead
                + r.energy.dram_write_checkpoint
                + r.energy.dram_read_recovery
                + r.energy.other;
            assert_eq!(sum, r.total_energy_j());
            if policy != RecoveryPolicy::Rollback {
                assert_eq!(r.checkpoint_bytes, 0);
            }
        }
    }
}

#[test]
fn tile_packed_checkpoints_cut_recovery_activations() {
    // a 32x32 tile spans 4 DRAM rows of a 64-wide row-major matrix but 2 when packed
    let m = ToyModel::build(ModelParams { dim: 64, steps: 8, ..ModelParams::default() }).unwrap();
    let run = |layout| {
        let cfg = SimConfig { layout, ..SimConfig::default() };
        run_denoise(&m, &FaultPlan::operating_point(2), &schedule(&m), &cfg).unwrap().report
    };
    let rm = run(CheckpointLayout::RowMajor);
    let tp = run(CheckpointLayout::TilePacked);
    assert!(tp.recovery_rows_activated < rm.recovery_rows_activated);
    assert_eq!(tp.masked_elements, rm.masked_elements);
}

#[test]
fn monitor_backs_off_from_an_overly_aggressive_rung() {
    let m = model();
    let ladder = vec![
        OperatingPoint::nominal(),
        OperatingPoint::undervolted(),
        OperatingPoint::with_scaled_energy("deep", 0.62, 2.0, 3e-2).unwrap(),
    ];
    let cfg = SimConfig {
        monitor: Some(MonitorConfig {
            ladder,
            target_ber: 3e-3,
            band: 2.0,
            window: 8,
            start: 2,
        }),
        trace: true,
        ..SimConfig::default()
    };
    let out = run_denoise(&m, &FaultPlan::operating_point(9), &schedule(&m), &cfg).unwrap();
    let rungs = &out.traces.rungs;
    assert_eq!(rungs.len(), m.steps());
    assert!(rungs.windows(2).all(|w| w[0].abs_diff(w[1]) <= 1));
    assert_eq!(*rungs.last().unwrap(), 1, "{rungs:?}");
    // operating points change only between steps
    for step in 0..m.steps() {
        let freqs: Vec<_> = out
            .records
            .iter()
            .filter(|r| r.step == step && !r.nominal)
            .map(|r| r.energy_per_mac_pj)
            .collect();
        assert!(freqs.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn undervolting_saves_compute_energy() {
    let m = model();
    let nominal = run_denoise(
        &m,
        &FaultPlan::fault_free(),
        &DvfsSchedule::uniform(m.steps(), OperatingPoint::nominal()),
        &SimConfig::default(),
    )
    .unwrap()
    .report;
    let scheduled = run_denoise(&m, &FaultPlan::operating_point(1), &schedule(&m), &SimConfig::default())
        .unwrap()
        .report;
    assert!(scheduled.energy.compute < nominal.energy.compute);
    assert_eq!(nominal.recovery_bytes, 0);
}
