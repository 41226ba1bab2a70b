//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use accel_resilience::abft::{build_mask, compute_checksums, detect, DetectionResult, DEFAULT_THETA};
use accel_resilience::checkpoint::{CheckpointKey, CheckpointStore, RecoveryPolicy};
use accel_resilience::cli::cmd_run;
use accel_resilience::config::{parse_config, RunConfig};
use accel_resilience::dvfs::{build_schedule, closed_loop, default_table, MonitorState, OperatingPoint, ScheduleConfig};
use accel_resilience::fault::{inject, FaultPlan, FaultRecord};
use accel_resilience::memsim::{
    account, tile_elements, AccelConfig, EnergyModel, GemmRecord, LayoutDescriptor, LayoutKind, MemConfig,
};
use accel_resilience::tensor::{gemm_exact, gemm_tiled, AccTensor, QuantTensor, TileRange, TileSpec};
use accel_resilience::workload::{
    characterize_bits, characterize_blocks, characterize_steps, clean_run, relative_l2, run_denoise,
    self_correction_trace, ModelParams, SimConfig, ToyModel,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_qt(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> QuantTensor {
    QuantTensor::new(rows, cols, (0..rows * cols).map(|_| rng.random()).collect(), 1.0).unwrap()
}

fn naive(a: &QuantTensor, b: &QuantTensor) -> Vec<i32> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i32;
            for kk in 0..k {
                acc += a.get(i, kk) as i32 * b.get(kk, j) as i32;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn gemm_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (m, k, n) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        let a = random_qt(&mut rng, m, k);
        let b = random_qt(&mut rng, k, n);
        let expected = naive(&a, &b);
        let tilings = [
            TileSpec::square(32).unwrap(),
            TileSpec::new(1, n).unwrap(),
            TileSpec::new(rng.random_range(1..=16), rng.random_range(1..=16)).unwrap(),
            TileSpec::square(64).unwrap(),
        ];
        if gemm_exact(&a, &b).unwrap().data() != expected.as_slice() {
            mismatches += 1;
        }
        for t in tilings {
            if gemm_tiled(&a, &b, t).unwrap().data() != expected.as_slice() {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && within(elapsed, 10),
        format!("1000 cases x 4 tilings, {mismatches} mismatches, {elapsed:.2?}"),
    )
}

fn abft_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xABF7);
    let mut false_positives = 0;
    for _ in 0..1000 {
        let a = random_qt(&mut rng, 32, 32);
        let b = random_qt(&mut rng, 32, 32);
        let c = gemm_exact(&a, &b).unwrap();
        if !detect(&c, &compute_checksums(&a, &b).unwrap(), DEFAULT_THETA).unwrap().is_clean() {
            false_positives += 1;
        }
    }
    let a = random_qt(&mut rng, 32, 32);
    let b = random_qt(&mut rng, 32, 32);
    let clean = gemm_exact(&a, &b).unwrap();
    let checks = compute_checksums(&a, &b).unwrap();
    let (mut cases, mut missed) = (0, 0);
    for row in 0..32 {
        for col in 0..32 {
            for bit in 10..=30 {
                cases += 1;
                let f = FaultRecord::new(0, "t", row, col, bit).unwrap();
                let det = detect(&inject(&clean, &[f]).unwrap(), &checks, DEFAULT_THETA).unwrap();
                let rows: Vec<_> = det.flagged_rows().collect();
                let cols: Vec<_> = det.flagged_cols().collect();
                let mask = build_mask(&det);
                if rows != [row] || cols != [col] || mask.len() != 1 || !mask.contains(row, col) {
                    missed += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        false_positives == 0 && missed == 0 && cases == 21_504 && within(elapsed, 60),
        format!("{false_positives} false positives / 1000 clean GEMMs, {missed} of {cases} single flips mislocalized, {elapsed:.2?}"),
    )
}

fn mask_construction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3A5C);
    let mut wrong = 0;
    for _ in 0..500 {
        let mut det = DetectionResult::default();
        for _ in 0..rng.random_range(0..40) {
            det.rows.insert(rng.random_range(0..64), 1 << 12);
        }
        for _ in 0..rng.random_range(0..40) {
            det.cols.insert(rng.random_range(0..64), -(1 << 12));
        }
        let mut oracle = BTreeSet::new();
        for &r in det.rows.keys() {
            for &c in det.cols.keys() {
                oracle.insert((r, c));
            }
        }
        if build_mask(&det).positions != oracle {
            wrong += 1;
        }
    }
    outcome(wrong == 0, format!("{wrong} of 500 flag-set pairs differ from the Cartesian product"))
}

fn checkpoint_arithmetic() -> Outcome {
    let tensor = AccTensor::zeros(32, 32);
    let per_checkpoint = tensor.byte_len() as u64;
    let mut store = CheckpointStore::new(10).unwrap();
    let key = CheckpointKey::new("blk0", "out");
    let offloaded: u64 = (0..50).map(|s| store.maybe_checkpoint(s, &key, &tensor)).sum();
    let store_ok = offloaded == 5 * per_checkpoint;

    let model = ToyModel::build(ModelParams { steps: 50, ..ModelParams::default() }).unwrap();
    let schedule = schedule_for(&model);
    let out = run_denoise(&model, &FaultPlan::operating_point(3), &schedule, &SimConfig::default()).unwrap();
    let tensors = model.blocks.len() as u64;
    let run_ok = out.report.checkpoint_bytes == 5 * per_checkpoint * tensors;
    outcome(
        store_ok && run_ok,
        format!(
            "store: {offloaded} B = 5 x {per_checkpoint} B; 50-step run: {} B = 5 x {per_checkpoint} B x {tensors} tensors",
            out.report.checkpoint_bytes
        ),
    )
}

fn activations(cols: usize, kind: LayoutKind) -> usize {
    let layout = LayoutDescriptor::new(kind, 4, 32, cols, &MemConfig::default()).unwrap();
    let tile = TileRange {
        tile_row: 0,
        tile_col: 0,
        rows: 0..32,
        cols: 0..32,
    };
    layout.count_row_activations(tile_elements(&tile)).unwrap()
}

fn row_activation_counting() -> Outcome {
    let packed = LayoutKind::TilePacked(TileSpec::square(32).unwrap());
    let (rm64, tp64) = (activations(64, LayoutKind::RowMajor), activations(64, packed));
    let (rm1152, tp1152) = (activations(1152, LayoutKind::RowMajor), activations(1152, packed));
    let ratio = rm1152 as f64 / tp1152 as f64;
    outcome(
        rm64 == 4 && tp64 == 2 && ratio >= 10.0,
        format!("64 cols: {rm64} vs {tp64}; 1152 cols: {rm1152} vs {tp1152} ({ratio:.1}x)"),
    )
}

fn overlap_accounting() -> Outcome {
    let accel = AccelConfig::default();
    let mem = MemConfig::default();
    let f = 2.0;
    // 15 us of compute at 2 GHz on 64 32x32 arrays
    let macs = (15e-6 * accel.peak_macs_per_cycle() * f * 1e9).round() as u64;
    // 2 activations plus a burst sized so retrieval totals 714 ns
    let rows = 2u64;
    let bytes = ((714e-9 - rows as f64 * mem.activation_latency_ns * 1e-9) * mem.bandwidth_bytes_per_s).round() as u64;
    let retrieval = rows as f64 * mem.activation_latency_ns * 1e-9 + bytes as f64 / mem.bandwidth_bytes_per_s;
    let trace: Vec<GemmRecord> = (0..8)
        .map(|i| GemmRecord {
            step: i / 2,
            block: format!("b{}", i % 2),
            frequency_ghz: f,
            energy_per_mac_pj: 0.25,
            macs,
            abft: true,
            recovery_rows: rows,
            recovery_bytes: bytes,
            ..Default::default()
        })
        .collect();
    let r = account(&trace, &accel, &mem, &EnergyModel::default());
    let pure = 8.0 * macs as f64 / (accel.peak_macs_per_cycle() * f * 1e9);
    let ok = (r.total_latency_s() - pure).abs() <= 1e-12 * pure && r.exposed_recovery_latency_s == 0.0;
    outcome(
        ok,
        format!(
            "per GEMM {:.3} us compute vs {:.0} ns retrieval; total {:.6e} s vs compute {:.6e} s",
            pure / 8.0 * 1e6,
            retrieval * 1e9,
            r.total_latency_s(),
            pure
        ),
    )
}

fn energy_latency_oracle() -> Outcome {
    let accel = AccelConfig::default();
    let mem = MemConfig::default();
    let model = EnergyModel {
        abft_overhead: 0.063,
        static_power_w: 0.1,
    };
    let macs = 1_000_000u64;
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for point in default_table() {
        // 2 steps x 2 blocks; checkpoints at step 0, one recovery at step 1
        let trace: Vec<GemmRecord> = (0..2)
            .flat_map(|step| (0..2).map(move |b| (step, b)))
            .map(|(step, b)| GemmRecord {
                step,
                block: format!("b{b}"),
                frequency_ghz: point.frequency_ghz,
                energy_per_mac_pj: point.energy_per_mac_pj,
                macs,
                abft: true,
                checkpoint_bytes: if step == 0 { 8192 } else { 0 },
                recovery_rows: if step == 1 && b == 1 { 3 } else { 0 },
                recovery_bytes: if step == 1 && b == 1 { 4096 } else { 0 },
                ..Default::default()
            })
            .collect();
        let r = account(&trace, &accel, &mem, &model);

        // closed form
        let e_mac = 0.25e-12 * (point.voltage / 0.9).powi(2);
        let compute = 4.0 * macs as f64 * e_mac;
        let abft = 0.063 * compute;
        let ckpt = 2.0 * (4.0 * 1000e-12 + 8192.0 * 31.2e-12);
        let recovery = 3.0 * 1000e-12 + 4096.0 * 31.2e-12;
        let t_gemm = macs as f64 / (64.0 * 32.0 * 32.0 * point.frequency_ghz * 1e9);
        let t_retrieval = 3.0 * 30e-9 + 4096.0 / 256e9;
        let latency = 4.0 * t_gemm + (t_retrieval - t_gemm).max(0.0);
        let other = 0.1 * latency;
        let rel = |sim: f64, hand: f64| (sim - hand).abs() / hand;
        let errs = [
            rel(r.energy.compute, compute),
            rel(r.energy.abft_overhead, abft),
            rel(r.energy.dram_write_checkpoint, ckpt),
            rel(r.energy.dram_read_recovery, recovery),
            rel(r.energy.other, other),
            rel(r.total_energy_j(), compute + abft + ckpt + recovery + other),
            rel(r.compute_latency_s, 4.0 * t_gemm),
            rel(r.total_latency_s(), latency),
        ];
        let max = errs.into_iter().fold(0.0, f64::max);
        worst = worst.max(max);
        details.push(format!("{} {:.1e}", point.name, max));
    }
    let ratio = OperatingPoint::undervolted().energy_per_mac_pj / OperatingPoint::nominal().energy_per_mac_pj;
    let ratio_ok = (ratio - (0.68f64 / 0.9).powi(2)).abs() < 1e-12 && (ratio - 0.571).abs() < 5e-4;
    outcome(
        worst <= 0.005 && ratio_ok,
        format!("max relative error per point: {}; 0.68 V / 0.9 V energy ratio {ratio:.4}", details.join(", ")),
    )
}

fn schedule_for(model: &ToyModel) -> accel_resilience::dvfs::DvfsSchedule {
    build_schedule(
        model.steps(),
        &model.block_names(),
        &ScheduleConfig::default(),
        OperatingPoint::nominal(),
        OperatingPoint::undervolted(),
    )
    .unwrap()
}

fn resilience_trends() -> Outcome {
    let start = Instant::now();
    let model = ToyModel::build(ModelParams::default()).unwrap();
    let trials = 200;
    let bits = characterize_bits(&model, &[8, 28], trials, 11).unwrap();
    let steps = characterize_steps(&model, &[1, model.steps() - 2], trials, 20, 12).unwrap();
    let names: Vec<String> = model.blocks.iter().map(|b| b.name.clone()).collect();
    let blocks = characterize_blocks(&model, &names, trials, 3, 20, 13).unwrap();
    let mut body: Vec<f64> = blocks[1..].iter().map(|r| r.mean_deviation).collect();
    body.sort_by(f64::total_cmp);
    let median = if body.len() % 2 == 1 {
        body[body.len() / 2]
    } else {
        (body[body.len() / 2 - 1] + body[body.len() / 2]) / 2.0
    };
    let embed = blocks[0].mean_deviation;

    let mut traces = 0;
    let mut monotone = 0;
    for bit in [0u8, 2, 4] {
        for seed in 0..10 {
            let tr = self_correction_trace(&model, 5, bit, seed).unwrap();
            let peak = tr
                .deviation
                .iter()
                .enumerate()
                .fold((0, 0.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
                .0;
            traces += 1;
            if tr.deviation[peak..].windows(2).all(|w| w[1] <= w[0]) {
                monotone += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let (b8, b28) = (bits[0].mean_deviation, bits[1].mean_deviation);
    let (early, late) = (steps[0].mean_deviation, steps[1].mean_deviation);
    outcome(
        b28 > b8 && early > late && embed >= median && monotone == traces && within(elapsed, 300),
        format!(
            "bit28 {b28:.3e} > bit8 {b8:.3e}; step1 {early:.3e} > step{} {late:.3e}; embed {embed:.3e} >= body median {median:.3e}; {monotone}/{traces} low-bit traces non-increasing after peak; {elapsed:.1?}",
            model.steps() - 2
        ),
    )
}

fn policy_ordering() -> Outcome {
    let model = ToyModel::build(ModelParams::default()).unwrap();
    let clean = clean_run(&model).unwrap();
    let schedule = schedule_for(&model);
    let trials = 100;
    let mean = |policy: RecoveryPolicy| {
        let cfg = SimConfig {
            policy,
            theta: DEFAULT_THETA,
            interval: 10,
            ..SimConfig::default()
        };
        let (mut dev, mut extra) = (0.0, 0u64);
        for seed in 0..trials {
            let out = run_denoise(&model, &FaultPlan::operating_point(seed), &schedule, &cfg).unwrap();
            dev += relative_l2(out.trajectory.final_state(), clean.final_state());
            extra += out.report.extra_macs;
        }
        (dev / trials as f64, extra)
    };
    let (recompute, recompute_macs) = mean(RecoveryPolicy::Recompute);
    let (rollback, rollback_macs) = mean(RecoveryPolicy::Rollback);
    let (zero, _) = mean(RecoveryPolicy::ZeroOut);
    let (none, _) = mean(RecoveryPolicy::None);
    outcome(
        recompute <= rollback && rollback <= zero && rollback < none && recompute_macs > rollback_macs && rollback_macs == 0,
        format!(
            "recompute {recompute:.4} <= rollback {rollback:.4} <= zero_out {zero:.4}; none {none:.4}; extra MACs recompute {recompute_macs} vs rollback {rollback_macs}"
        ),
    )
}

fn monitor_convergence() -> Outcome {
    let ladder = vec![
        OperatingPoint::with_scaled_energy("safe", 0.75, 2.0, 3e-4).unwrap(),
        OperatingPoint::undervolted(),
        OperatingPoint::with_scaled_energy("deep", 0.62, 2.0, 3e-2).unwrap(),
    ];
    let target = 1;
    let mut settled = 0;
    let mut exact = 0;
    let mut runs = 0;
    for seed in 0..10 {
        for start in [0, 2] {
            runs += 1;
            let state = MonitorState::new(3e-3, 2.0, ladder.clone(), start, 16).unwrap();
            let trace = closed_loop(state, 40, DEFAULT_THETA, seed).unwrap();
            // settled: from some window <= 20 on, every rung stays within one of the target
            let first_ok = (0..=20).find(|&w| trace[w..].iter().all(|&r| r.abs_diff(target) <= 1));
            if first_ok.is_some() {
                settled += 1;
            }
            if trace[20..].iter().all(|&r| r == target) {
                exact += 1;
            }
        }
    }
    outcome(
        settled == runs,
        format!("{settled}/{runs} runs (10 seeds x 2 starts) settle within one rung by window 20; {exact}/{runs} sit exactly on the matching rung"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut names = Vec::new();
    let mut cfgs: Vec<RunConfig> = Vec::new();
    for sub in ["a", "b"] {
        let mut cfg = parse_config("").unwrap();
        cfg.out_dir = tmp.path().join(sub);
        cmd_run(&cfg).unwrap();
        cfgs.push(cfg);
    }
    let mut differing = Vec::new();
    for entry in fs::read_dir(&cfgs[0].out_dir).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(cfgs[0].out_dir.join(&name)).unwrap();
        let b = fs::read(cfgs[1].out_dir.join(&name)).unwrap_or_default();
        if a != b {
            differing.push(name.to_string_lossy().into_owned());
        }
        names.push(name.to_string_lossy().into_owned());
    }
    let count_b = fs::read_dir(&cfgs[1].out_dir).unwrap().count();
    names.sort();
    outcome(
        differing.is_empty() && count_b == names.len() && !names.is_empty(),
        format!("{} files compared ({}), {} differ", names.len(), names.join(", "), differing.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("GEMM oracle equivalence", gemm_oracle),
        ("ABFT soundness and single-flip detection", abft_soundness),
        ("mask construction", mask_construction),
        ("checkpoint arithmetic", checkpoint_arithmetic),
        ("row-activation counting", row_activation_counting),
        ("overlap accounting", overlap_accounting),
        ("energy/latency oracle", energy_latency_oracle),
        ("resilience trends", resilience_trends),
        ("policy ordering", policy_ordering),
        ("BER-monitor convergence", monitor_convergence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} [{:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
