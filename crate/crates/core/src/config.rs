//! Run configuration: a TOML document walked key by key so that every
//! invalid field is reported with its path, and unknown keys are rejected.
//!
//! ```toml
//! seed = 1
//! out_dir = "out"
//!
//! [workload]     # dim, depth, steps, damping, body_gain, embed_gain, seed
//! [accelerator]  # arrays, array_size
//! [energy]       # abft_overhead, static_power_w
//! [memory]       # dram_row_bytes, cache_line_bytes, activation_energy_pj,
//!                # byte_energy_pj, bandwidth_bytes_per_s, activation_latency_ns
//! [abft]         # enabled, theta | theta_bit
//! [checkpoint]   # interval, layout, embedding
//! [recovery]     # policy
//! [faults]       # mode = "operating_point" | "random" | "none", ber
//! [dvfs]         # nominal, aggressive, early_steps, sensitive_steps, sensitive_blocks
//! [[dvfs.points]] # name, voltage, frequency_ghz, ber, energy_per_mac_pj
//! [monitor]      # target_ber, band, window, ladder, start
//! [characterize] # trials, seed, bits, steps, blocks, step, bit, trace_step, trace_bit
//! ```

use std::ops::Range;
use std::path::PathBuf;

use toml::{Table, Value};

use crate::checkpoint::RecoveryPolicy;
use crate::dvfs::{build_schedule, default_table, scaled_energy_per_mac, DvfsSchedule, OperatingPoint, ScheduleConfig};
use crate::dvfs::{NOMINAL_ENERGY_PER_MAC_PJ, NOMINAL_VOLTAGE, TARGET_BER};
use crate::error::{ConfigError, Error, Result};
use crate::fault::{FaultPlan, WORD_BITS};
use crate::memsim::{AccelConfig, EnergyModel, MemConfig};
use crate::workload::{CheckpointLayout, ModelParams, MonitorConfig, SimConfig, ToyModel, EMBED_BLOCK};

/// Where injected faults come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultSetting {
    /// Each GEMM uses the BER of its scheduled operating point.
    OperatingPoint,
    /// Every GEMM uses this BER regardless of schedule.
    Random(f64),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSettings {
    pub target_ber: f64,
    pub band: f64,
    pub window: usize,
    /// Operating-point names, safest first.
    pub ladder: Vec<String>,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterizeSettings {
    pub trials: usize,
    pub seed: u64,
    /// `None` means all 32 bits.
    pub bits: Option<Vec<u8>>,
    /// `None` means every step.
    pub steps: Option<Vec<usize>>,
    /// `None` means every block.
    pub blocks: Option<Vec<String>>,
    /// Injection step for block mode.
    pub step: usize,
    /// Flipped bit for step and block modes.
    pub bit: u8,
    pub trace_step: usize,
    pub trace_bit: u8,
}

impl Default for CharacterizeSettings {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 1,
            bits: None,
            steps: None,
            blocks: None,
            step: 2,
            bit: 20,
            trace_step: 5,
            trace_bit: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Fault-sampling seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelParams,
    pub accel: AccelConfig,
    pub energy: EnergyModel,
    pub mem: MemConfig,
    pub abft: bool,
    pub theta: i64,
    pub interval: usize,
    pub layout: CheckpointLayout,
    pub checkpoint_embedding: bool,
    pub policy: RecoveryPolicy,
    pub faults: FaultSetting,
    pub points: Vec<OperatingPoint>,
    pub nominal_point: String,
    pub aggressive_point: String,
    pub schedule: ScheduleConfig,
    pub monitor: Option<MonitorSettings>,
    pub characterize: CharacterizeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            model: ModelParams::default(),
            accel: AccelConfig::default(),
            energy: EnergyModel::default(),
            mem: MemConfig::default(),
            abft: true,
            theta: crate::abft::DEFAULT_THETA,
            interval: 10,
            layout: CheckpointLayout::TilePacked,
            checkpoint_embedding: true,
            policy: RecoveryPolicy::Rollback,
            faults: FaultSetting::OperatingPoint,
            points: default_table(),
            nominal_point: "nominal".into(),
            aggressive_point: "undervolt".into(),
            schedule: ScheduleConfig::default(),
            monitor: None,
            characterize: CharacterizeSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn point(&self, name: &str) -> Result<&OperatingPoint> {
        self.points
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown operating point `{name}`")))
    }

    pub fn build_model(&self) -> Result<ToyModel> {
        ToyModel::build(self.model.clone())
    }

    pub fn build_schedule(&self, model: &ToyModel) -> Result<DvfsSchedule> {
        build_schedule(
            model.steps(),
            &model.block_names(),
            &self.schedule,
            self.point(&self.nominal_point)?.clone(),
            self.point(&self.aggressive_point)?.clone(),
        )
    }

    pub fn fault_plan(&self) -> Result<FaultPlan> {
        match self.faults {
            FaultSetting::OperatingPoint => Ok(FaultPlan::operating_point(self.seed)),
            FaultSetting::Random(ber) => FaultPlan::random(ber, self.seed),
            FaultSetting::None => Ok(FaultPlan::fault_free()),
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let monitor = match &self.monitor {
            Some(m) => Some(MonitorConfig {
                ladder: m.ladder.iter().map(|n| self.point(n).cloned()).collect::<Result<_>>()?,
                target_ber: m.target_ber,
                band: m.band,
                window: m.window,
                start: m.start,
            }),
            None => None,
        };
        Ok(SimConfig {
            accel: self.accel.clone(),
            mem: self.mem.clone(),
            energy: self.energy.clone(),
            abft: self.abft,
            theta: self.theta,
            interval: self.interval,
            policy: self.policy,
            layout: self.layout,
            checkpoint_embedding: self.checkpoint_embedding,
            monitor,
            trace: true,
        })
    }

    /// Names of the blocks the configured model will have.
    pub fn block_names(&self) -> Vec<String> {
        std::iter::once(EMBED_BLOCK.to_string())
            .chain((0..self.model.depth).map(|k| format!("blk{k}")))
            .collect()
    }

    /// Cross-field checks, run after every field parsed.
    fn check(&self, errs: &mut Vec<ConfigError>) {
        let mut push = |path: &str, reason: String| {
            errs.push(ConfigError {
                path: path.into(),
                reason,
            })
        };
        if let Err(e) = self.model.validate() {
            push("workload", e.to_string());
        }
        if self.accel.arrays == 0 || self.accel.array_size == 0 {
            push("accelerator", "arrays and array_size must be >= 1".into());
        }
        if let Err(e) = self.mem.validate() {
            push("memory", e.to_string());
        }
        for (key, v) in [
            ("energy.abft_overhead", self.energy.abft_overhead),
            ("energy.static_power_w", self.energy.static_power_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                push(key, "must be a non-negative number".into());
            }
        }
        if self.interval == 0 {
            push("checkpoint.interval", "interval must be >= 1".into());
        }
        if self.theta <= 0 {
            push("abft.theta", "threshold must be positive".into());
        }
        if let FaultSetting::Random(ber) = self.faults {
            if !(0.0..=1.0).contains(&ber) {
                push("faults.ber", format!("probability {ber} outside [0, 1]"));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if let Err(e) = p.validate() {
                push(&format!("dvfs.points[{i}]"), e.to_string());
            }
            if self.points[..i].iter().any(|q| q.name == p.name) {
                push(&format!("dvfs.points[{i}].name"), format!("duplicate operating point `{}`", p.name));
            }
        }
        for (key, name) in [("dvfs.nominal", &self.nominal_point), ("dvfs.aggressive", &self.aggressive_point)] {
            if self.point(name).is_err() {
                push(key, format!("unknown operating point `{name}`"));
            }
        }
        let blocks = self.block_names();
        if let Some(names) = &self.schedule.block_override {
            for n in names.iter().filter(|n| !blocks.contains(n)) {
                push("dvfs.sensitive_blocks", format!("unknown block `{n}`"));
            }
        }
        if let Some(ranges) = &self.schedule.step_override {
            if ranges.iter().any(|r| r.start > r.end) {
                push("dvfs.sensitive_steps", "each range must satisfy start <= end".into());
            }
        }
        if let Some(m) = &self.monitor {
            if m.ladder.is_empty() {
                push("monitor.ladder", "ladder must name at least one operating point".into());
            }
            for n in m.ladder.iter().filter(|n| self.point(n).is_err()) {
                push("monitor.ladder", format!("unknown operating point `{n}`"));
            }
            if m.start >= m.ladder.len().max(1) {
                push("monitor.start", "start rung outside the ladder".into());
            }
            if !(m.band > 1.0 && m.band.is_finite()) {
                push("monitor.band", "band must be > 1".into());
            }
            if m.window == 0 {
                push("monitor.window", "window must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&m.target_ber) {
                push("monitor.target_ber", "probability outside [0, 1]".into());
            }
        }
        let c = &self.characterize;
        if c.trials == 0 {
            push("characterize.trials", "trials must be >= 1".into());
        }
        for (key, bit) in [("characterize.bit", c.bit), ("characterize.trace_bit", c.trace_bit)] {
            if bit as u32 >= WORD_BITS {
                push(key, format!("bit position {bit} outside [0, 31]"));
            }
        }
        if c.bits.iter().flatten().any(|&b| b as u32 >= WORD_BITS) {
            push("characterize.bits", "bit positions must lie in [0, 31]".into());
        }
        let steps = self.model.steps;
        for (key, s) in [("characterize.step", c.step), ("characterize.trace_step", c.trace_step)] {
            if s >= steps {
                push(key, format!("step {s} outside 0..{steps}"));
            }
        }
        if c.steps.iter().flatten().any(|&s| s >= steps) {
            push("characterize.steps", format!("steps must lie in 0..{steps}"));
        }
        for n in c.blocks.iter().flatten().filter(|n| !blocks.contains(n)) {
            push("characterize.blocks", format!("unknown block `{n}`"));
        }
    }
}

/// Collects type errors and unknown keys while reading one table.
struct Section<'a, 'e> {
    path: String,
    table: Option<&'a Table>,
    errs: &'e mut Vec<ConfigError>,
}

impl<'a, 'e> Section<'a, 'e> {
    fn new(path: &str, table: Option<&'a Table>, allowed: &[&str], errs: &'e mut Vec<ConfigError>) -> Self {
        if let Some(t) = table {
            for key in t.keys().filter(|k| !allowed.contains(&k.as_str())) {
                errs.push(ConfigError {
                    path: join(path, key),
                    reason: "unknown key".into(),
                });
            }
        }
        Self {
            path: path.to_string(),
            table,
            errs,
        }
    }

    fn err(&mut self, key: &str, reason: impl Into<String>) {
        self.errs.push(ConfigError {
            path: join(&self.path, key),
            reason: reason.into(),
        });
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn int(&mut self, key: &str) -> Option<i64> {
        match self.raw(key)? {
            Value::Integer(i) => Some(*i),
            _ => {
                self.err(key, "expected an integer");
                None
            }
        }
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        match self.int(key) {
            Some(i) if i >= 0 => i as usize,
            Some(_) => {
                self.err(key, "must be non-negative");
                default
            }
            None => default,
        }
    }

    /// Seeds accept integers or decimal strings (for values above `i64::MAX`).
    fn seed(&mut self, key: &str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(Value::String(s)) => s.parse().unwrap_or_else(|_| {
                self.err(key, "expected a non-negative 64-bit integer");
                default
            }),
            Some(_) => {
                self.err(key, "expected a non-negative 64-bit integer");
                default
            }
        }
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                self.err(key, "expected a number");
                default
            }
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.err(key, "expected true or false");
                default
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.raw(key)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.err(key, "expected a string");
                None
            }
        }
    }

    fn array(&mut self, key: &str) -> Option<&'a Vec<Value>> {
        match self.raw(key)? {
            Value::Array(a) => Some(a),
            _ => {
                self.err(key, "expected an array");
                None
            }
        }
    }

    fn strings(&mut self, key: &str) -> Option<Vec<String>> {
        let arr = self.array(key)?;
        let out: Option<Vec<String>> = arr.iter().map(|v| v.as_str().map(String::from)).collect();
        if out.is_none() {
            self.err(key, "expected an array of strings");
        }
        out
    }

    fn counts(&mut self, key: &str) -> Option<Vec<usize>> {
        let arr = self.array(key)?;
        let out: Option<Vec<usize>> = arr
            .iter()
            .map(|v| v.as_integer().filter(|&i| i >= 0).map(|i| i as usize))
            .collect();
        if out.is_none() {
            self.err(key, "expected an array of non-negative integers");
        }
        out
    }

    fn bit(&mut self, key: &str, default: u8) -> u8 {
        match self.int(key) {
            Some(b) if (0..WORD_BITS as i64).contains(&b) => b as u8,
            Some(b) => {
                self.err(key, format!("bit position {b} outside [0, 31]"));
                default
            }
            None => default,
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn sub_table<'a>(root: &'a Table, key: &str, errs: &mut Vec<ConfigError>) -> Option<&'a Table> {
    match root.get(key)? {
        Value::Table(t) => Some(t),
        _ => {
            errs.push(ConfigError {
                path: key.into(),
                reason: "expected a table".into(),
            });
            None
        }
    }
}

fn parse_point(table: &Table, path: &str, errs: &mut Vec<ConfigError>) -> Option<OperatingPoint> {
    let mut s = Section::new(
        path,
        Some(table),
        &["name", "voltage", "frequency_ghz", "ber", "energy_per_mac_pj"],
        errs,
    );
    let name = s.string("name");
    if name.is_none() && s.raw("name").is_none() {
        s.err("name", "required");
    }
    let required = |s: &mut Section, key: &str| {
        if s.raw(key).is_none() {
            s.err(key, "required");
        }
        s.float(key, f64::NAN)
    };
    let voltage = required(&mut s, "voltage");
    let frequency_ghz = required(&mut s, "frequency_ghz");
    let ber = required(&mut s, "ber");
    let energy = s.float(
        "energy_per_mac_pj",
        scaled_energy_per_mac(voltage, NOMINAL_ENERGY_PER_MAC_PJ, NOMINAL_VOLTAGE),
    );
    Some(OperatingPoint {
        name: name?,
        voltage,
        frequency_ghz,
        ber,
        energy_per_mac_pj: energy,
    })
}

/// Parses and validates a configuration document. An empty document yields
/// the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        Error::Config(vec![ConfigError {
            path: String::new(),
            reason: e.to_string().trim().to_string(),
        }])
    })?;
    let mut errs = Vec::new();
    let mut cfg = RunConfig::default();
    const SECTIONS: [&str; 11] = [
        "workload",
        "accelerator",
        "energy",
        "memory",
        "abft",
        "checkpoint",
        "recovery",
        "faults",
        "dvfs",
        "monitor",
        "characterize",
    ];
    let mut top_keys = vec!["seed", "out_dir"];
    top_keys.extend(SECTIONS);
    let mut s = Section::new("", Some(&root), &top_keys, &mut errs);
    cfg.seed = s.seed("seed", cfg.seed);
    if let Some(dir) = s.string("out_dir") {
        cfg.out_dir = dir.into();
    }

    let t = sub_table(&root, "workload", &mut errs);
    let mut s = Section::new(
        "workload",
        t,
        &["dim", "depth", "steps", "damping", "body_gain", "embed_gain", "seed"],
        &mut errs,
    );
    let m = &mut cfg.model;
    m.dim = s.count("dim", m.dim);
    m.depth = s.count("depth", m.depth);
    m.steps = s.count("steps", m.steps);
    m.damping = s.float("damping", m.damping);
    m.body_gain = s.float("body_gain", m.body_gain);
    m.embed_gain = s.float("embed_gain", m.embed_gain);
    m.seed = s.seed("seed", m.seed);

    let t = sub_table(&root, "accelerator", &mut errs);
    let mut s = Section::new("accelerator", t, &["arrays", "array_size"], &mut errs);
    cfg.accel.arrays = s.count("arrays", cfg.accel.arrays);
    cfg.accel.array_size = s.count("array_size", cfg.accel.array_size);

    let t = sub_table(&root, "energy", &mut errs);
    let mut s = Section::new("energy", t, &["abft_overhead", "static_power_w"], &mut errs);
    cfg.energy.abft_overhead = s.float("abft_overhead", cfg.energy.abft_overhead);
    cfg.energy.static_power_w = s.float("static_power_w", cfg.energy.static_power_w);

    let t = sub_table(&root, "memory", &mut errs);
    let mut s = Section::new(
        "memory",
        t,
        &[
            "dram_row_bytes",
            "cache_line_bytes",
            "activation_energy_pj",
            "byte_energy_pj",
            "bandwidth_bytes_per_s",
            "activation_latency_ns",
        ],
        &mut errs,
    );
    let mem = &mut cfg.mem;
    mem.dram_row_bytes = s.count("dram_row_bytes", mem.dram_row_bytes);
    mem.cache_line_bytes = s.count("cache_line_bytes", mem.cache_line_bytes);
    mem.activation_energy_pj = s.float("activation_energy_pj", mem.activation_energy_pj);
    mem.byte_energy_pj = s.float("byte_energy_pj", mem.byte_energy_pj);
    mem.bandwidth_bytes_per_s = s.float("bandwidth_bytes_per_s", mem.bandwidth_bytes_per_s);
    mem.activation_latency_ns = s.float("activation_latency_ns", mem.activation_latency_ns);

    let t = sub_table(&root, "abft", &mut errs);
    let mut s = Section::new("abft", t, &["enabled", "theta", "theta_bit"], &mut errs);
    cfg.abft = s.boolean("enabled", cfg.abft);
    match (s.raw("theta").is_some(), s.raw("theta_bit").is_some()) {
        (true, true) => s.err("theta", "give either theta or theta_bit, not both"),
        (true, false) => cfg.theta = s.int("theta").unwrap_or(cfg.theta),
        (false, true) => {
            // bits up to 62 keep 1 << bit positive in i64
            match s.int("theta_bit") {
                Some(b) if (0..63).contains(&b) => cfg.theta = 1i64 << b,
                Some(b) => s.err("theta_bit", format!("bit position {b} outside [0, 62]")),
                None => {}
            }
        }
        (false, false) => {}
    }

    let t = sub_table(&root, "checkpoint", &mut errs);
    let mut s = Section::new("checkpoint", t, &["interval", "layout", "embedding"], &mut errs);
    cfg.interval = s.count("interval", cfg.interval);
    cfg.checkpoint_embedding = s.boolean("embedding", cfg.checkpoint_embedding);
    if let Some(layout) = s.string("layout") {
        match layout.as_str() {
            "row_major" => cfg.layout = CheckpointLayout::RowMajor,
            "tile_packed" => cfg.layout = CheckpointLayout::TilePacked,
            other => s.err("layout", format!("unknown layout `{other}` (row_major | tile_packed)")),
        }
    }

    let t = sub_table(&root, "recovery", &mut errs);
    let mut s = Section::new("recovery", t, &["policy"], &mut errs);
    if let Some(p) = s.string("policy") {
        match p.parse() {
            Ok(policy) => cfg.policy = policy,
            Err(_) => s.err(
                "policy",
                format!("unknown policy `{p}` (rollback | zero_out | skip | recompute | none)"),
            ),
        }
    }

    let t = sub_table(&root, "faults", &mut errs);
    let mut s = Section::new("faults", t, &["mode", "ber"], &mut errs);
    let ber = s.float("ber", TARGET_BER);
    match s.string("mode").as_deref() {
        None | Some("operating_point") => {
            if s.raw("ber").is_some() {
                s.err("ber", "only meaningful with mode = \"random\"");
            }
        }
        Some("random") => cfg.faults = FaultSetting::Random(ber),
        Some("none") => cfg.faults = FaultSetting::None,
        Some(other) => s.err("mode", format!("unknown mode `{other}` (operating_point | random | none)")),
    }

    let t = sub_table(&root, "dvfs", &mut errs);
    let mut s = Section::new(
        "dvfs",
        t,
        &["nominal", "aggressive", "early_steps", "sensitive_steps", "sensitive_blocks", "points"],
        &mut errs,
    );
    if let Some(n) = s.string("nominal") {
        cfg.nominal_point = n;
    }
    if let Some(n) = s.string("aggressive") {
        cfg.aggressive_point = n;
    }
    cfg.schedule.early_steps = s.count("early_steps", cfg.schedule.early_steps);
    cfg.schedule.block_override = s.strings("sensitive_blocks");
    if let Some(arr) = s.array("sensitive_steps") {
        let ranges: Option<Vec<Range<usize>>> = arr
            .iter()
            .map(|v| match v.as_array().map(|a| a.as_slice()) {
                Some([Value::Integer(a), Value::Integer(b)]) if *a >= 0 && *b >= 0 => Some(*a as usize..*b as usize),
                _ => None,
            })
            .collect();
        match ranges {
            Some(r) => cfg.schedule.step_override = Some(r),
            None => s.err("sensitive_steps", "expected an array of [start, end) integer pairs"),
        }
    }
    if let Some(arr) = s.array("points") {
        let mut points = Vec::new();
        for (i, v) in arr.iter().enumerate() {
            let path = format!("dvfs.points[{i}]");
            match v.as_table() {
                Some(t) => points.extend(parse_point(t, &path, &mut errs)),
                None => errs.push(ConfigError {
                    path,
                    reason: "expected a table".into(),
                }),
            }
        }
        cfg.points = points;
    }

    if let Some(t) = sub_table(&root, "monitor", &mut errs) {
        let mut s = Section::new("monitor", Some(t), &["target_ber", "band", "window", "ladder", "start"], &mut errs);
        let ladder = s
            .strings("ladder")
            .unwrap_or_else(|| cfg.points.iter().map(|p| p.name.clone()).collect());
        cfg.monitor = Some(MonitorSettings {
            target_ber: s.float("target_ber", TARGET_BER),
            band: s.float("band", 2.0),
            window: s.count("window", 64),
            start: s.count("start", 0),
            ladder,
        });
    }

    let t = sub_table(&root, "characterize", &mut errs);
    let mut s = Section::new(
        "characterize",
        t,
        &["trials", "seed", "bits", "steps", "blocks", "step", "bit", "trace_step", "trace_bit"],
        &mut errs,
    );
    let c = &mut cfg.characterize;
    c.trials = s.count("trials", c.trials);
    c.seed = s.seed("seed", c.seed);
    c.bits = s
        .counts("bits")
        .map(|v| v.into_iter().map(|b| b.min(u8::MAX as usize) as u8).collect());
    c.steps = s.counts("steps");
    c.blocks = s.strings("blocks");
    c.step = s.count("step", c.step);
    c.bit = s.bit("bit", c.bit);
    c.trace_step = s.count("trace_step", c.trace_step);
    c.trace_bit = s.bit("trace_bit", c.trace_bit);

    cfg.check(&mut errs);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn seed_value(seed: u64) -> Value {
    match i64::try_from(seed) {
        Ok(i) => Value::Integer(i),
        Err(_) => Value::String(seed.to_string()),
    }
}

fn table<const N: usize>(entries: [(&str, Value); N]) -> Value {
    Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn int(n: usize) -> Value {
    Value::Integer(n as i64)
}

fn strings(v: &[String]) -> Value {
    Value::Array(v.iter().cloned().map(Value::String).collect())
}

fn ints(v: impl IntoIterator<Item = usize>) -> Value {
    Value::Array(v.into_iter().map(int).collect())
}

/// Renders `cfg` as a document that [`parse_config`] maps back to `cfg`.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut root = Table::new();
    root.insert("seed".into(), seed_value(cfg.seed));
    root.insert("out_dir".into(), Value::String(cfg.out_dir.to_string_lossy().into_owned()));
    let m = &cfg.model;
    root.insert(
        "workload".into(),
        table([
            ("dim", int(m.dim)),
            ("depth", int(m.depth)),
            ("steps", int(m.steps)),
            ("damping", Value::Float(m.damping)),
            ("body_gain", Value::Float(m.body_gain)),
            ("embed_gain", Value::Float(m.embed_gain)),
            ("seed", seed_value(m.seed)),
        ]),
    );
    root.insert(
        "accelerator".into(),
        table([("arrays", int(cfg.accel.arrays)), ("array_size", int(cfg.accel.array_size))]),
    );
    root.insert(
        "energy".into(),
        table([
            ("abft_overhead", Value::Float(cfg.energy.abft_overhead)),
            ("static_power_w", Value::Float(cfg.energy.static_power_w)),
        ]),
    );
    let mem = &cfg.mem;
    root.insert(
        "memory".into(),
        table([
            ("dram_row_bytes", int(mem.dram_row_bytes)),
            ("cache_line_bytes", int(mem.cache_line_bytes)),
            ("activation_energy_pj", Value::Float(mem.activation_energy_pj)),
            ("byte_energy_pj", Value::Float(mem.byte_energy_pj)),
            ("bandwidth_bytes_per_s", Value::Float(mem.bandwidth_bytes_per_s)),
            ("activation_latency_ns", Value::Float(mem.activation_latency_ns)),
        ]),
    );
    root.insert(
        "abft".into(),
        table([("enabled", Value::Boolean(cfg.abft)), ("theta", Value::Integer(cfg.theta))]),
    );
    let layout = match cfg.layout {
        CheckpointLayout::RowMajor => "row_major",
        CheckpointLayout::TilePacked => "tile_packed",
    };
    root.insert(
        "checkpoint".into(),
        table([
            ("interval", int(cfg.interval)),
            ("layout", Value::String(layout.into())),
            ("embedding", Value::Boolean(cfg.checkpoint_embedding)),
        ]),
    );
    root.insert("recovery".into(), table([("policy", Value::String(cfg.policy.name().into()))]));
    let faults = match cfg.faults {
        FaultSetting::OperatingPoint => table([("mode", Value::String("operating_point".into()))]),
        FaultSetting::Random(ber) => table([("mode", Value::String("random".into())), ("ber", Value::Float(ber))]),
        FaultSetting::None => table([("mode", Value::String("none".into()))]),
    };
    root.insert("faults".into(), faults);
    let mut dvfs = Table::new();
    dvfs.insert("nominal".into(), Value::String(cfg.nominal_point.clone()));
    dvfs.insert("aggressive".into(), Value::String(cfg.aggressive_point.clone()));
    dvfs.insert("early_steps".into(), int(cfg.schedule.early_steps));
    if let Some(ranges) = &cfg.schedule.step_override {
        let pairs = ranges.iter().map(|r| ints([r.start, r.end])).collect();
        dvfs.insert("sensitive_steps".into(), Value::Array(pairs));
    }
    if let Some(blocks) = &cfg.schedule.block_override {
        dvfs.insert("sensitive_blocks".into(), strings(blocks));
    }
    let points = cfg
        .points
        .iter()
        .map(|p| {
            table([
                ("name", Value::String(p.name.clone())),
                ("voltage", Value::Float(p.voltage)),
                ("frequency_ghz", Value::Float(p.frequency_ghz)),
                ("ber", Value::Float(p.ber)),
                ("energy_per_mac_pj", Value::Float(p.energy_per_mac_pj)),
            ])
        })
        .collect();
    dvfs.insert("points".into(), Value::Array(points));
    root.insert("dvfs".into(), Value::Table(dvfs));
    if let Some(mon) = &cfg.monitor {
        root.insert(
            "monitor".into(),
            table([
                ("target_ber", Value::Float(mon.target_ber)),
                ("band", Value::Float(mon.band)),
                ("window", int(mon.window)),
                ("ladder", strings(&mon.ladder)),
                ("start", int(mon.start)),
            ]),
        );
    }
    let c = &cfg.characterize;
    let mut ch = Table::new();
    ch.insert("trials".into(), int(c.trials));
    ch.insert("seed".into(), seed_value(c.seed));
    if let Some(bits) = &c.bits {
        ch.insert("bits".into(), ints(bits.iter().map(|&b| b as usize)));
    }
    if let Some(steps) = &c.steps {
        ch.insert("steps".into(), ints(steps.iter().copied()));
    }
    if let Some(blocks) = &c.blocks {
        ch.insert("blocks".into(), strings(blocks));
    }
    ch.insert("step".into(), int(c.step));
    ch.insert("bit".into(), int(c.bit as usize));
    ch.insert("trace_step".into(), int(c.trace_step));
    ch.insert("trace_bit".into(), int(c.trace_bit as usize));
    root.insert("characterize".into(), Value::Table(ch));
    root.to_string()
}
