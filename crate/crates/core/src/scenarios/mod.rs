//! Named, seeded experiments producing figure-equivalent tables.

mod aes_key;
mod capacity;
pub mod config;
mod kaslr;
mod kernel;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::covert::{CovertError, ProbeReading};
use crate::memory::{AddressSpace, PageTableEntry};
use crate::pipeline::{ProgramError, RunOptions, SimError, Simulator};
use crate::profile::{ArchProfile, Microarch, ProfileError, UndefinedCell};
use crate::victims::{self, KernelWriterConfig, VictimError};

pub use config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ScenarioName {
    Toy,
    SbCapacity,
    KernelLeak,
    AesKey,
    Kaslr,
    Assist,
    Matrix,
    Countermeasure,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 8] = [
        ScenarioName::Toy,
        ScenarioName::SbCapacity,
        ScenarioName::KernelLeak,
        ScenarioName::AesKey,
        ScenarioName::Kaslr,
        ScenarioName::Assist,
        ScenarioName::Matrix,
        ScenarioName::Countermeasure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioName::Toy => "toy",
            ScenarioName::SbCapacity => "sb-capacity",
            ScenarioName::KernelLeak => "kernel-leak",
            ScenarioName::AesKey => "aes-key",
            ScenarioName::Kaslr => "kaslr",
            ScenarioName::Assist => "assist",
            ScenarioName::Matrix => "matrix",
            ScenarioName::Countermeasure => "countermeasure",
        }
    }

    /// Whether one run covers several profiles (the table has a profile column).
    pub fn multi_profile(self) -> bool {
        matches!(
            self,
            ScenarioName::SbCapacity | ScenarioName::KernelLeak | ScenarioName::Matrix | ScenarioName::Countermeasure
        )
    }

    pub fn default_trials(self) -> usize {
        match self {
            ScenarioName::Toy | ScenarioName::Assist | ScenarioName::Matrix | ScenarioName::AesKey => 1,
            ScenarioName::SbCapacity => 100,
            ScenarioName::KernelLeak | ScenarioName::Kaslr | ScenarioName::Countermeasure => 1000,
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// Bad parameters; nothing was simulated.
    #[error("{0}")]
    Usage(String),
    /// The simulation ran but broke one of its own contracts.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl From<ProgramError> for ScenarioError {
    fn from(e: ProgramError) -> Self {
        ScenarioError::Sim(e.into())
    }
}

impl From<CovertError> for ScenarioError {
    fn from(e: CovertError) -> Self {
        ScenarioError::Usage(e.to_string())
    }
}

impl From<VictimError> for ScenarioError {
    fn from(e: VictimError) -> Self {
        ScenarioError::Usage(e.to_string())
    }
}

impl From<UndefinedCell> for ScenarioError {
    fn from(e: UndefinedCell) -> Self {
        ScenarioError::Contract(e.to_string())
    }
}

impl From<ProfileError> for ScenarioError {
    fn from(e: ProfileError) -> Self {
        ScenarioError::Usage(e.to_string())
    }
}

/// Extra page-table entry applied on top of the lab layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageOverride {
    pub vpn: u64,
    pub pte: PageTableEntry,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub profiles: Vec<ArchProfile>,
    /// Falls back to the scenario's desk-scale default.
    pub trials: Option<usize>,
    pub seed: u64,
    pub overrides: BTreeMap<String, String>,
    /// `None` runs the kernel scenarios both with and without isolation.
    pub kpti: Option<bool>,
    pub hyperthread: bool,
    pub countermeasure: bool,
    pub trace: bool,
    pub dump_sb: bool,
    pub jobs: Option<usize>,
    pub pages: Vec<PageOverride>,
    pub kernel_writer: Option<KernelWriterConfig>,
}

pub const DEFAULT_SEED: u64 = 0x5eed_f411;

impl ScenarioSpec {
    /// Defaults: every shipped profile for multi-profile scenarios,
    /// Skylake otherwise.
    pub fn new(name: ScenarioName) -> Self {
        let profiles = if name.multi_profile() {
            Microarch::ALL.iter().map(|&a| ArchProfile::builtin(a)).collect()
        } else {
            vec![ArchProfile::builtin(Microarch::Skylake)]
        };
        ScenarioSpec {
            name,
            profiles,
            trials: None,
            seed: DEFAULT_SEED,
            overrides: BTreeMap::new(),
            kpti: None,
            hyperthread: false,
            countermeasure: false,
            trace: false,
            dump_sb: false,
            jobs: None,
            pages: Vec::new(),
            kernel_writer: None,
        }
    }

    pub fn with_profile(mut self, arch: Microarch) -> Self {
        self.profiles = vec![ArchProfile::builtin(arch)];
        self
    }

    pub fn with_profiles(mut self, profiles: Vec<ArchProfile>) -> Self {
        self.profiles = profiles;
        self
    }

    pub fn with_trials(mut self, trials: usize) -> Self {
        self.trials = Some(trials);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_override(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or(self.name.default_trials())
    }
}

/// A proportion with its Wilson 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub label: String,
    pub successes: u64,
    pub trials: u64,
    pub probability: f64,
    pub low: f64,
    pub high: f64,
}

impl Estimate {
    pub fn new(label: impl Into<String>, successes: u64, trials: u64) -> Self {
        let (low, high) = wilson_interval(successes, trials);
        let probability = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        Estimate { label: label.into(), successes, trials, probability, low, high }
    }

    pub fn contains(&self, p: f64) -> bool {
        self.low <= p && p <= self.high
    }
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z * Z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub profiles: Vec<String>,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub summary: Vec<(String, String)>,
    pub estimates: Vec<Estimate>,
    /// Broken expectations (matrix mismatches and the like).
    pub violations: Vec<String>,
    #[serde(skip)]
    pub diagnostics: Vec<String>,
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl ScenarioReport {
    fn new(spec: &ScenarioSpec, columns: &[&str]) -> Self {
        ScenarioReport {
            name: spec.name.to_string(),
            profiles: spec.profiles.iter().map(|p| p.name().to_string()).collect(),
            seed: spec.seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: Vec::new(),
            estimates: Vec::new(),
            violations: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    fn push_row(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn estimate(&self, label: &str) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.label == label)
    }

    /// Index of a column by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Header, rows, then one `# key=value` line per summary entry.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).expect("in-memory write");
        }
        let mut out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells");
        for (k, v) in &self.summary {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Map<String, Value>> = self
            .rows
            .iter()
            .map(|r| self.columns.iter().cloned().zip(r.iter().cloned()).collect())
            .collect();
        let doc = serde_json::json!({
            "scenario": self.name,
            "profiles": self.profiles,
            "seed": self.seed,
            "rows": rows,
            "summary": self.summary.iter().cloned().collect::<BTreeMap<_, _>>(),
            "estimates": self.estimates,
            "violations": self.violations,
        });
        serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
    }
}

/// Overrides with type checking; unknown keys are rejected at the end.
pub(crate) struct Overrides<'a> {
    map: &'a BTreeMap<String, String>,
    used: BTreeSet<&'a str>,
}

impl<'a> Overrides<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> Self {
        Overrides { map, used: BTreeSet::new() }
    }

    pub(crate) fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.insert(key);
        self.map.get(key).map(String::as_str)
    }

    pub(crate) fn get<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T, ScenarioError> {
        match self.raw(key) {
            None => Ok(default),
            Some(text) => parse_value(text).ok_or_else(|| ScenarioError::Usage(format!("bad value `{text}` for `{key}`"))),
        }
    }

    fn finish(self) -> Result<(), ScenarioError> {
        let unknown: Vec<&str> = self
            .map
            .keys()
            .map(String::as_str)
            .filter(|k| !self.used.contains(k) && !PROFILE_KEYS.contains(k) && !k.starts_with("leak."))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Usage(format!("unknown override(s): {}", unknown.join(", "))))
        }
    }
}

/// Accepts `0x` hex for integer types.
fn parse_value<T: FromStr>(text: &str) -> Option<T> {
    if let Some(hex) = text.strip_prefix("0x") {
        if let Ok(n) = u64::from_str_radix(hex, 16) {
            return n.to_string().parse().ok();
        }
    }
    text.parse().ok()
}

const PROFILE_KEYS: [&str; 9] = [
    "name",
    "sb_capacity",
    "cache_hit_cycles",
    "cache_miss_cycles",
    "sb_drain_cycles_per_entry",
    "kernel_return_cycles",
    "wtf_success_rate",
    "transient_base_uops",
    "transient_stores_per_extra_uop",
];

/// Rewrites profile fields named in the overrides through the profile
/// config format.
fn apply_profile_overrides(profile: &ArchProfile, overrides: &BTreeMap<String, String>) -> Result<ArchProfile, ScenarioError> {
    let touched: Vec<(&String, &String)> = overrides
        .iter()
        .filter(|(k, _)| PROFILE_KEYS.contains(&k.as_str()) || k.starts_with("leak."))
        .collect();
    if touched.is_empty() {
        return Ok(profile.clone());
    }
    let mut lines: BTreeMap<String, String> = profile
        .to_config_string()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect();
    for (k, v) in touched {
        if !lines.contains_key(k) {
            return Err(ScenarioError::Usage(format!("unknown profile field `{k}`")));
        }
        lines.insert(k.clone(), v.clone());
    }
    let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    Ok(ArchProfile::from_config_str(&text)?)
}

/// Shared plumbing for one scenario run.
pub(crate) struct Ctx<'a> {
    pub spec: &'a ScenarioSpec,
    pub pool: rayon::ThreadPool,
}

impl Ctx<'_> {
    /// Runs `f` for trial indices `0..n` on the worker pool, keeping one
    /// state per worker; the result order follows the trial index.
    pub fn par_trials<S, T, I, F>(&self, n: usize, init: I, f: F) -> Result<Vec<T>, ScenarioError>
    where
        T: Send,
        I: Fn() -> S + Sync + Send,
        F: Fn(&mut S, usize) -> Result<T, ScenarioError> + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map_init(&init, |s, i| f(s, i)).collect())
    }

    /// The lab address space plus configured page overrides.
    pub fn lab_space(&self) -> AddressSpace {
        let mut space = victims::lab_space();
        for p in &self.spec.pages {
            space.map(p.vpn, p.pte);
        }
        space
    }

    pub fn simulator(&self, profile: &ArchProfile, space: AddressSpace) -> Simulator {
        let mut sim = Simulator::new(profile.clone(), space)
            .with_options(RunOptions { trace: self.spec.trace, ..RunOptions::default() })
            .with_seed(self.spec.seed);
        sim.store_buffer_mut().set_partitioned(self.spec.hyperthread);
        sim
    }
}

/// Independent 64-bit seed for a named sub-experiment.
pub(crate) fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    // splitmix64 finaliser
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub(crate) fn hits_text(reading: &ProbeReading) -> String {
    reading.hits.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
}

pub fn run(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    if spec.trials == Some(0) {
        return Err(ScenarioError::Usage("trials must be at least 1".into()));
    }
    if spec.profiles.is_empty() {
        return Err(ScenarioError::Usage("no profile selected".into()));
    }
    if !spec.name.multi_profile() && spec.profiles.len() > 1 {
        return Err(ScenarioError::Usage(format!("scenario `{}` runs on exactly one profile", spec.name)));
    }
    let mut spec = spec.clone();
    spec.profiles = spec
        .profiles
        .iter()
        .map(|p| apply_profile_overrides(p, &spec.overrides))
        .collect::<Result<_, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.unwrap_or(0))
        .build()
        .map_err(|e| ScenarioError::Usage(format!("worker pool: {e}")))?;
    let ctx = Ctx { spec: &spec, pool };
    let mut ov = Overrides::new(&spec.overrides);
    let report = match spec.name {
        ScenarioName::Toy => toy::run_toy(&ctx, &mut ov),
        ScenarioName::Assist => toy::run_assist(&ctx, &mut ov),
        ScenarioName::Matrix => toy::run_matrix(&ctx, &mut ov),
        ScenarioName::SbCapacity => capacity::run_sb_capacity(&ctx, &mut ov),
        ScenarioName::KernelLeak => kernel::run_kernel_leak(&ctx, &mut ov),
        ScenarioName::Countermeasure => kernel::run_countermeasure(&ctx, &mut ov),
        ScenarioName::Kaslr => kaslr::run_kaslr(&ctx, &mut ov),
        ScenarioName::AesKey => aes_key::run_aes_key(&ctx, &mut ov),
    }?;
    ov.finish()?;
    Ok(report)
}

pub fn run_toy(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::Toy, ..spec.clone() })
}

pub fn run_sb_capacity(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::SbCapacity, ..spec.clone() })
}

pub fn run_kernel_leak(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::KernelLeak, ..spec.clone() })
}

pub fn run_aes_key(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::AesKey, ..spec.clone() })
}

pub fn run_kaslr(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::Kaslr, ..spec.clone() })
}

pub fn run_assist(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::Assist, ..spec.clone() })
}

pub fn run_matrix(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::Matrix, ..spec.clone() })
}

pub fn run_countermeasure(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    run(&ScenarioSpec { name: ScenarioName::Countermeasure, ..spec.clone() })
}
