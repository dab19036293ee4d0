//! Per-microarchitecture behavior: store-buffer geometry, timing constants and
//! the fault-cause × suppression leak matrix.
//!
//! Profiles are plain values. The three shipped profiles come from
//! [`ArchProfile::builtin`]; hypothetical ones can be described in a
//! `key = value` text file and loaded with [`ArchProfile::from_config_str`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Microarch {
    Skylake,
    KabyLake,
    CoffeeLakeR,
}

impl Microarch {
    pub const ALL: [Microarch; 3] = [Microarch::Skylake, Microarch::KabyLake, Microarch::CoffeeLakeR];

    pub fn name(self) -> &'static str {
        match self {
            Microarch::Skylake => "skylake",
            Microarch::KabyLake => "kabylake",
            Microarch::CoffeeLakeR => "coffeelake-r",
        }
    }
}

impl fmt::Display for Microarch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Microarch {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "skylake" | "skl" => Ok(Microarch::Skylake),
            "kabylake" | "kaby-lake" | "kbl" => Ok(Microarch::KabyLake),
            "coffeelake-r" | "coffeelaker" | "coffee-lake-r" | "cfl-r" => Ok(Microarch::CoffeeLakeR),
            _ => Err(ProfileError::UnknownArch(s.to_string())),
        }
    }
}

/// Why a memory access faults. `None` marks an architecturally legal access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultCause {
    UserNotPresent,
    KernelData,
    KernelCode,
    KernelNotPresent,
    SmapViolation,
    None,
}

impl FaultCause {
    /// The five faulting causes, in leak-matrix row order.
    pub const FAULTING: [FaultCause; 5] = [
        FaultCause::UserNotPresent,
        FaultCause::KernelData,
        FaultCause::KernelCode,
        FaultCause::KernelNotPresent,
        FaultCause::SmapViolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultCause::UserNotPresent => "user-not-present",
            FaultCause::KernelData => "kernel-data",
            FaultCause::KernelCode => "kernel-code",
            FaultCause::KernelNotPresent => "kernel-not-present",
            FaultCause::SmapViolation => "smap",
            FaultCause::None => "none",
        }
    }

    fn row(self) -> Option<usize> {
        FaultCause::FAULTING.iter().position(|c| *c == self)
    }
}

impl fmt::Display for FaultCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultCause {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        [FaultCause::None]
            .iter()
            .chain(FaultCause::FAULTING.iter())
            .copied()
            .find(|c| c.name() == key)
            .ok_or_else(|| ProfileError::UnknownCause(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Suppression {
    Tsx,
    BranchMispredict,
    /// Only meaningful for microcode-assist windows, which raise no fault.
    NoneRequired,
}

impl Suppression {
    /// The two fault-suppressing mechanisms, in leak-matrix column order.
    pub const MECHANISMS: [Suppression; 2] = [Suppression::Tsx, Suppression::BranchMispredict];

    pub fn name(self) -> &'static str {
        match self {
            Suppression::Tsx => "tsx",
            Suppression::BranchMispredict => "branch",
            Suppression::NoneRequired => "none",
        }
    }

    fn column(self) -> Option<usize> {
        Suppression::MECHANISMS.iter().position(|s| *s == self)
    }
}

impl fmt::Display for Suppression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suppression {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsx" => Ok(Suppression::Tsx),
            "branch" | "branch-mispredict" | "mispredict" => Ok(Suppression::BranchMispredict),
            "none" | "none-required" => Ok(Suppression::NoneRequired),
            _ => Err(ProfileError::UnknownSuppression(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("unknown microarchitecture `{0}`")]
    UnknownArch(String),
    #[error("unknown fault cause `{0}`")]
    UnknownCause(String),
    #[error("unknown suppression mechanism `{0}`")]
    UnknownSuppression(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("unknown profile `{0}` (not built in, no {0}.profile in $FALLOUTSIM_PROFILE_DIR, not a file)")]
    UnknownProfile(String),
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Directory searched for `<name>.profile` files.
pub const PROFILE_DIR_ENV: &str = "FALLOUTSIM_PROFILE_DIR";

/// Finds a profile by name: a shipped microarchitecture, a
/// `<name>.profile` file in `$FALLOUTSIM_PROFILE_DIR`, or a file path.
pub fn resolve_profile(name: &str) -> Result<ArchProfile, ProfileError> {
    if let Ok(arch) = name.parse::<Microarch>() {
        return Ok(ArchProfile::builtin(arch));
    }
    let mut candidates = Vec::new();
    if let Some(dir) = std::env::var_os(PROFILE_DIR_ENV) {
        candidates.push(std::path::Path::new(&dir).join(format!("{name}.profile")));
    }
    candidates.push(std::path::PathBuf::from(name));
    for path in candidates {
        if path.is_file() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ProfileError::Io { path: path.display().to_string(), msg: e.to_string() })?;
            return ArchProfile::from_config_str(&text);
        }
    }
    Err(ProfileError::UnknownProfile(name.to_string()))
}

/// Asking the matrix about a cell it does not define.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no leak-matrix cell for ({cause}, {suppression})")]
pub struct UndefinedCell {
    pub cause: FaultCause,
    pub suppression: Suppression,
}

/// Five fault causes × two suppression mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakMatrix {
    cells: [[bool; 2]; 5],
}

impl LeakMatrix {
    /// Skylake and Kaby Lake.
    pub const fn pre_coffee_lake_r() -> Self {
        LeakMatrix {
            cells: [
                [false, false], // user not present
                [true, true],   // kernel data
                [true, true],   // kernel code
                [false, false], // kernel not present
                [true, true],   // SMAP
            ],
        }
    }

    pub const fn coffee_lake_r() -> Self {
        LeakMatrix {
            cells: [
                [true, false], // user not present: TSX regression
                [false, false],
                [true, true],
                [false, false],
                [true, false],
            ],
        }
    }

    pub fn get(&self, cause: FaultCause, suppression: Suppression) -> Option<bool> {
        Some(self.cells[cause.row()?][suppression.column()?])
    }

    pub fn set(&mut self, cause: FaultCause, suppression: Suppression, leaks: bool) -> Result<(), UndefinedCell> {
        match (cause.row(), suppression.column()) {
            (Some(r), Some(c)) => {
                self.cells[r][c] = leaks;
                Ok(())
            }
            _ => Err(UndefinedCell { cause, suppression }),
        }
    }

    /// All ten cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (FaultCause, Suppression, bool)> + '_ {
        FaultCause::FAULTING.iter().enumerate().flat_map(move |(r, cause)| {
            Suppression::MECHANISMS
                .iter()
                .enumerate()
                .map(move |(c, supp)| (*cause, *supp, self.cells[r][c]))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchProfile {
    name: String,
    arch: Microarch,
    sb_capacity: usize,
    leak_matrix: LeakMatrix,
    cache_hit_cycles: u64,
    cache_miss_cycles: u64,
    sb_drain_cycles_per_entry: u64,
    kernel_return_cycles: u64,
    wtf_success_rate: f64,
    transient_base_uops: usize,
    transient_stores_per_extra_uop: usize,
}

impl ArchProfile {
    pub fn builtin(arch: Microarch) -> Self {
        let leak_matrix = match arch {
            Microarch::Skylake | Microarch::KabyLake => LeakMatrix::pre_coffee_lake_r(),
            Microarch::CoffeeLakeR => LeakMatrix::coffee_lake_r(),
        };
        ArchProfile {
            name: arch.name().to_string(),
            arch,
            sb_capacity: 56,
            leak_matrix,
            cache_hit_cycles: 50,
            cache_miss_cycles: 250,
            sb_drain_cycles_per_entry: 40,
            kernel_return_cycles: 400,
            wtf_success_rate: 1.0,
            transient_base_uops: 8,
            transient_stores_per_extra_uop: 8,
        }
    }

    /// Starts a modified copy of a shipped profile.
    pub fn builder(arch: Microarch) -> ProfileBuilder {
        ProfileBuilder { profile: ArchProfile::builtin(arch) }
    }

    /// Starts a modified copy of this profile.
    pub fn to_builder(&self) -> ProfileBuilder {
        ProfileBuilder { profile: self.clone() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arch(&self) -> Microarch {
        self.arch
    }

    pub fn sb_capacity(&self) -> usize {
        self.sb_capacity
    }

    pub fn leak_matrix(&self) -> &LeakMatrix {
        &self.leak_matrix
    }

    pub fn cache_hit_cycles(&self) -> u64 {
        self.cache_hit_cycles
    }

    pub fn cache_miss_cycles(&self) -> u64 {
        self.cache_miss_cycles
    }

    pub fn sb_drain_cycles_per_entry(&self) -> u64 {
        self.sb_drain_cycles_per_entry
    }

    pub fn kernel_return_cycles(&self) -> u64 {
        self.kernel_return_cycles
    }

    pub fn wtf_success_rate(&self) -> f64 {
        self.wtf_success_rate
    }

    pub fn transient_base_uops(&self) -> usize {
        self.transient_base_uops
    }

    pub fn transient_stores_per_extra_uop(&self) -> usize {
        self.transient_stores_per_extra_uop
    }

    /// Flush+Reload classification threshold halfway between hit and miss.
    pub fn default_threshold(&self) -> u64 {
        (self.cache_hit_cycles + self.cache_miss_cycles) / 2
    }

    /// Whether transient execution after a `cause` fault, kept alive by
    /// `suppression`, receives misforwarded store data.
    ///
    /// Microcode assists (`None`, `NoneRequired`) leak on every profile.
    pub fn leak_permitted(&self, cause: FaultCause, suppression: Suppression) -> Result<bool, UndefinedCell> {
        match (cause, suppression) {
            (FaultCause::None, Suppression::NoneRequired) => Ok(true),
            _ => self
                .leak_matrix
                .get(cause, suppression)
                .ok_or(UndefinedCell { cause, suppression }),
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name = {}\n", self.name));
        out.push_str(&format!("arch = {}\n", self.arch));
        out.push_str(&format!("sb_capacity = {}\n", self.sb_capacity));
        out.push_str(&format!("cache_hit_cycles = {}\n", self.cache_hit_cycles));
        out.push_str(&format!("cache_miss_cycles = {}\n", self.cache_miss_cycles));
        out.push_str(&format!("sb_drain_cycles_per_entry = {}\n", self.sb_drain_cycles_per_entry));
        out.push_str(&format!("kernel_return_cycles = {}\n", self.kernel_return_cycles));
        out.push_str(&format!("wtf_success_rate = {}\n", self.wtf_success_rate));
        out.push_str(&format!("transient_base_uops = {}\n", self.transient_base_uops));
        out.push_str(&format!(
            "transient_stores_per_extra_uop = {}\n",
            self.transient_stores_per_extra_uop
        ));
        for (cause, supp, leaks) in self.leak_matrix.cells() {
            out.push_str(&format!("leak.{}.{} = {}\n", cause, supp, leaks));
        }
        out
    }

    /// Parses the `key = value` profile format. Every key, including all ten
    /// `leak.<cause>.<suppression>` cells, must be present exactly once.
    pub fn from_config_str(text: &str) -> Result<Self, ProfileError> {
        let mut fields: Vec<(String, String, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ProfileError::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if fields.iter().any(|(k, _, _)| *k == key) {
                return Err(ProfileError::Parse { line: idx + 1, msg: format!("duplicate key `{key}`") });
            }
            fields.push((key, value.trim().to_string(), idx + 1));
        }

        let take = |key: &str| -> Result<(String, usize), ProfileError> {
            fields
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, v, l)| (v.clone(), *l))
                .ok_or_else(|| ProfileError::MissingKey(key.to_string()))
        };
        fn num<T: FromStr>(v: (String, usize), key: &str) -> Result<T, ProfileError> {
            v.0.parse().map_err(|_| ProfileError::Parse {
                line: v.1,
                msg: format!("`{key}` has invalid value `{}`", v.0),
            })
        }

        let arch: Microarch = take("arch")?.0.parse()?;
        let name = take("name").map(|v| v.0).unwrap_or_else(|_| arch.name().to_string());
        let mut matrix = LeakMatrix { cells: [[false; 2]; 5] };
        for cause in FaultCause::FAULTING {
            for supp in Suppression::MECHANISMS {
                let key = format!("leak.{cause}.{supp}");
                let leaks: bool = num(take(&key)?, &key)?;
                matrix.set(cause, supp, leaks).expect("defined cell");
            }
        }
        let known = |k: &str| {
            k.starts_with("leak.")
                || matches!(
                    k,
                    "name"
                        | "arch"
                        | "sb_capacity"
                        | "cache_hit_cycles"
                        | "cache_miss_cycles"
                        | "sb_drain_cycles_per_entry"
                        | "kernel_return_cycles"
                        | "wtf_success_rate"
                        | "transient_base_uops"
                        | "transient_stores_per_extra_uop"
                )
        };
        if let Some((k, _, line)) = fields.iter().find(|(k, _, _)| !known(k)) {
            return Err(ProfileError::Parse { line: *line, msg: format!("unknown key `{k}`") });
        }
        if fields.iter().filter(|(k, _, _)| k.starts_with("leak.")).count() != 10 {
            return Err(ProfileError::Invalid("leak matrix must list exactly 10 cells".into()));
        }

        let profile = ArchProfile {
            name,
            arch,
            sb_capacity: num(take("sb_capacity")?, "sb_capacity")?,
            leak_matrix: matrix,
            cache_hit_cycles: num(take("cache_hit_cycles")?, "cache_hit_cycles")?,
            cache_miss_cycles: num(take("cache_miss_cycles")?, "cache_miss_cycles")?,
            sb_drain_cycles_per_entry: num(take("sb_drain_cycles_per_entry")?, "sb_drain_cycles_per_entry")?,
            kernel_return_cycles: num(take("kernel_return_cycles")?, "kernel_return_cycles")?,
            wtf_success_rate: num(take("wtf_success_rate")?, "wtf_success_rate")?,
            transient_base_uops: num(take("transient_base_uops")?, "transient_base_uops")?,
            transient_stores_per_extra_uop: num(
                take("transient_stores_per_extra_uop")?,
                "transient_stores_per_extra_uop",
            )?,
        };
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<(), ProfileError> {
        if self.sb_capacity < 2 {
            return Err(ProfileError::Invalid("sb_capacity must be at least 2".into()));
        }
        // the threshold must fit strictly between the two latencies
        if self.cache_hit_cycles + 1 >= self.cache_miss_cycles {
            return Err(ProfileError::Invalid("cache_hit_cycles must be well below cache_miss_cycles".into()));
        }
        if self.sb_drain_cycles_per_entry == 0 {
            return Err(ProfileError::Invalid("sb_drain_cycles_per_entry must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.wtf_success_rate) {
            return Err(ProfileError::Invalid("wtf_success_rate must lie in [0, 1]".into()));
        }
        if self.transient_stores_per_extra_uop == 0 {
            return Err(ProfileError::Invalid("transient_stores_per_extra_uop must be positive".into()));
        }
        Ok(())
    }
}

/// Produces a validated [`ArchProfile`] with some fields changed.
#[derive(Debug, Clone)]
pub struct ProfileBuilder {
    profile: ArchProfile,
}

impl ProfileBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.profile.name = name.into();
        self
    }

    pub fn sb_capacity(mut self, entries: usize) -> Self {
        self.profile.sb_capacity = entries;
        self
    }

    pub fn leak(mut self, cause: FaultCause, suppression: Suppression, leaks: bool) -> Self {
        // undefined cells are silently ignored; they can never be queried
        let _ = self.profile.leak_matrix.set(cause, suppression, leaks);
        self
    }

    pub fn cache_cycles(mut self, hit: u64, miss: u64) -> Self {
        self.profile.cache_hit_cycles = hit;
        self.profile.cache_miss_cycles = miss;
        self
    }

    pub fn sb_drain_cycles_per_entry(mut self, cycles: u64) -> Self {
        self.profile.sb_drain_cycles_per_entry = cycles;
        self
    }

    pub fn kernel_return_cycles(mut self, cycles: u64) -> Self {
        self.profile.kernel_return_cycles = cycles;
        self
    }

    pub fn wtf_success_rate(mut self, rate: f64) -> Self {
        self.profile.wtf_success_rate = rate;
        self
    }

    pub fn transient_budget(mut self, base_uops: usize, stores_per_extra_uop: usize) -> Self {
        self.profile.transient_base_uops = base_uops;
        self.profile.transient_stores_per_extra_uop = stores_per_extra_uop;
        self
    }

    pub fn build(self) -> Result<ArchProfile, ProfileError> {
        self.profile.validate()?;
        Ok(self.profile)
    }
}
