//! Command-line front end. Results go to the output stream (or `-o`),
//! diagnostics to the error stream.
//!
//! Exit codes: 0 success, 1 contract violation or simulation failure,
//! 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::covert::ProbeArray;
use crate::memory::PAGE_SIZE;
use crate::pipeline::{Program, RunOptions, Simulator};
use crate::profile::{resolve_profile, ArchProfile, Microarch};
use crate::scenarios::{self, ScenarioConfig, ScenarioError, ScenarioName, ScenarioSpec};
use crate::store_buffer::HwThread;
use crate::victims::{self, layout};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "falloutsim", version, about = "Store-buffer leakage simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a named scenario.
    Run(RunArgs),
    /// Execute a µOP program file on the lab address space.
    Exec(ExecArgs),
    /// Print a profile in the key = value file format.
    Profile {
        /// Built-in name, name in $FALLOUTSIM_PROFILE_DIR, or a file path.
        name: String,
    },
    /// List scenarios and built-in profiles.
    List,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// toy, sb-capacity, kernel-leak, aes-key, kaslr, assist, matrix, countermeasure
    scenario: Option<String>,
    /// Profile to run on; repeatable, `all` for every built-in one.
    #[arg(long, short)]
    profile: Vec<String>,
    #[arg(long, short)]
    trials: Option<usize>,
    /// Integer seed, or `random`.
    #[arg(long, short)]
    seed: Option<String>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Scenario or profile parameter, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// TOML scenario config; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print per-µOP events to stderr.
    #[arg(long)]
    trace: bool,
    /// Print the store buffer before the attacker runs.
    #[arg(long)]
    dump_sb: bool,
    /// Separate kernel page tables (store buffer flushed on CR3 switch).
    #[arg(long, conflicts_with = "no_kpti")]
    kpti: bool,
    #[arg(long)]
    no_kpti: bool,
    /// Sibling hyperthread active: store buffer partitioned.
    #[arg(long)]
    hyperthread: bool,
    /// Flush the store buffer when returning from the kernel.
    #[arg(long)]
    countermeasure: bool,
    /// Worker threads (default: one per core).
    #[arg(long, short)]
    jobs: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct ExecArgs {
    program: PathBuf,
    #[arg(long, short, default_value = "skylake")]
    profile: String,
    #[arg(long, short, default_value_t = scenarios::DEFAULT_SEED)]
    seed: u64,
    /// Mark the attacker page non-present first.
    #[arg(long)]
    revoke_attacker: bool,
    #[arg(long)]
    countermeasure: bool,
    #[arg(long)]
    hyperthread: bool,
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    dump_sb: bool,
}

struct Failure {
    code: i32,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, msg: msg.into() }
    }

    fn violation(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_VIOLATION, msg: msg.into() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Usage(m) => Failure::usage(m),
            other => Failure::violation(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn parse_and_run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => run_scenario(args, out, err),
        Command::Exec(args) => exec_program(args, out, err),
        Command::Profile { name } => resolve_profile(&name)
            .map_err(|e| Failure::usage(e.to_string()))
            .and_then(|p| write_out(out, p.to_config_string().as_bytes())),
        Command::List => {
            let mut text = String::from("scenarios:\n");
            for s in ScenarioName::ALL {
                text.push_str(&format!("  {s}\n"));
            }
            text.push_str("profiles:\n");
            for a in Microarch::ALL {
                text.push_str(&format!("  {a}\n"));
            }
            write_out(out, text.as_bytes())
        }
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "falloutsim: {}", f.msg);
            f.code
        }
    }
}

fn write_out(out: &mut dyn Write, bytes: &[u8]) -> Result<i32, Failure> {
    out.write_all(bytes).map_err(|e| Failure::violation(format!("writing output: {e}")))?;
    Ok(EXIT_OK)
}

fn resolve_profiles(names: &[String]) -> Result<Vec<ArchProfile>, Failure> {
    let mut profiles = Vec::new();
    for name in names {
        if name == "all" {
            profiles.extend(Microarch::ALL.iter().map(|&a| ArchProfile::builtin(a)));
        } else {
            profiles.push(resolve_profile(name).map_err(|e| Failure::usage(e.to_string()))?);
        }
    }
    Ok(profiles)
}

fn build_spec(args: &RunArgs) -> Result<ScenarioSpec, Failure> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("reading {}: {e}", path.display())))?;
            ScenarioConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::default(),
    };
    let name_text = args
        .scenario
        .clone()
        .or(config.scenario.clone())
        .ok_or_else(|| Failure::usage("no scenario given"))?;
    let name: ScenarioName = name_text.parse().map_err(Failure::usage)?;
    let mut spec = ScenarioSpec::new(name);

    let profile_names = if args.profile.is_empty() { config.profile.names() } else { args.profile.clone() };
    if !profile_names.is_empty() {
        spec.profiles = resolve_profiles(&profile_names)?;
    }
    spec.trials = args.trials.or(config.trials);
    spec.seed = match args.seed.as_deref() {
        Some("random") => rand::random(),
        Some(text) => text.parse().map_err(|_| Failure::usage(format!("bad seed `{text}`")))?,
        None => config.seed.unwrap_or(scenarios::DEFAULT_SEED),
    };
    spec.overrides = config.override_strings();
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects key=value, got `{kv}`")))?;
        spec.overrides.insert(k.trim().to_string(), v.trim().to_string());
    }
    spec.kpti = if args.kpti {
        Some(true)
    } else if args.no_kpti {
        Some(false)
    } else {
        config.kpti
    };
    spec.hyperthread = args.hyperthread || config.hyperthread.unwrap_or(false);
    spec.countermeasure = args.countermeasure || config.countermeasure.unwrap_or(false);
    spec.trace = args.trace;
    spec.dump_sb = args.dump_sb;
    spec.jobs = args.jobs.or(config.jobs);
    spec.pages = config.page_overrides().map_err(Failure::usage)?;
    spec.kernel_writer = config.kernel_writer.clone();
    Ok(spec)
}

fn run_scenario(args: RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let spec = build_spec(&args)?;
    let report = scenarios::run(&spec)?;
    for line in &report.diagnostics {
        let _ = writeln!(err, "{line}");
    }
    let body = match args.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    match &args.output {
        Some(path) => std::fs::write(path, body).map_err(|e| Failure::violation(format!("writing {}: {e}", path.display())))?,
        None => {
            write_out(out, body.as_bytes())?;
        }
    }
    for v in &report.violations {
        let _ = writeln!(err, "falloutsim: contract violation: {v}");
    }
    Ok(if report.violations.is_empty() { EXIT_OK } else { EXIT_VIOLATION })
}

fn exec_program(args: ExecArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let text = std::fs::read_to_string(&args.program)
        .map_err(|e| Failure::usage(format!("reading {}: {e}", args.program.display())))?;
    let program = Program::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.program.display())))?;
    let profile = resolve_profile(&args.profile).map_err(|e| Failure::usage(e.to_string()))?;
    let threshold = profile.default_threshold();
    let mut space = victims::lab_space();
    if args.revoke_attacker {
        space.revoke(layout::ATTACKER_VPN).expect("lab layout maps the attacker page");
    }
    let mut sim = Simulator::new(profile, space)
        .with_options(RunOptions { countermeasure_flush: args.countermeasure, trace: args.trace, ..RunOptions::default() })
        .with_seed(args.seed);
    sim.store_buffer_mut().set_partitioned(args.hyperthread);
    let probe: ProbeArray = victims::probe_array();
    let (space, cache) = sim.space_and_cache();
    probe.prime(space, cache).map_err(|e| Failure::violation(e.to_string()))?;
    let stats = sim.run(&program, HwThread::T0).map_err(|e| Failure::violation(e.to_string()))?;
    for event in sim.take_trace() {
        let _ = writeln!(err, "{event}");
    }
    if args.dump_sb {
        let _ = write!(err, "{}", sim.store_buffer().dump_table());
    }
    let (space, cache) = sim.space_and_cache();
    let reading = probe.decode(space, cache, threshold).map_err(|e| Failure::violation(e.to_string()))?;
    let doc = serde_json::json!({
        "faults_raised": stats.faults_raised,
        "aborted_transactions": stats.aborted_transactions,
        "terminated_at": stats.terminated_at,
        "registers": stats.registers,
        "transient_windows": stats.windows.len(),
        "probe_hits": reading.hits,
        "store_buffer_entries": sim.store_buffer().len(),
        "probe_base": format!("{:#x}", probe.base()),
        "page_size": PAGE_SIZE,
    });
    write_out(out, (serde_json::to_string_pretty(&doc).expect("serializable") + "\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = parse_and_run(std::iter::once("falloutsim").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn bad_profile_is_usage_error() {
        let (code, out, err) = run(&["run", "toy", "--profile", "badname"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(out.is_empty());
        assert!(err.contains("badname"));
    }

    #[test]
    fn bad_flag_and_scenario_are_usage_errors() {
        assert_eq!(run(&["run", "toy", "--frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run(&["run", "spectre"]).0, EXIT_USAGE);
        assert_eq!(run(&["run", "toy", "--set", "nonsense"]).0, EXIT_USAGE);
        assert_eq!(run(&["run", "toy", "--set", "bogus=1"]).0, EXIT_USAGE);
        assert_eq!(run(&["run", "toy", "--profile", "skylake", "--profile", "kabylake"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_goes_to_stdout() {
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("Usage"));
    }

    #[test]
    fn profile_command_prints_config() {
        let (code, out, _) = run(&["profile", "coffeelake-r"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("leak.user-not-present.tsx = true"));
    }
}
