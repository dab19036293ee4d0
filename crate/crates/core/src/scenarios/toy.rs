use serde_json::json;

use super::{hits_text, Ctx, Overrides, ScenarioError, ScenarioReport};
use crate::covert::ProbeReading;
use crate::memory::PAGE_SIZE;
use crate::pipeline::{ExecutionStats, MicroOp, Program, Reg, Simulator};
use crate::profile::{ArchProfile, FaultCause, Suppression};
use crate::store_buffer::HwThread;
use crate::victims::{self, layout};

struct ToyParams {
    value: u8,
    offset: u64,
    threshold: u64,
    noise: f64,
}

fn toy_params(ov: &mut Overrides<'_>, profile: &ArchProfile) -> Result<ToyParams, ScenarioError> {
    let params = ToyParams {
        value: ov.get("value", 42u8)?,
        offset: ov.get("offset", 7u64)?,
        threshold: ov.get("threshold", profile.default_threshold())?,
        noise: ov.get("noise", 0.0f64)?,
    };
    if params.offset >= PAGE_SIZE {
        return Err(ScenarioError::Usage(format!("offset {:#x} outside the page", params.offset)));
    }
    Ok(params)
}

fn parse_named<T: std::str::FromStr<Err = impl std::fmt::Display>>(
    ov: &mut Overrides<'_>,
    key: &'static str,
) -> Result<Option<T>, ScenarioError> {
    ov.raw(key)
        .map(|s| s.parse::<T>().map_err(|e| ScenarioError::Usage(format!("`{key}`: {e}"))))
        .transpose()
}

/// Lab core for a leak gadget with `cause`: the attacker page is revoked
/// when the gadget relies on it being non-present.
pub(super) fn gadget_sim(ctx: &Ctx<'_>, profile: &ArchProfile, cause: FaultCause) -> Result<Simulator, ScenarioError> {
    let mut space = ctx.lab_space();
    if cause == FaultCause::UserNotPresent {
        space.revoke(layout::ATTACKER_VPN).map_err(crate::pipeline::SimError::from)?;
    }
    Ok(ctx.simulator(profile, space))
}

/// Victim program, then attacker program, then Flush+Reload.
fn leak_once(
    ctx: &Ctx<'_>,
    sim: &mut Simulator,
    trial: usize,
    victim: &Program,
    attacker: &Program,
    params: &ToyParams,
    diagnostics: &mut Vec<String>,
) -> Result<(ProbeReading, ExecutionStats), ScenarioError> {
    let probe = victims::probe_array();
    sim.reset_microarch();
    sim.reseed_stream(ctx.spec.seed, trial as u64);
    let (space, cache) = sim.space_and_cache();
    probe.prime(space, cache)?;
    let mut stats = sim.run(victim, HwThread::T0)?;
    if ctx.spec.dump_sb {
        diagnostics.push(format!("store buffer before the attacker runs (trial {trial}):"));
        diagnostics.extend(sim.store_buffer().dump_table().lines().map(str::to_string));
    }
    let attacker_stats = sim.run(attacker, HwThread::T0)?;
    stats.faults_raised += attacker_stats.faults_raised;
    stats.aborted_transactions += attacker_stats.aborted_transactions;
    stats.terminated_at = attacker_stats.terminated_at;
    stats.windows.extend(attacker_stats.windows);
    stats.registers = attacker_stats.registers;
    diagnostics.extend(sim.take_trace().iter().map(|e| e.to_string()));
    let mut noise_rng = rand_chacha::ChaCha8Rng::clone(sim.rng());
    let (space, cache) = sim.space_and_cache();
    probe.inject_noise(space, cache, params.noise, &mut noise_rng)?;
    Ok((probe.decode(space, cache, params.threshold)?, stats))
}

fn victim_store(params: &ToyParams) -> Result<Program, ScenarioError> {
    Ok(Program::new(vec![MicroOp::Store { vaddr: layout::page(layout::VICTIM_VPN) + params.offset, value: params.value }])?)
}

fn countermeasure_prefix(ctx: &Ctx<'_>) -> Vec<MicroOp> {
    if ctx.spec.countermeasure {
        vec![MicroOp::Fence]
    } else {
        Vec::new()
    }
}

pub(super) fn run_toy(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let profile = &spec.profiles[0];
    let params = toy_params(ov, profile)?;
    let suppression = parse_named::<Suppression>(ov, "suppression")?.unwrap_or(Suppression::Tsx);
    if suppression == Suppression::NoneRequired {
        return Err(ScenarioError::Usage("the toy attack needs a suppression mechanism; see the assist scenario".into()));
    }
    let cause = match parse_named::<FaultCause>(ov, "cause")? {
        Some(FaultCause::None) => return Err(ScenarioError::Usage("cause must be a faulting one".into())),
        Some(c) => c,
        None => victims::attack_cause(profile, Suppression::Tsx).unwrap_or(FaultCause::UserNotPresent),
    };

    let victim = victim_store(&params)?;
    let mut attacker_ops = countermeasure_prefix(ctx);
    attacker_ops.extend(victims::leak_gadget(cause, suppression, params.offset));
    let attacker = Program::new(attacker_ops)?;

    let mut report = ScenarioReport::new(spec, &["slot", "latency"]);
    let mut sim = gadget_sim(ctx, profile, cause)?;
    let mut recovered_trials = 0;
    let mut last_hit = None;
    let mut faults = 0;
    let mut aborts = 0;
    for trial in 0..spec.trials() {
        let (reading, stats) = leak_once(ctx, &mut sim, trial, &victim, &attacker, &params, &mut report.diagnostics)?;
        for (slot, latency) in reading.latencies.iter().enumerate() {
            report.push_row(vec![json!(slot), json!(latency)]);
        }
        last_hit = reading.single_hit();
        recovered_trials += usize::from(last_hit == Some(params.value));
        faults += stats.faults_raised;
        aborts += stats.aborted_transactions;
    }
    report.note("profile", profile.name());
    report.note("cause", cause);
    report.note("suppression", suppression);
    report.note("leak_permitted", profile.leak_permitted(cause, suppression)?);
    report.note("recovered", last_hit.map_or("none".to_string(), |v| v.to_string()));
    report.note("recovered_trials", format!("{recovered_trials}/{}", spec.trials()));
    report.note("faults_raised", faults);
    report.note("aborted_transactions", aborts);
    Ok(report)
}

pub(super) fn run_assist(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let profile = &spec.profiles[0];
    let params = toy_params(ov, profile)?;
    let own_value: u8 = ov.get("own_value", 0)?;
    let clear_accessed: bool = ov.get("clear_accessed", true)?;

    let attacker_vaddr = layout::page(layout::ATTACKER_VPN) + params.offset;
    let r0 = Reg::new(0).expect("valid");
    let victim = victim_store(&params)?;
    let mut attacker_ops = countermeasure_prefix(ctx);
    if clear_accessed {
        attacker_ops.push(MicroOp::ClearAccessedBit { vaddr: attacker_vaddr });
    }
    attacker_ops.push(MicroOp::Load { vaddr: attacker_vaddr, dst: r0 });
    attacker_ops.push(victims::probe_array().touch_op(r0));
    let attacker = Program::new(attacker_ops)?;

    let mut sim = ctx.simulator(profile, ctx.lab_space());
    sim.memory_mut().write(layout::ATTACKER_VPN * PAGE_SIZE + params.offset, own_value);

    let mut report = ScenarioReport::new(spec, &["slot", "latency"]);
    let (mut faults, mut assists, mut recovered_trials) = (0, 0, 0);
    let mut recovered = None;
    let mut last_hits = String::new();
    for trial in 0..spec.trials() {
        let (reading, stats) = leak_once(ctx, &mut sim, trial, &victim, &attacker, &params, &mut report.diagnostics)?;
        for (slot, latency) in reading.latencies.iter().enumerate() {
            report.push_row(vec![json!(slot), json!(latency)]);
        }
        // the architectural load of the attacker's own byte is not a leak
        let leaked: Vec<u8> = reading.hits.iter().copied().filter(|&v| v != own_value).collect();
        recovered = (leaked.len() == 1).then(|| leaked[0]);
        recovered_trials += usize::from(recovered == Some(params.value));
        faults += stats.faults_raised;
        assists += stats.windows.len();
        last_hits = hits_text(&reading);
        if stats.registers[0] != own_value {
            return Err(ScenarioError::Contract(format!(
                "architectural load returned {} instead of the page's own value {own_value}",
                stats.registers[0]
            )));
        }
    }
    let accessed = sim.user_space().entry(layout::ATTACKER_VPN).is_some_and(|e| e.accessed);
    report.note("profile", profile.name());
    report.note("recovered", recovered.map_or("none".to_string(), |v| v.to_string()));
    report.note("recovered_trials", format!("{recovered_trials}/{}", spec.trials()));
    report.note("hits", last_hits);
    report.note("own_value", own_value);
    report.note("faults_raised", faults);
    report.note("assist_windows", assists);
    report.note("accessed_bit_after", accessed);
    Ok(report)
}

pub(super) fn run_matrix(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let mut report = ScenarioReport::new(spec, &["profile", "cause", "suppression", "leaked"]);
    let mut cells = 0;
    for profile in &spec.profiles {
        let params = toy_params(ov, profile)?;
        let victim = victim_store(&params)?;
        let builtin = ArchProfile::builtin(profile.arch());
        let mut matches_builtin = true;
        for cause in FaultCause::FAULTING {
            for suppression in Suppression::MECHANISMS {
                let mut ops = countermeasure_prefix(ctx);
                ops.extend(victims::leak_gadget(cause, suppression, params.offset));
                let attacker = Program::new(ops)?;
                let mut sim = gadget_sim(ctx, profile, cause)?;
                let mut leaks = 0;
                for trial in 0..spec.trials() {
                    let (reading, _) = leak_once(ctx, &mut sim, trial, &victim, &attacker, &params, &mut report.diagnostics)?;
                    leaks += usize::from(reading.single_hit() == Some(params.value));
                }
                let leaked = 2 * leaks > spec.trials();
                let expected = profile.leak_permitted(cause, suppression)?;
                if leaked != expected && !ctx.spec.countermeasure {
                    report.violations.push(format!(
                        "{}: ({cause}, {suppression}) observed {leaked}, configured {expected}",
                        profile.name()
                    ));
                }
                matches_builtin &= builtin.leak_permitted(cause, suppression)? == leaked;
                report.push_row(vec![json!(profile.name()), json!(cause.name()), json!(suppression.name()), json!(leaked)]);
                cells += 1;
            }
        }
        report.note(&format!("matches_builtin.{}", profile.name()), matches_builtin);
    }
    report.note("cells", cells);
    report.note("mismatches", report.violations.len());
    Ok(report)
}
