use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{sub_seed, Ctx, Estimate, Overrides, ScenarioError, ScenarioReport};
use crate::memory::PAGE_SIZE;
use crate::pipeline::{Program, SimError, Simulator};
use crate::profile::{ArchProfile, FaultCause, Suppression};
use crate::store_buffer::HwThread;
use crate::victims::{self, layout, KernelWriterConfig};

struct KernelParams {
    k_max: usize,
    fillers: usize,
    jitter: f64,
    threshold: u64,
}

fn kernel_params(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<KernelParams, ScenarioError> {
    let default_k = ctx.spec.kernel_writer.as_ref().map_or(20, KernelWriterConfig::num_stores);
    let params = KernelParams {
        k_max: ov.get("k_max", default_k)?,
        fillers: ov.get("fillers", 2)?,
        jitter: ov.get("jitter", 100.0)?,
        threshold: ov.get("threshold", 0)?,
    };
    if params.k_max == 0 || params.k_max > 4096 {
        return Err(ScenarioError::Usage("k_max must be in 1..=4096".into()));
    }
    if !(params.jitter >= 0.0 && params.jitter.is_finite()) {
        return Err(ScenarioError::Usage("jitter must be a non-negative number of cycles".into()));
    }
    if let Some(cfg) = &ctx.spec.kernel_writer {
        cfg.validate()?;
        if cfg.num_stores() < params.k_max {
            return Err(ScenarioError::Usage(format!(
                "kernel_writer lists {} stores but k_max is {}",
                cfg.num_stores(),
                params.k_max
            )));
        }
    }
    Ok(params)
}

#[derive(Clone, Copy)]
struct Setup {
    kpti: bool,
    flush: bool,
    cross_thread: bool,
}

fn kernel_sim(ctx: &Ctx<'_>, profile: &ArchProfile, cause: FaultCause, params: &KernelParams, setup: Setup) -> Result<Simulator, ScenarioError> {
    let mut user = ctx.lab_space();
    if cause == FaultCause::UserNotPresent {
        user.revoke(layout::ATTACKER_VPN).map_err(SimError::from)?;
    }
    let mut kernel = user.clone();
    victims::map_kernel_writer_pages(&mut kernel, params.k_max);
    let mut sim = if setup.kpti {
        ctx.simulator(profile, user).with_kernel_space(kernel)
    } else {
        ctx.simulator(profile, kernel)
    };
    let opts = sim.options_mut();
    opts.return_jitter_cycles = params.jitter;
    opts.countermeasure_flush = setup.flush;
    sim.store_buffer_mut().set_partitioned(ctx.spec.hyperthread || setup.cross_thread);
    Ok(sim)
}

fn writer_config(ctx: &Ctx<'_>, k: usize, trial: usize) -> KernelWriterConfig {
    match &ctx.spec.kernel_writer {
        Some(cfg) => KernelWriterConfig { offsets: cfg.offsets[..k].to_vec(), secret_bytes: cfg.secret_bytes[..k].to_vec() },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.spec.seed, "kernel-writer"));
            rng.set_stream(trial as u64);
            KernelWriterConfig::random(k, &mut rng)
        }
    }
}

/// Fillers, kernel writer, then a faulting load at the last kernel store's
/// offset. Success means that store's byte came back through the probe.
fn kernel_trial(
    ctx: &Ctx<'_>,
    sim: &mut Simulator,
    cause: FaultCause,
    params: &KernelParams,
    setup: Setup,
    k: usize,
    trial: usize,
) -> Result<bool, ScenarioError> {
    let cfg = writer_config(ctx, k, trial);
    let target_offset = cfg.offsets[k - 1];
    let mut filler_offset = target_offset ^ 0x800;
    while cfg.offsets.contains(&filler_offset) {
        filler_offset = (filler_offset + 1) % PAGE_SIZE;
    }
    let fillers = Program::new(victims::filler_stores(params.fillers, filler_offset))?;
    let victim = Program::new(victims::kernel_writer_program(&cfg))?;
    let attacker = Program::new(victims::leak_gadget(cause, Suppression::Tsx, target_offset))?;

    let probe = victims::probe_array();
    sim.reset_microarch();
    // same jitter draw for trial t at every k
    sim.reseed_stream(sub_seed(ctx.spec.seed, "return-jitter"), trial as u64);
    let (space, cache) = sim.space_and_cache();
    probe.prime(space, cache)?;
    let victim_thread = if setup.cross_thread { HwThread::T1 } else { HwThread::T0 };
    sim.run(&fillers, HwThread::T0)?;
    sim.run(&victim, victim_thread)?;
    sim.run(&attacker, HwThread::T0)?;
    let threshold = if params.threshold == 0 { sim.profile().default_threshold() } else { params.threshold };
    let (space, cache) = sim.space_and_cache();
    Ok(probe.decode(space, cache, threshold)?.single_hit() == Some(cfg.secret_bytes[k - 1]))
}

/// Recovery estimates for k = 1..=k_max.
fn sweep(
    ctx: &Ctx<'_>,
    profile: &ArchProfile,
    params: &KernelParams,
    setup: Setup,
    label: &str,
) -> Result<Vec<Estimate>, ScenarioError> {
    let cause = victims::attack_cause(profile, Suppression::Tsx).unwrap_or(FaultCause::UserNotPresent);
    let trials = ctx.spec.trials();
    let counts = ctx.par_trials(
        params.k_max,
        || kernel_sim(ctx, profile, cause, params, setup).expect("lab layout has the attacker page"),
        |sim, idx| {
            let k = idx + 1;
            let mut ok = 0u64;
            for t in 0..trials {
                ok += u64::from(kernel_trial(ctx, sim, cause, params, setup, k, t)?);
            }
            Ok(ok)
        },
    )?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(idx, &s)| Estimate::new(format!("{label}/k={}", idx + 1), s, trials as u64))
        .collect())
}

fn summarize(report: &mut ScenarioReport, label: &str, estimates: &[Estimate]) {
    if let Some(e) = estimates.get(9) {
        report.note(&format!("p_k10.{label}"), e.probability);
    }
    let head = &estimates[..estimates.len().min(10)];
    let monotone = head.windows(2).all(|w| w[0].probability <= w[1].probability);
    report.note(&format!("monotone_k1_10.{label}"), monotone);
}

pub(super) fn run_kernel_leak(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let params = kernel_params(ctx, ov)?;
    let kpti_modes = spec.kpti.map_or(vec![false, true], |k| vec![k]);
    let mut report = ScenarioReport::new(spec, &["profile", "kpti", "k", "probability"]);
    for profile in &spec.profiles {
        for &kpti in &kpti_modes {
            let setup = Setup { kpti, flush: spec.countermeasure, cross_thread: false };
            let label = format!("{}/kpti={kpti}", profile.name());
            let estimates = sweep(ctx, profile, &params, setup, &label)?;
            for (idx, e) in estimates.iter().enumerate() {
                report.push_row(vec![json!(profile.name()), json!(kpti), json!(idx + 1), json!(e.probability)]);
            }
            summarize(&mut report, &label, &estimates);
            report.estimates.extend(estimates);
        }
    }
    report.note("trials_per_k", spec.trials());
    report.note("filler_stores", params.fillers);
    report.note("return_jitter_cycles", params.jitter);
    Ok(report)
}

pub(super) fn run_countermeasure(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let params = kernel_params(ctx, ov)?;
    let mut report = ScenarioReport::new(spec, &["profile", "countermeasure", "cross_thread", "k", "probability"]);
    for profile in &spec.profiles {
        for cross_thread in [false, true] {
            for flush in [false, true] {
                let setup = Setup { kpti: spec.kpti.unwrap_or(false), flush, cross_thread };
                let label = format!("{}/countermeasure={flush}/cross_thread={cross_thread}", profile.name());
                let estimates = sweep(ctx, profile, &params, setup, &label)?;
                for (idx, e) in estimates.iter().enumerate() {
                    let row: Vec<Value> =
                        vec![json!(profile.name()), json!(flush), json!(cross_thread), json!(idx + 1), json!(e.probability)];
                    report.push_row(row);
                }
                let max = estimates.iter().map(|e| e.probability).fold(0.0, f64::max);
                report.note(&format!("max_probability.{label}"), max);
                summarize(&mut report, &label, &estimates);
                report.estimates.extend(estimates);
            }
        }
    }
    report.note("trials_per_k", spec.trials());
    Ok(report)
}
