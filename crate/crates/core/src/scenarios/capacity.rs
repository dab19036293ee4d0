use serde_json::json;

use super::toy::gadget_sim;
use super::{Ctx, Estimate, Overrides, ScenarioError, ScenarioReport};
use crate::memory::PAGE_SIZE;
use crate::pipeline::{MicroOp, Program};
use crate::profile::{FaultCause, Suppression};
use crate::store_buffer::HwThread;
use crate::victims::{self, layout};

/// N back-to-back stores, the first one at `offset`, then a suppressed
/// faulting load at `offset`.
fn capacity_program(n: usize, offset: u64, value: u8, cause: FaultCause) -> Result<Program, ScenarioError> {
    let page = layout::page(layout::VICTIM_VPN);
    let mut ops = Vec::with_capacity(n + 4);
    ops.push(MicroOp::Store { vaddr: page + offset, value });
    for i in 1..n as u64 {
        ops.push(MicroOp::Store { vaddr: page + (offset + i) % PAGE_SIZE, value: !value });
    }
    ops.extend(victims::leak_gadget(cause, Suppression::Tsx, offset));
    Ok(Program::new(ops)?)
}

pub(super) fn run_sb_capacity(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let max_n: usize = ov.get("max_n", 70)?;
    let offsets: u64 = ov.get("offsets", 64)?;
    if offsets == 0 || offsets > PAGE_SIZE || max_n == 0 {
        return Err(ScenarioError::Usage("offsets must be in 1..=4096 and max_n positive".into()));
    }
    let attempts = spec.trials();
    let mut report = ScenarioReport::new(spec, &["profile", "hyperthread", "n_stores", "probability"]);

    for profile in &spec.profiles {
        let cause = victims::attack_cause(profile, Suppression::Tsx).unwrap_or(FaultCause::UserNotPresent);
        let threshold = profile.default_threshold();
        for hyperthread in [false, true] {
            let successes = ctx.par_trials(
                max_n,
                || {
                    let mut sim = gadget_sim(ctx, profile, cause).expect("lab layout has the attacker page");
                    sim.store_buffer_mut().set_partitioned(hyperthread);
                    sim
                },
                |sim, idx| {
                    let n = idx + 1;
                    let probe = victims::probe_array().resolve(sim.user_space())?;
                    let mut hits = 0u64;
                    for k in 0..offsets {
                        let offset = k * (PAGE_SIZE / offsets);
                        for attempt in 0..attempts {
                            let value = (attempt as u64 * 37 + k + 1) as u8;
                            let program = capacity_program(n, offset, value, cause)?;
                            sim.reset_microarch();
                            probe.prime(sim.cache_mut());
                            sim.run(&program, HwThread::T0)?;
                            hits += u64::from(probe.decode(sim.cache_mut(), threshold)?.single_hit() == Some(value));
                        }
                    }
                    Ok(hits)
                },
            )?;
            let trials = offsets * attempts as u64;
            let mut cutoff = 0;
            for (idx, &s) in successes.iter().enumerate() {
                let n = idx + 1;
                let est = Estimate::new(format!("{}/hyperthread={hyperthread}/n={n}", profile.name()), s, trials);
                if est.probability >= 0.95 && cutoff == idx {
                    cutoff = n;
                }
                report.push_row(vec![json!(profile.name()), json!(hyperthread), json!(n), json!(est.probability)]);
                report.estimates.push(est);
            }
            report.note(&format!("max_recoverable.{}.hyperthread={hyperthread}", profile.name()), cutoff);
        }
    }
    report.note("attempts_per_offset", attempts);
    report.note("offsets", offsets);
    Ok(report)
}
