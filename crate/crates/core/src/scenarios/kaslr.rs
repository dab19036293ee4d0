use serde_json::{json, Value};

use super::{sub_seed, Ctx, Estimate, Overrides, ScenarioError, ScenarioReport};
use crate::memory::PAGE_SIZE;
use crate::pipeline::{MicroOp, Program, Reg};
use crate::profile::Suppression;
use crate::store_buffer::HwThread;
use crate::victims::{self, layout, random_kaslr_layout_with, KaslrLayout};

pub(super) fn run_kaslr(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let profile = &spec.profiles[0];
    let slots: usize = ov.get("slots", layout::KASLR_SLOTS)?;
    let offset: u64 = ov.get("offset", 0x80)?;
    let value: u8 = ov.get("value", 0x5a)?;
    let threshold: u64 = ov.get("threshold", profile.default_threshold())?;
    let suppression: Suppression = match ov.raw("suppression") {
        None => Suppression::Tsx,
        Some(s) => s.parse().map_err(|e| ScenarioError::Usage(format!("`suppression`: {e}")))?,
    };
    if slots == 0 || offset >= PAGE_SIZE {
        return Err(ScenarioError::Usage("slots must be positive and offset inside the page".into()));
    }
    crate::covert::check_threshold(&crate::memory::CacheModel::new(profile), threshold)?;

    // one program per candidate: plant a store, then a suppressed load from
    // the candidate page at the same offset
    let r0 = Reg::new(0).expect("valid");
    let probe = victims::probe_array();
    let (open, close) = match suppression {
        Suppression::Tsx => (MicroOp::TsxBegin, MicroOp::TsxEnd),
        _ => (MicroOp::BranchGuard { mispredicted: true }, MicroOp::GuardEnd),
    };
    let programs = (0..slots)
        .map(|slot| {
            Program::new(vec![
                MicroOp::Store { vaddr: layout::page(layout::VICTIM_VPN) + offset, value },
                open,
                MicroOp::Load { vaddr: KaslrLayout::slot_vaddr(slot) + offset, dst: r0 },
                probe.touch_op(r0),
                close,
            ])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let layout_seed = sub_seed(spec.seed, "kaslr-layout");
    let results = ctx.par_trials(
        spec.trials(),
        || {
            let mut space = ctx.lab_space();
            KaslrLayout::new(slots, 0).expect("slots > 0").apply(&mut space);
            (ctx.simulator(profile, space), None::<KaslrLayout>)
        },
        |(sim, current), trial| {
            let layout = random_kaslr_layout_with(slots, layout_seed.wrapping_add(trial as u64))?;
            if *current != Some(layout) {
                layout.apply(sim.user_space_mut());
                *current = Some(layout);
            }
            let mut found = Vec::new();
            for (slot, program) in programs.iter().enumerate() {
                sim.reset_microarch();
                let (space, cache) = sim.space_and_cache();
                probe.flush_slot(space, cache, value)?;
                sim.run(program, HwThread::T0)?;
                let (space, cache) = sim.space_and_cache();
                if probe.probe_slot(space, cache, value, threshold)? {
                    found.push(slot);
                }
            }
            Ok((layout.mapped_slot_index(), found))
        },
    )?;

    let mut report = ScenarioReport::new(spec, &["trial", "true_slot", "found_slot", "correct"]);
    let mut correct = 0u64;
    for (trial, (true_slot, found)) in results.iter().enumerate() {
        let ok = found.as_slice() == [*true_slot];
        correct += u64::from(ok);
        let found_cell = found.first().map_or(Value::Null, |&s| json!(s));
        report.push_row(vec![json!(trial), json!(true_slot), found_cell, json!(ok)]);
    }
    let est = Estimate::new(format!("{}/accuracy", profile.name()), correct, results.len() as u64);
    report.note("profile", profile.name());
    report.note("slots", slots);
    report.note("correct", format!("{correct}/{}", results.len()));
    report.note("accuracy", est.probability);
    report.estimates.push(est);
    Ok(report)
}
