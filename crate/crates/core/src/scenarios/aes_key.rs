use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{sub_seed, Ctx, Overrides, ScenarioError, ScenarioReport};
use crate::aes::{AesAttack, AesAttackConfig, AesError, AesRecovery, EXPANDED_KEY_BYTES};
use crate::memory::PAGE_SIZE;
use crate::victims::AesContext;

fn parse_key(text: &str) -> Result<[u8; 16], ScenarioError> {
    hex::decode(text.trim_start_matches("0x"))
        .ok()
        .and_then(|b| <[u8; 16]>::try_from(b).ok())
        .ok_or_else(|| ScenarioError::Usage(format!("`key` must be 32 hex digits, got `{text}`")))
}

pub(super) fn run_aes_key(ctx: &Ctx<'_>, ov: &mut Overrides<'_>) -> Result<ScenarioReport, ScenarioError> {
    let spec = ctx.spec;
    let profile = &spec.profiles[0];
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "aes-keys"));

    let fixed_key = ov.raw("key").map(parse_key).transpose()?;
    let n_keys: usize = if fixed_key.is_some() { 1 } else { ov.get("keys", 1)? };
    let random_offset = ov.raw("context_offset") == Some("random");
    let fixed_offset: u64 = if random_offset { 0 } else { ov.get("context_offset", 0x110)? };
    let noise: f64 = ov.get("noise", 0.0)?;
    let defaults = AesAttackConfig::for_profile(profile);
    let cfg = AesAttackConfig {
        trials: spec.trials.unwrap_or(if noise > 0.0 { 15 } else { 1 }),
        stride: ov.get("stride", defaults.stride)?,
        noise,
        filler_stores: ov.get("fillers", defaults.filler_stores)?,
        threshold: ov.get("threshold", defaults.threshold)?,
        seed: 0,
    };
    if n_keys == 0 || !(0.0..=1.0).contains(&noise) {
        return Err(ScenarioError::Usage("keys must be positive and noise within [0, 1]".into()));
    }

    let mut victims = Vec::with_capacity(n_keys);
    for _ in 0..n_keys {
        let key = fixed_key.unwrap_or_else(|| rng.random());
        let offset = if random_offset {
            rng.random_range(0..=(PAGE_SIZE - EXPANDED_KEY_BYTES as u64) / 16) * 16
        } else {
            fixed_offset
        };
        victims.push(AesContext::new(key, offset)?);
    }

    let outcomes: Vec<Result<AesRecovery, AesError>> = ctx.par_trials(
        n_keys,
        || (),
        |_, i| {
            let cfg = AesAttackConfig { seed: sub_seed(spec.seed, "aes-noise").wrapping_add(i as u64), ..cfg.clone() };
            let mut attack = match AesAttack::new(profile.clone(), Some(victims[i].clone()), cfg) {
                Ok(a) => a,
                Err(e @ (AesError::BadStride(_) | AesError::NoAttackPrimitive)) => {
                    return Err(ScenarioError::Usage(e.to_string()))
                }
                Err(e) => return Ok(Err(e)),
            };
            Ok(attack.recover())
        },
    )?;

    let mut report = ScenarioReport::new(spec, &["offset", "hits"]);
    let mut successes = 0;
    for (i, (victim, outcome)) in victims.iter().zip(&outcomes).enumerate() {
        let tag = format!("key{i}");
        report.note(&format!("{tag}.expected"), hex::encode(victim.master_key()));
        report.note(&format!("{tag}.context_offset"), format!("{:#x}", victim.context_page_offset()));
        match outcome {
            Ok(rec) => {
                for (offset, hits) in &rec.histogram {
                    report.push_row(vec![json!(format!("{offset:#x}")), json!(hits)]);
                }
                let correct = rec.master_key == victim.master_key() && rec.base_offset == victim.context_page_offset();
                successes += usize::from(correct);
                report.note(&format!("{tag}.located_offset"), format!("{:#x}", rec.base_offset));
                report.note(&format!("{tag}.rk9"), hex::encode(rec.rk9.bytes));
                report.note(&format!("{tag}.rk10"), hex::encode(rec.rk10.bytes));
                report.note(&format!("{tag}.recovered"), hex::encode(rec.master_key));
                report.note(&format!("{tag}.correct"), correct);
            }
            Err(e) => {
                report.note(&format!("{tag}.error"), e);
                report.note(&format!("{tag}.correct"), false);
            }
        }
    }
    let first = outcomes[0].as_ref().map_or("none".to_string(), |r| hex::encode(r.master_key));
    report.note("recovered_key", first);
    report.note("trials_per_byte", cfg.trials);
    report.note("noise", noise);
    report.note("keys_recovered", format!("{successes}/{n_keys}"));
    Ok(report)
}
