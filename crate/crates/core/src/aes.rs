//! AES-128 key schedule, its inversion, and the attacker that leaks the
//! last two round keys of a kernel key expansion.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::covert::{CovertError, ProbeReading};
use crate::memory::PAGE_SIZE;
use crate::pipeline::{MicroOp, Program, ProgramError, SimError, Simulator};
use crate::profile::{ArchProfile, FaultCause, Suppression};
use crate::store_buffer::HwThread;
use crate::victims::{self, layout, AesContext};

pub const ROUNDS: usize = 10;
pub const EXPANDED_KEY_BYTES: usize = 16 * (ROUNDS + 1);
/// Offset of round key 9 inside the expanded key.
pub const RK9_OFFSET: u64 = 144;

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const RCON: [u8; ROUNDS] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AesError {
    #[error("expected round key {expected}, got round {got}")]
    WrongRound { expected: usize, got: usize },
    #[error("round-9 key does not match the schedule implied by round 10")]
    InconsistentSubkeys,
    #[error("no leaked value for context offset {offset:#x}")]
    RecoveryTimeout { offset: u64 },
    #[error("offset scan observed no leakage")]
    NoLeak,
    #[error("profile leaks under no TSX fault the attacker can provoke")]
    NoAttackPrimitive,
    #[error("scan stride must divide the page size, got {0}")]
    BadStride(u64),
    #[error("{0}")]
    Sim(String),
}

impl From<SimError> for AesError {
    fn from(e: SimError) -> Self {
        AesError::Sim(e.to_string())
    }
}

impl From<ProgramError> for AesError {
    fn from(e: ProgramError) -> Self {
        AesError::Sim(e.to_string())
    }
}

impl From<CovertError> for AesError {
    fn from(e: CovertError) -> Self {
        AesError::Sim(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoundKey {
    pub bytes: [u8; 16],
    pub round_index: usize,
}

impl RoundKey {
    pub fn new(bytes: [u8; 16], round_index: usize) -> Self {
        RoundKey { bytes, round_index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedKey {
    round_keys: [[u8; 16]; ROUNDS + 1],
}

impl ExpandedKey {
    pub fn round_keys(&self) -> &[[u8; 16]; ROUNDS + 1] {
        &self.round_keys
    }

    pub fn round_key(&self, round: usize) -> RoundKey {
        RoundKey::new(self.round_keys[round], round)
    }

    pub fn to_bytes(&self) -> [u8; EXPANDED_KEY_BYTES] {
        let mut out = [0; EXPANDED_KEY_BYTES];
        for (chunk, rk) in out.chunks_exact_mut(16).zip(&self.round_keys) {
            chunk.copy_from_slice(rk);
        }
        out
    }
}

type Word = [u8; 4];

fn sub_rot(w: Word, round: usize) -> Word {
    [SBOX[w[1] as usize] ^ RCON[round], SBOX[w[2] as usize], SBOX[w[3] as usize], SBOX[w[0] as usize]]
}

fn xor(a: Word, b: Word) -> Word {
    [a[0] ^ b[0], a[1] ^ b[1], a[2] ^ b[2], a[3] ^ b[3]]
}

/// `f(word[i-1])` in `word[i] = word[i-4] ^ f(word[i-1])`.
fn schedule_core(i: usize, prev: Word) -> Word {
    if i.is_multiple_of(4) {
        sub_rot(prev, i / 4 - 1)
    } else {
        prev
    }
}

fn words_to_keys(words: &[Word; 44]) -> [[u8; 16]; ROUNDS + 1] {
    let mut keys = [[0; 16]; ROUNDS + 1];
    for (i, w) in words.iter().enumerate() {
        keys[i / 4][(i % 4) * 4..(i % 4) * 4 + 4].copy_from_slice(w);
    }
    keys
}

fn key_words(key: &[u8; 16]) -> [Word; 4] {
    std::array::from_fn(|i| [key[4 * i], key[4 * i + 1], key[4 * i + 2], key[4 * i + 3]])
}

pub fn expand_key(master: [u8; 16]) -> ExpandedKey {
    let mut w = [[0u8; 4]; 44];
    w[..4].copy_from_slice(&key_words(&master));
    for i in 4..44 {
        w[i] = xor(w[i - 4], schedule_core(i, w[i - 1]));
    }
    ExpandedKey { round_keys: words_to_keys(&w) }
}

/// Runs the schedule backwards from the last round key. A supplied round-9
/// key acts as a checksum.
pub fn reverse_key_schedule(rk10: &RoundKey, rk9: Option<&RoundKey>) -> Result<[u8; 16], AesError> {
    if rk10.round_index != ROUNDS {
        return Err(AesError::WrongRound { expected: ROUNDS, got: rk10.round_index });
    }
    if let Some(rk9) = rk9 {
        if rk9.round_index != ROUNDS - 1 {
            return Err(AesError::WrongRound { expected: ROUNDS - 1, got: rk9.round_index });
        }
    }
    let mut w = [[0u8; 4]; 44];
    w[40..].copy_from_slice(&key_words(&rk10.bytes));
    for i in (4..44).rev() {
        w[i - 4] = xor(w[i], schedule_core(i, w[i - 1]));
    }
    if let Some(rk9) = rk9 {
        if words_to_keys(&w)[ROUNDS - 1] != rk9.bytes {
            return Err(AesError::InconsistentSubkeys);
        }
    }
    Ok(words_to_keys(&w)[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AesAttackConfig {
    /// Leak trials per scanned offset and per leaked byte (majority vote).
    pub trials: usize,
    pub stride: u64,
    /// Probability that a trial's probe array picks up one random line.
    pub noise: f64,
    /// Attacker stores issued before the victim runs, so that the drains
    /// during the kernel return consume them instead of round keys.
    pub filler_stores: usize,
    pub threshold: u64,
    pub seed: u64,
}

impl AesAttackConfig {
    pub fn for_profile(profile: &ArchProfile) -> Self {
        AesAttackConfig { trials: 1, stride: 128, noise: 0.0, filler_stores: 16, threshold: profile.default_threshold(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AesRecovery {
    pub histogram: BTreeMap<u64, u64>,
    pub base_offset: u64,
    pub rk9: RoundKey,
    pub rk10: RoundKey,
    pub master_key: [u8; 16],
}

/// A core running the key-expansion victim, and the attacker's view of it.
pub struct AesAttack {
    sim: Simulator,
    victim: Option<AesContext>,
    cause: FaultCause,
    cfg: AesAttackConfig,
    noise_rng: ChaCha8Rng,
}

impl AesAttack {
    pub fn new(profile: ArchProfile, victim: Option<AesContext>, cfg: AesAttackConfig) -> Result<Self, AesError> {
        if cfg.stride == 0 || !PAGE_SIZE.is_multiple_of(cfg.stride) {
            return Err(AesError::BadStride(cfg.stride));
        }
        let cause = victims::attack_cause(&profile, Suppression::Tsx).ok_or(AesError::NoAttackPrimitive)?;
        let mut space = victims::lab_space();
        AesContext::map_page(&mut space);
        if cause == FaultCause::UserNotPresent {
            space.revoke(layout::ATTACKER_VPN).map_err(|e| AesError::Sim(e.to_string()))?;
        }
        let sim = Simulator::new(profile, space).with_seed(cfg.seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(1);
        Ok(AesAttack { sim, victim, cause, cfg, noise_rng })
    }

    pub fn config(&self) -> &AesAttackConfig {
        &self.cfg
    }

    fn trial_program(&self, offset: u64) -> Result<Program, AesError> {
        let mut ops: Vec<MicroOp> = victims::filler_stores(self.cfg.filler_stores, offset ^ 0x800);
        if let Some(ctx) = &self.victim {
            ops.extend(victims::aes_expansion_program(ctx));
        }
        ops.extend(victims::leak_gadget(self.cause, Suppression::Tsx, offset));
        Ok(Program::new(ops)?)
    }

    fn leak_trial(&mut self, program: &Program) -> Result<ProbeReading, AesError> {
        let probe = victims::probe_array();
        self.sim.reset_microarch();
        let (space, cache) = self.sim.space_and_cache();
        probe.prime(space, cache)?;
        self.sim.run(program, HwThread::T0)?;
        let (space, cache) = self.sim.space_and_cache();
        probe.inject_noise(space, cache, self.cfg.noise, &mut self.noise_rng)?;
        Ok(probe.decode(space, cache, self.cfg.threshold)?)
    }

    /// Trials at `offset` whose probe showed any hit.
    fn trials_with_hits(&mut self, offset: u64) -> Result<u64, AesError> {
        let program = self.trial_program(offset)?;
        let mut n = 0;
        for _ in 0..self.cfg.trials {
            n += u64::from(!self.leak_trial(&program)?.hits.is_empty());
        }
        Ok(n)
    }

    /// Decoded hits per scanned page offset.
    pub fn scan_context_offset(&mut self) -> Result<BTreeMap<u64, u64>, AesError> {
        let mut histogram = BTreeMap::new();
        for offset in (0..PAGE_SIZE).step_by(self.cfg.stride as usize) {
            let program = self.trial_program(offset)?;
            let mut hits = 0;
            for _ in 0..self.cfg.trials {
                hits += self.leak_trial(&program)?.hits.len() as u64;
            }
            histogram.insert(offset, hits);
        }
        Ok(histogram)
    }

    /// Walks down from the scan's hottest offset in 16-byte steps while the
    /// offset still leaks; the last leaking one is the context start.
    pub fn locate_base(&mut self, histogram: &BTreeMap<u64, u64>) -> Result<u64, AesError> {
        let (&hot, &hits) = histogram
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .ok_or(AesError::NoLeak)?;
        if hits == 0 {
            return Err(AesError::NoLeak);
        }
        let majority = self.cfg.trials as u64 / 2;
        let mut base = hot - hot % 16;
        while base >= 16 && self.trials_with_hits(base - 16)? > majority {
            base -= 16;
        }
        Ok(base)
    }

    /// Leaks the 32 bytes of round keys 9 and 10 with a per-byte majority vote.
    pub fn recover_subkeys(&mut self, base: u64) -> Result<(RoundKey, RoundKey), AesError> {
        let mut leaked = [0u8; 32];
        for (j, byte) in leaked.iter_mut().enumerate() {
            let offset = base + RK9_OFFSET + j as u64;
            if offset >= PAGE_SIZE {
                return Err(AesError::RecoveryTimeout { offset });
            }
            let program = self.trial_program(offset)?;
            let mut votes = [0u32; 256];
            for _ in 0..self.cfg.trials {
                for v in self.leak_trial(&program)?.hits {
                    votes[v as usize] += 1;
                }
            }
            let (value, &count) = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("256 candidates");
            if count == 0 {
                return Err(AesError::RecoveryTimeout { offset });
            }
            *byte = value as u8;
        }
        let rk9 = RoundKey::new(leaked[..16].try_into().expect("16 bytes"), ROUNDS - 1);
        let rk10 = RoundKey::new(leaked[16..].try_into().expect("16 bytes"), ROUNDS);
        Ok((rk9, rk10))
    }

    /// Scan, locate, leak and reverse.
    pub fn recover(&mut self) -> Result<AesRecovery, AesError> {
        let histogram = self.scan_context_offset()?;
        let base_offset = self.locate_base(&histogram)?;
        let (rk9, rk10) = self.recover_subkeys(base_offset)?;
        let master_key = reverse_key_schedule(&rk10, Some(&rk9))?;
        Ok(AesRecovery { histogram, base_offset, rk9, rk10, master_key })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Microarch;

    #[test]
    fn zero_key_round_zero_is_master() {
        assert_eq!(expand_key([0; 16]).round_keys()[0], [0; 16]);
    }

    #[test]
    fn reverse_checks_round_index() {
        let ek = expand_key([7; 16]);
        assert_eq!(
            reverse_key_schedule(&ek.round_key(9), None),
            Err(AesError::WrongRound { expected: 10, got: 9 })
        );
        assert_eq!(reverse_key_schedule(&ek.round_key(10), Some(&ek.round_key(9))), Ok([7; 16]));
    }

    #[test]
    fn expanded_bytes_are_round_keys_in_order() {
        let ek = expand_key(*b"0123456789abcdef");
        let bytes = ek.to_bytes();
        for r in 0..=ROUNDS {
            assert_eq!(&bytes[16 * r..16 * r + 16], &ek.round_keys()[r]);
        }
    }

    #[test]
    fn no_victim_means_empty_histogram() {
        let profile = ArchProfile::builtin(Microarch::Skylake);
        let cfg = AesAttackConfig::for_profile(&profile);
        let mut attack = AesAttack::new(profile, None, cfg).unwrap();
        let hist = attack.scan_context_offset().unwrap();
        assert_eq!(hist.len(), 32);
        assert!(hist.values().all(|&h| h == 0));
        assert_eq!(attack.locate_base(&hist), Err(AesError::NoLeak));
    }

    #[test]
    fn bad_stride_rejected() {
        let profile = ArchProfile::builtin(Microarch::Skylake);
        let cfg = AesAttackConfig { stride: 100, ..AesAttackConfig::for_profile(&profile) };
        assert!(matches!(AesAttack::new(profile, None, cfg), Err(AesError::BadStride(100))));
    }
}
