//! Victim programs and the address-space layout the scenarios share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aes::{expand_key, ExpandedKey, EXPANDED_KEY_BYTES};
use crate::covert::ProbeArray;
use crate::memory::{AddressSpace, PageTableEntry, PAGE_SIZE};
use crate::pipeline::{MicroOp, Reg};
use crate::profile::{ArchProfile, FaultCause, Suppression};
use crate::store_buffer::StoreData;

/// Fixed virtual page numbers and frames of the lab address space.
pub mod layout {
    pub const VICTIM_VPN: u64 = 0x10;
    pub const ATTACKER_VPN: u64 = 0x11;
    pub const FILLER_VPN: u64 = 0x12;
    pub const PROBE_VPN: u64 = 0x100;
    pub const PROBE_FRAME: u64 = 0x1000;

    pub const KERNEL_DATA_VPN: u64 = 0x80010;
    pub const KERNEL_CODE_VPN: u64 = 0x80011;
    pub const KERNEL_NOT_PRESENT_VPN: u64 = 0x80012;
    /// Kernel mapping of the probe frames, for gadgets that run in kernel
    /// mode under SMAP.
    pub const KERNEL_PROBE_VPN: u64 = 0x80100;

    pub const KERNEL_WRITER_VPN: u64 = 0x90000;
    pub const KERNEL_WRITER_FRAME: u64 = 0x3000;
    pub const AES_CONTEXT_VPN: u64 = 0xA0000;
    pub const AES_CONTEXT_FRAME: u64 = 0x40;
    pub const KASLR_BASE_VPN: u64 = 0xC0000;
    /// 2 MiB alignment between candidate kernel locations.
    pub const KASLR_SLOT_PAGES: u64 = 512;
    pub const KASLR_FRAME: u64 = 0x50;
    pub const KASLR_SLOTS: usize = 490;

    pub const fn page(vpn: u64) -> u64 {
        vpn * super::PAGE_SIZE
    }
}

use layout::*;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VictimError {
    #[error("{offsets} offsets but {secrets} secret bytes")]
    LengthMismatch { offsets: usize, secrets: usize },
    #[error("page offset {0:#x} out of range")]
    OffsetOutOfRange(u64),
    #[error("AES context at offset {0:#x} must be 16-byte aligned and fit in one page")]
    ContextLayout(u64),
    #[error("KASLR layout needs at least one slot")]
    NoSlots,
}

/// The user-range probe array.
pub fn probe_array() -> ProbeArray {
    ProbeArray::new(page(PROBE_VPN)).expect("aligned")
}

/// The same probe frames seen through a kernel mapping.
pub fn kernel_probe_array() -> ProbeArray {
    ProbeArray::new(page(KERNEL_PROBE_VPN)).expect("aligned")
}

/// User pages (victim, attacker, filler, probe array) plus one kernel data,
/// kernel code and non-present kernel page.
pub fn lab_space() -> AddressSpace {
    let mut space = AddressSpace::new();
    space.map(VICTIM_VPN, PageTableEntry::user_data(VICTIM_VPN));
    space.map(ATTACKER_VPN, PageTableEntry::user_data(ATTACKER_VPN));
    space.map(FILLER_VPN, PageTableEntry::user_data(FILLER_VPN));
    probe_array().map_into(&mut space, PROBE_FRAME);
    space.map(KERNEL_DATA_VPN, PageTableEntry::kernel_data(0x20));
    space.map(KERNEL_CODE_VPN, PageTableEntry::kernel_code(0x21));
    space.map(KERNEL_NOT_PRESENT_VPN, PageTableEntry::not_present(0x22));
    for i in 0..256 {
        space.map(KERNEL_PROBE_VPN + i, PageTableEntry::kernel_data(PROBE_FRAME + i));
    }
    space
}

/// Fault cause the attacker provokes: a non-present user page where the
/// profile leaks from it under TSX, otherwise a present kernel page.
pub fn attack_cause(profile: &ArchProfile, suppression: Suppression) -> Option<FaultCause> {
    [FaultCause::UserNotPresent, FaultCause::KernelData, FaultCause::KernelCode]
        .into_iter()
        .find(|&c| profile.leak_permitted(c, suppression).unwrap_or(false))
}

/// Address whose translation raises `cause` from the gadget's privilege
/// (the attacker page must already be revoked for `UserNotPresent`).
pub fn fault_address(cause: FaultCause, offset: u64) -> u64 {
    let vpn = match cause {
        FaultCause::UserNotPresent | FaultCause::SmapViolation | FaultCause::None => ATTACKER_VPN,
        FaultCause::KernelData => KERNEL_DATA_VPN,
        FaultCause::KernelCode => KERNEL_CODE_VPN,
        FaultCause::KernelNotPresent => KERNEL_NOT_PRESENT_VPN,
    };
    page(vpn) + offset
}

/// Suppressed faulting load at `offset` feeding the probe array. The SMAP
/// case runs in kernel mode and transmits through the kernel alias.
pub fn leak_gadget(cause: FaultCause, suppression: Suppression, offset: u64) -> Vec<MicroOp> {
    let r0 = Reg::new(0).expect("valid");
    let smap = cause == FaultCause::SmapViolation;
    let probe = if smap { kernel_probe_array() } else { probe_array() };
    let (open, close) = match suppression {
        Suppression::Tsx => (MicroOp::TsxBegin, MicroOp::TsxEnd),
        _ => (MicroOp::BranchGuard { mispredicted: true }, MicroOp::GuardEnd),
    };
    let mut ops = Vec::with_capacity(6);
    if smap {
        ops.push(MicroOp::EnterKernel);
    }
    ops.extend([open, MicroOp::Load { vaddr: fault_address(cause, offset), dst: r0 }, probe.touch_op(r0), close]);
    if smap {
        ops.push(MicroOp::ExitKernel);
    }
    ops
}

/// `count` one-byte stores at `offset` of the filler page.
pub fn filler_stores(count: usize, offset: u64) -> Vec<MicroOp> {
    vec![MicroOp::Store { vaddr: page(FILLER_VPN) + offset, value: 0 }; count]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelWriterConfig {
    pub offsets: Vec<u64>,
    pub secret_bytes: Vec<u8>,
}

impl KernelWriterConfig {
    pub fn new(offsets: Vec<u64>, secret_bytes: Vec<u8>) -> Result<Self, VictimError> {
        let cfg = KernelWriterConfig { offsets, secret_bytes };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `k` stores at distinct random page offsets with random secrets.
    pub fn random(k: usize, rng: &mut impl Rng) -> Self {
        let mut offsets: Vec<u64> = Vec::with_capacity(k);
        while offsets.len() < k {
            let o = rng.random_range(0..PAGE_SIZE);
            if !offsets.contains(&o) {
                offsets.push(o);
            }
        }
        let secret_bytes = (0..k).map(|_| rng.random()).collect();
        KernelWriterConfig { offsets, secret_bytes }
    }

    pub fn validate(&self) -> Result<(), VictimError> {
        if self.offsets.len() != self.secret_bytes.len() {
            return Err(VictimError::LengthMismatch { offsets: self.offsets.len(), secrets: self.secret_bytes.len() });
        }
        if let Some(&o) = self.offsets.iter().find(|&&o| o >= PAGE_SIZE) {
            return Err(VictimError::OffsetOutOfRange(o));
        }
        Ok(())
    }

    pub fn num_stores(&self) -> usize {
        self.offsets.len()
    }

    /// Kernel virtual address of store `i`: one page per store.
    pub fn store_vaddr(&self, i: usize) -> u64 {
        page(KERNEL_WRITER_VPN + i as u64) + self.offsets[i]
    }

    pub fn map_pages(&self, space: &mut AddressSpace) {
        map_kernel_writer_pages(space, self.num_stores());
    }
}

pub fn map_kernel_writer_pages(space: &mut AddressSpace, count: usize) {
    for i in 0..count as u64 {
        space.map(KERNEL_WRITER_VPN + i, PageTableEntry::kernel_data(KERNEL_WRITER_FRAME + i));
    }
}

/// `EnterKernel; store...; ExitKernel`.
pub fn kernel_writer_program(cfg: &KernelWriterConfig) -> Vec<MicroOp> {
    let mut ops = Vec::with_capacity(cfg.num_stores() + 2);
    ops.push(MicroOp::EnterKernel);
    for (i, &value) in cfg.secret_bytes.iter().enumerate() {
        ops.push(MicroOp::Store { vaddr: cfg.store_vaddr(i), value });
    }
    ops.push(MicroOp::ExitKernel);
    ops
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AesContext {
    master_key: [u8; 16],
    expanded: ExpandedKey,
    context_page_offset: u64,
}

impl AesContext {
    pub fn new(master_key: [u8; 16], context_page_offset: u64) -> Result<Self, VictimError> {
        if !context_page_offset.is_multiple_of(16) || context_page_offset + EXPANDED_KEY_BYTES as u64 > PAGE_SIZE {
            return Err(VictimError::ContextLayout(context_page_offset));
        }
        Ok(AesContext { master_key, expanded: expand_key(master_key), context_page_offset })
    }

    pub fn master_key(&self) -> [u8; 16] {
        self.master_key
    }

    pub fn expanded(&self) -> &ExpandedKey {
        &self.expanded
    }

    pub fn context_page_offset(&self) -> u64 {
        self.context_page_offset
    }

    pub fn map_page(space: &mut AddressSpace) {
        space.map(AES_CONTEXT_VPN, PageTableEntry::kernel_data(AES_CONTEXT_FRAME));
    }
}

/// Kernel-side key expansion: one 16-byte store per round key at
/// consecutive offsets from the context offset.
pub fn aes_expansion_program(ctx: &AesContext) -> Vec<MicroOp> {
    let base = page(AES_CONTEXT_VPN) + ctx.context_page_offset;
    let mut ops = Vec::with_capacity(13);
    ops.push(MicroOp::EnterKernel);
    for (r, rk) in ctx.expanded.round_keys().iter().enumerate() {
        let data = StoreData::from_slice(rk).expect("16 bytes");
        ops.push(MicroOp::StoreWide { vaddr: base + 16 * r as u64, data });
    }
    ops.push(MicroOp::ExitKernel);
    ops
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KaslrLayout {
    slots: usize,
    mapped_slot_index: usize,
}

impl KaslrLayout {
    pub fn new(slots: usize, mapped_slot_index: usize) -> Result<Self, VictimError> {
        if slots == 0 || mapped_slot_index >= slots {
            return Err(VictimError::NoSlots);
        }
        Ok(KaslrLayout { slots, mapped_slot_index })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn mapped_slot_index(&self) -> usize {
        self.mapped_slot_index
    }

    pub fn slot_vaddr(slot: usize) -> u64 {
        page(KASLR_BASE_VPN + slot as u64 * KASLR_SLOT_PAGES)
    }

    /// Maps the entry page at its slot; every other candidate is a
    /// non-present kernel page.
    pub fn apply(&self, space: &mut AddressSpace) {
        for slot in 0..self.slots {
            let vpn = KASLR_BASE_VPN + slot as u64 * KASLR_SLOT_PAGES;
            let pte = if slot == self.mapped_slot_index {
                PageTableEntry::kernel_code(KASLR_FRAME)
            } else {
                PageTableEntry::not_present(KASLR_FRAME)
            };
            space.map(vpn, pte);
        }
    }
}

pub fn random_kaslr_layout(seed: u64) -> KaslrLayout {
    random_kaslr_layout_with(KASLR_SLOTS, seed).expect("non-zero slot count")
}

pub fn random_kaslr_layout_with(slots: usize, seed: u64) -> Result<KaslrLayout, VictimError> {
    if slots == 0 {
        return Err(VictimError::NoSlots);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KaslrLayout::new(slots, rng.random_range(0..slots))
}
