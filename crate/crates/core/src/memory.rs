//! Address translation, microcode-assist detection, physical memory and a
//! timing-only cache.
//!
//! Translation uses a single-level page map keyed by virtual page number. Only
//! the outcome matters to the attacks, so there is no walk latency and the DTLB
//! is implicit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{ArchProfile, FaultCause};

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const LINE_SIZE: u64 = 64;

/// First virtual page number of the kernel half unless configured otherwise.
pub const DEFAULT_KERNEL_BOUNDARY_VPN: u64 = 1 << 19;

pub fn vpn_of(vaddr: u64) -> u64 {
    vaddr >> PAGE_SHIFT
}

pub fn page_offset(addr: u64) -> u64 {
    addr & (PAGE_SIZE - 1)
}

pub fn line_of(paddr: u64) -> u64 {
    paddr / LINE_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Privilege {
    User,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PageTableEntry {
    pub frame: u64,
    pub present: bool,
    pub user_accessible: bool,
    pub writable: bool,
    pub accessed: bool,
    pub dirty: bool,
    pub is_code: bool,
}

impl PageTableEntry {
    /// Present, writable user data page with accessed and dirty set.
    pub fn user_data(frame: u64) -> Self {
        PageTableEntry { frame, present: true, user_accessible: true, writable: true, accessed: true, dirty: true, is_code: false }
    }

    pub fn kernel_data(frame: u64) -> Self {
        PageTableEntry { user_accessible: false, ..Self::user_data(frame) }
    }

    pub fn kernel_code(frame: u64) -> Self {
        PageTableEntry { writable: false, is_code: true, ..Self::kernel_data(frame) }
    }

    pub fn not_present(frame: u64) -> Self {
        PageTableEntry { present: false, ..Self::user_data(frame) }
    }
}

/// Comma-separated flag list used by layout files:
/// `present,user,writable,accessed,dirty,code`.
impl FromStr for PageTableEntry {
    type Err = MemoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut pte = PageTableEntry::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "present" | "p" => pte.present = true,
                "user" | "u" => pte.user_accessible = true,
                "writable" | "w" => pte.writable = true,
                "accessed" | "a" => pte.accessed = true,
                "dirty" | "d" => pte.dirty = true,
                "code" | "x" => pte.is_code = true,
                other => return Err(MemoryError::BadFlag(other.to_string())),
            }
        }
        if pte.dirty && !pte.accessed {
            return Err(MemoryError::DirtyWithoutAccessed);
        }
        Ok(pte)
    }
}

impl fmt::Display for PageTableEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = [
            (self.present, "present"),
            (self.user_accessible, "user"),
            (self.writable, "writable"),
            (self.accessed, "accessed"),
            (self.dirty, "dirty"),
            (self.is_code, "code"),
        ];
        let names: Vec<_> = flags.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        write!(f, "frame={:#x} [{}]", self.frame, names.join(","))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("unknown page flag `{0}`")]
    BadFlag(String),
    #[error("a dirty page must also be accessed")]
    DirtyWithoutAccessed,
    #[error("no page-table entry for virtual page {0:#x}")]
    Unmapped(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssistKind {
    SetAccessed,
    SetDirty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranslationOutcome {
    Ok(u64),
    Fault(FaultCause),
    AssistNeeded(AssistKind),
}

impl TranslationOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, TranslationOutcome::Ok(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpace {
    page_table: FxHashMap<u64, PageTableEntry>,
    smap_enabled: bool,
    kernel_boundary_vpn: u64,
}

impl Default for AddressSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl AddressSpace {
    pub fn new() -> Self {
        AddressSpace { page_table: FxHashMap::default(), smap_enabled: true, kernel_boundary_vpn: DEFAULT_KERNEL_BOUNDARY_VPN }
    }

    pub fn with_kernel_boundary(mut self, vpn: u64) -> Self {
        self.kernel_boundary_vpn = vpn;
        self
    }

    pub fn set_smap(&mut self, enabled: bool) {
        self.smap_enabled = enabled;
    }

    pub fn smap_enabled(&self) -> bool {
        self.smap_enabled
    }

    pub fn kernel_boundary_vpn(&self) -> u64 {
        self.kernel_boundary_vpn
    }

    pub fn is_kernel_vpn(&self, vpn: u64) -> bool {
        vpn >= self.kernel_boundary_vpn
    }

    pub fn map(&mut self, vpn: u64, pte: PageTableEntry) {
        self.page_table.insert(vpn, pte);
    }

    pub fn unmap(&mut self, vpn: u64) -> Option<PageTableEntry> {
        self.page_table.remove(&vpn)
    }

    pub fn entry(&self, vpn: u64) -> Option<&PageTableEntry> {
        self.page_table.get(&vpn)
    }

    pub fn entry_mut(&mut self, vpn: u64) -> Option<&mut PageTableEntry> {
        self.page_table.get_mut(&vpn)
    }

    /// Mappings in ascending page order.
    pub fn entries(&self) -> impl Iterator<Item = (u64, &PageTableEntry)> {
        let mut all: Vec<_> = self.page_table.iter().map(|(v, e)| (*v, e)).collect();
        all.sort_unstable_by_key(|(v, _)| *v);
        all.into_iter()
    }

    /// Marks a page not present, as `mprotect(PROT_NONE)` does.
    pub fn revoke(&mut self, vpn: u64) -> Result<(), MemoryError> {
        self.entry_mut(vpn).ok_or(MemoryError::Unmapped(vpn))?.present = false;
        Ok(())
    }

    /// Clears the accessed bit (and the dirty bit with it, keeping dirty ⇒ accessed).
    pub fn clear_accessed(&mut self, vpn: u64) -> Result<(), MemoryError> {
        let pte = self.entry_mut(vpn).ok_or(MemoryError::Unmapped(vpn))?;
        pte.accessed = false;
        pte.dirty = false;
        Ok(())
    }

    pub fn translate(&self, vaddr: u64, access: Access, privilege: Privilege) -> TranslationOutcome {
        let vpn = vpn_of(vaddr);
        let kernel_range = self.is_kernel_vpn(vpn);
        let pte = match self.page_table.get(&vpn) {
            Some(pte) if pte.present => pte,
            _ => {
                return TranslationOutcome::Fault(if kernel_range {
                    FaultCause::KernelNotPresent
                } else {
                    FaultCause::UserNotPresent
                })
            }
        };
        match privilege {
            Privilege::User if !pte.user_accessible => {
                return TranslationOutcome::Fault(if pte.is_code { FaultCause::KernelCode } else { FaultCause::KernelData });
            }
            Privilege::Kernel if pte.user_accessible && self.smap_enabled => {
                return TranslationOutcome::Fault(FaultCause::SmapViolation);
            }
            _ => {}
        }
        if !pte.accessed {
            return TranslationOutcome::AssistNeeded(AssistKind::SetAccessed);
        }
        if access == Access::Write && !pte.dirty {
            return TranslationOutcome::AssistNeeded(AssistKind::SetDirty);
        }
        TranslationOutcome::Ok(pte.frame * PAGE_SIZE + page_offset(vaddr))
    }

    /// Runs the retirement-time microcode assist for `vaddr`.
    pub fn apply_assist(&mut self, vaddr: u64, kind: AssistKind) -> Result<(), MemoryError> {
        let vpn = vpn_of(vaddr);
        let pte = self.entry_mut(vpn).ok_or(MemoryError::Unmapped(vpn))?;
        match kind {
            AssistKind::SetAccessed => pte.accessed = true,
            AssistKind::SetDirty => {
                pte.accessed = true;
                pte.dirty = true;
            }
        }
        Ok(())
    }
}

/// Byte-addressed physical memory; unwritten bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhysicalMemory {
    bytes: FxHashMap<u64, u8>,
}

impl PhysicalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, paddr: u64) -> u8 {
        self.bytes.get(&paddr).copied().unwrap_or(0)
    }

    pub fn write(&mut self, paddr: u64, value: u8) {
        if value == 0 {
            self.bytes.remove(&paddr);
        } else {
            self.bytes.insert(paddr, value);
        }
    }

    pub fn clear(&mut self) {
        self.bytes.clear();
    }

    /// Non-zero bytes sorted by address.
    pub fn image(&self) -> BTreeMap<u64, u8> {
        self.bytes.iter().map(|(a, v)| (*a, *v)).collect()
    }
}

/// Set of cached 64-byte lines. Access latency is exactly two-valued.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheModel {
    cached_lines: FxHashSet<u64>,
    hit_cycles: u64,
    miss_cycles: u64,
}

impl CacheModel {
    pub fn new(profile: &ArchProfile) -> Self {
        CacheModel {
            cached_lines: FxHashSet::default(),
            hit_cycles: profile.cache_hit_cycles(),
            miss_cycles: profile.cache_miss_cycles(),
        }
    }

    pub fn hit_cycles(&self) -> u64 {
        self.hit_cycles
    }

    pub fn miss_cycles(&self) -> u64 {
        self.miss_cycles
    }

    pub fn is_cached(&self, paddr: u64) -> bool {
        self.cached_lines.contains(&line_of(paddr))
    }

    /// Brings the line in without reporting a latency (fills, drains).
    pub fn touch(&mut self, paddr: u64) {
        self.cached_lines.insert(line_of(paddr));
    }

    pub fn timed_access(&mut self, paddr: u64) -> u64 {
        if self.cached_lines.insert(line_of(paddr)) {
            self.miss_cycles
        } else {
            self.hit_cycles
        }
    }

    pub fn flush_line(&mut self, paddr: u64) {
        self.cached_lines.remove(&line_of(paddr));
    }

    pub fn clear(&mut self) {
        self.cached_lines.clear();
    }

    pub fn len(&self) -> usize {
        self.cached_lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cached_lines.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Microarch;

    const USER_VPN: u64 = 0x10;
    const KERNEL_VPN: u64 = DEFAULT_KERNEL_BOUNDARY_VPN + 5;

    fn space() -> AddressSpace {
        let mut s = AddressSpace::new();
        s.map(USER_VPN, PageTableEntry::user_data(0x100));
        s.map(KERNEL_VPN, PageTableEntry::kernel_data(0x200));
        s.map(KERNEL_VPN + 1, PageTableEntry::kernel_code(0x201));
        s.map(KERNEL_VPN + 2, PageTableEntry::not_present(0x202));
        s
    }

    fn addr(vpn: u64, off: u64) -> u64 {
        vpn * PAGE_SIZE + off
    }

    #[test]
    fn clean_user_read() {
        let s = space();
        assert_eq!(s.translate(addr(USER_VPN, 7), Access::Read, Privilege::User), TranslationOutcome::Ok(0x100 * PAGE_SIZE + 7));
    }

    #[test]
    fn fault_causes() {
        let mut s = space();
        let user = |s: &AddressSpace, a| s.translate(a, Access::Read, Privilege::User);
        assert_eq!(user(&s, addr(KERNEL_VPN, 0)), TranslationOutcome::Fault(FaultCause::KernelData));
        assert_eq!(user(&s, addr(KERNEL_VPN + 1, 0)), TranslationOutcome::Fault(FaultCause::KernelCode));
        assert_eq!(user(&s, addr(KERNEL_VPN + 2, 0)), TranslationOutcome::Fault(FaultCause::KernelNotPresent));
        // no entry at all behaves like not present, per range
        assert_eq!(user(&s, addr(KERNEL_VPN + 99, 0)), TranslationOutcome::Fault(FaultCause::KernelNotPresent));
        assert_eq!(user(&s, addr(USER_VPN + 99, 0)), TranslationOutcome::Fault(FaultCause::UserNotPresent));

        s.revoke(USER_VPN).unwrap();
        assert_eq!(user(&s, addr(USER_VPN, 7)), TranslationOutcome::Fault(FaultCause::UserNotPresent));
    }

    #[test]
    fn smap_only_for_kernel_touching_user() {
        let mut s = space();
        let a = addr(USER_VPN, 3);
        assert_eq!(s.translate(a, Access::Read, Privilege::Kernel), TranslationOutcome::Fault(FaultCause::SmapViolation));
        assert!(s.translate(addr(KERNEL_VPN, 3), Access::Read, Privilege::Kernel).is_ok());
        s.set_smap(false);
        assert!(s.translate(a, Access::Read, Privilege::Kernel).is_ok());
    }

    #[test]
    fn not_present_ignores_other_bits() {
        let mut s = AddressSpace::new();
        let pte = PageTableEntry { present: false, user_accessible: false, is_code: true, ..Default::default() };
        s.map(USER_VPN, pte);
        assert_eq!(s.translate(addr(USER_VPN, 0), Access::Read, Privilege::User), TranslationOutcome::Fault(FaultCause::UserNotPresent));
    }

    #[test]
    fn accessed_assist_then_ok() {
        let mut s = space();
        let a = addr(USER_VPN, 7);
        s.clear_accessed(USER_VPN).unwrap();
        assert_eq!(s.translate(a, Access::Read, Privilege::User), TranslationOutcome::AssistNeeded(AssistKind::SetAccessed));
        s.apply_assist(a, AssistKind::SetAccessed).unwrap();
        assert!(s.entry(USER_VPN).unwrap().accessed);
        assert!(s.translate(a, Access::Read, Privilege::User).is_ok());
        // a write still needs the dirty bit
        assert_eq!(s.translate(a, Access::Write, Privilege::User), TranslationOutcome::AssistNeeded(AssistKind::SetDirty));
        s.apply_assist(a, AssistKind::SetDirty).unwrap();
        assert!(s.translate(a, Access::Write, Privilege::User).is_ok());
    }

    #[test]
    fn dirty_implies_accessed_over_all_bit_states() {
        for accessed in [false, true] {
            for dirty in [false, true] {
                if dirty && !accessed {
                    continue;
                }
                for kind in [AssistKind::SetAccessed, AssistKind::SetDirty] {
                    let mut s = AddressSpace::new();
                    s.map(USER_VPN, PageTableEntry { accessed, dirty, ..PageTableEntry::user_data(1) });
                    s.apply_assist(addr(USER_VPN, 0), kind).unwrap();
                    let pte = s.entry(USER_VPN).unwrap();
                    assert!(!pte.dirty || pte.accessed);
                    if kind == AssistKind::SetDirty {
                        assert!(pte.dirty && pte.accessed);
                    }
                }
            }
        }
    }

    #[test]
    fn assist_on_unmapped_page_errors() {
        let mut s = AddressSpace::new();
        assert_eq!(s.apply_assist(0x5000, AssistKind::SetAccessed), Err(MemoryError::Unmapped(5)));
    }

    #[test]
    fn pte_flag_parsing() {
        let pte: PageTableEntry = "present,user,accessed,code".parse().unwrap();
        assert!(pte.present && pte.user_accessible && pte.accessed && pte.is_code && !pte.dirty);
        assert_eq!("present,dirty".parse::<PageTableEntry>(), Err(MemoryError::DirtyWithoutAccessed));
        assert!("present,bogus".parse::<PageTableEntry>().is_err());
    }

    #[test]
    fn cache_latencies() {
        let mut c = CacheModel::new(&ArchProfile::builtin(Microarch::Skylake));
        assert_eq!(c.timed_access(0x1000), 250);
        assert_eq!(c.timed_access(0x1000), 50);
        // same 64-byte line
        assert_eq!(c.timed_access(0x103f), 50);
        c.flush_line(0x1000);
        assert_eq!(c.timed_access(0x1000), 250);
        c.flush_line(0x9000);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn flushing_every_probe_line_makes_all_probes_miss() {
        let mut c = CacheModel::new(&ArchProfile::builtin(Microarch::Skylake));
        for slot in 0..256u64 {
            c.touch(slot * PAGE_SIZE);
        }
        for slot in 0..256u64 {
            c.flush_line(slot * PAGE_SIZE);
        }
        for slot in 0..256u64 {
            assert_eq!(c.timed_access(slot * PAGE_SIZE), c.miss_cycles());
        }
    }

    #[test]
    fn zero_writes_keep_image_sparse() {
        let mut m = PhysicalMemory::new();
        m.write(5, 9);
        m.write(6, 0);
        m.write(5, 0);
        assert!(m.image().is_empty());
        assert_eq!(m.read(5), 0);
    }
}
