//! The store buffer.
//!
//! Entries are kept in program order. A store is split into a store-address
//! half (STA, resolves `paddr`) and a store-data half (SDA, provides the
//! bytes); [`StoreBuffer::push_store`] performs both at once.
//!
//! Loads are matched youngest-first on the 12-bit page offset. A load whose
//! own translation succeeded only takes data from an entry with the same
//! physical address. A load whose translation failed or needs an assist takes
//! data from the first offset match regardless of the physical address: that
//! is the write-transient-forwarding (WTF) hit.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::memory::{page_offset, CacheModel, PhysicalMemory, TranslationOutcome, PAGE_SIZE};
use crate::profile::ArchProfile;

/// Widest store the model accepts (one `movaps`).
pub const MAX_STORE_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum HwThread {
    T0,
    T1,
}

impl HwThread {
    pub fn index(self) -> usize {
        match self {
            HwThread::T0 => 0,
            HwThread::T1 => 1,
        }
    }
}

impl fmt::Display for HwThread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Up to 16 bytes written by one store µOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreData {
    bytes: [u8; MAX_STORE_BYTES],
    len: u8,
}

impl StoreData {
    pub fn byte(value: u8) -> Self {
        let mut bytes = [0; MAX_STORE_BYTES];
        bytes[0] = value;
        StoreData { bytes, len: 1 }
    }

    pub fn from_slice(data: &[u8]) -> Result<Self, StoreBufferError> {
        if data.is_empty() || data.len() > MAX_STORE_BYTES {
            return Err(StoreBufferError::BadWidth(data.len()));
        }
        let mut bytes = [0; MAX_STORE_BYTES];
        bytes[..data.len()].copy_from_slice(data);
        Ok(StoreData { bytes, len: data.len() as u8 })
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreBufferEntry {
    pub vaddr: u64,
    pub page_offset: u64,
    pub width: usize,
    pub paddr: Option<u64>,
    pub data: Option<StoreData>,
    pub sta_resolved: bool,
    pub sda_present: bool,
    pub program_order: u64,
    pub hw_thread: HwThread,
}

impl StoreBufferEntry {
    fn covers_offset(&self, offset: u64) -> bool {
        offset >= self.page_offset && offset < self.page_offset + self.width as u64
    }

    fn byte_at_offset(&self, offset: u64) -> Option<u8> {
        let data = self.data?;
        data.as_slice().get((offset - self.page_offset) as usize).copied()
    }

    fn drainable(&self, barrier: Option<u64>) -> bool {
        self.sta_resolved && self.sda_present && barrier.is_none_or(|b| self.program_order < b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ForwardDecision {
    NoForward,
    TrueForward(u8),
    WtfForward { data: u8, matched_order: u64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreBufferError {
    #[error("store buffer full for hw thread {thread} ({capacity} entries); drain first")]
    Stall { thread: HwThread, capacity: usize },
    #[error("no store buffer entry with program order {0}")]
    UnknownEntry(u64),
    #[error("store width {0} is outside 1..=16 bytes")]
    BadWidth(usize),
    #[error("store at page offset {offset:#x} with width {width} crosses a page boundary")]
    CrossesPage { offset: u64, width: usize },
    #[error("store data width {got} does not match address width {expected}")]
    WidthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct StoreBuffer {
    entries: VecDeque<StoreBufferEntry>,
    capacity: usize,
    partitioned: bool,
    next_order: u64,
    /// Entries at or after this program order belong to an open transaction.
    commit_barrier: Option<u64>,
    drain_clock: u64,
    drain_credit: u64,
}

impl StoreBuffer {
    pub fn new(capacity: usize) -> Self {
        StoreBuffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            partitioned: false,
            next_order: 0,
            commit_barrier: None,
            drain_clock: 0,
            drain_credit: 0,
        }
    }

    pub fn for_profile(profile: &ArchProfile) -> Self {
        Self::new(profile.sb_capacity())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn partitioned(&self) -> bool {
        self.partitioned
    }

    /// Static partitioning takes effect only while the sibling hyperthread runs.
    pub fn set_partitioned(&mut self, partitioned: bool) {
        self.partitioned = partitioned;
    }

    pub fn effective_capacity(&self) -> usize {
        if self.partitioned {
            self.capacity / 2
        } else {
            self.capacity
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn occupancy(&self, thread: HwThread) -> usize {
        self.entries.iter().filter(|e| e.hw_thread == thread).count()
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoreBufferEntry> {
        self.entries.iter()
    }

    /// Hands out the next program-order sequence number (loads need one too).
    pub fn allocate_order(&mut self) -> u64 {
        let order = self.next_order;
        self.next_order += 1;
        order
    }

    /// Drops all entries and rewinds the drain clock; sequence numbers keep
    /// increasing.
    pub fn reset(&mut self) {
        self.entries.clear();
        self.commit_barrier = None;
        self.drain_clock = 0;
        self.drain_credit = 0;
    }

    fn check_room(&self, thread: HwThread) -> Result<(), StoreBufferError> {
        let cap = self.effective_capacity();
        if self.occupancy(thread) >= cap {
            return Err(StoreBufferError::Stall { thread, capacity: cap });
        }
        Ok(())
    }

    /// Allocates an entry and resolves both µOPs.
    pub fn push_store(&mut self, vaddr: u64, paddr: u64, data: StoreData, thread: HwThread) -> Result<u64, StoreBufferError> {
        let order = self.push_sta(vaddr, Some(paddr), data.len(), thread)?;
        self.attach_sda(order, data)?;
        Ok(order)
    }

    /// Allocates an entry for the store-address µOP. `paddr` may still be
    /// unknown.
    pub fn push_sta(&mut self, vaddr: u64, paddr: Option<u64>, width: usize, thread: HwThread) -> Result<u64, StoreBufferError> {
        if width == 0 || width > MAX_STORE_BYTES {
            return Err(StoreBufferError::BadWidth(width));
        }
        let offset = page_offset(vaddr);
        if offset + width as u64 > PAGE_SIZE {
            return Err(StoreBufferError::CrossesPage { offset, width });
        }
        self.check_room(thread)?;
        let order = self.allocate_order();
        self.entries.push_back(StoreBufferEntry {
            vaddr,
            page_offset: offset,
            width,
            paddr,
            data: None,
            sta_resolved: paddr.is_some(),
            sda_present: false,
            program_order: order,
            hw_thread: thread,
        });
        Ok(order)
    }

    pub fn resolve_sta(&mut self, order: u64, paddr: u64) -> Result<(), StoreBufferError> {
        let e = self.entry_mut(order)?;
        e.paddr = Some(paddr);
        e.sta_resolved = true;
        Ok(())
    }

    pub fn attach_sda(&mut self, order: u64, data: StoreData) -> Result<(), StoreBufferError> {
        let e = self.entry_mut(order)?;
        if data.len() != e.width {
            return Err(StoreBufferError::WidthMismatch { expected: e.width, got: data.len() });
        }
        e.data = Some(data);
        e.sda_present = true;
        Ok(())
    }

    fn entry_mut(&mut self, order: u64) -> Result<&mut StoreBufferEntry, StoreBufferError> {
        self.entries
            .iter_mut()
            .find(|e| e.program_order == order)
            .ok_or(StoreBufferError::UnknownEntry(order))
    }

    /// Store-to-load forwarding check for a one-byte load.
    pub fn match_load(&self, load_vaddr: u64, translation: TranslationOutcome, load_order: u64, thread: HwThread) -> ForwardDecision {
        let offset = page_offset(load_vaddr);
        let candidates = self
            .entries
            .iter()
            .rev()
            .filter(|e| e.hw_thread == thread && e.program_order < load_order && e.sda_present)
            .filter(|e| e.covers_offset(offset));
        for e in candidates {
            let Some(byte) = e.byte_at_offset(offset) else { continue };
            match translation {
                TranslationOutcome::Ok(p) => {
                    let exact = e.paddr.is_some_and(|base| base + (offset - e.page_offset) == p);
                    if exact {
                        return ForwardDecision::TrueForward(byte);
                    }
                }
                TranslationOutcome::Fault(_) | TranslationOutcome::AssistNeeded(_) => {
                    return ForwardDecision::WtfForward { data: byte, matched_order: e.program_order };
                }
            }
        }
        ForwardDecision::NoForward
    }

    /// Blocks draining of entries at or after `order` (open transaction).
    pub fn set_commit_barrier(&mut self, order: Option<u64>) {
        self.commit_barrier = order;
    }

    /// Discards uncommitted entries from `order` onwards (transaction abort).
    pub fn squash_from(&mut self, order: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.program_order < order);
        before - self.entries.len()
    }

    fn write_back(e: &StoreBufferEntry, memory: &mut PhysicalMemory, cache: &mut CacheModel) {
        let (Some(paddr), Some(data)) = (e.paddr, e.data) else { return };
        for (i, b) in data.as_slice().iter().enumerate() {
            memory.write(paddr + i as u64, *b);
            cache.touch(paddr + i as u64);
        }
    }

    fn drain_front(&mut self, memory: &mut PhysicalMemory, cache: &mut CacheModel) -> bool {
        match self.entries.front() {
            Some(e) if e.drainable(self.commit_barrier) => {
                let e = self.entries.pop_front().expect("front exists");
                Self::write_back(&e, memory, cache);
                true
            }
            _ => false,
        }
    }

    /// Advances the drain clock to `now`, writing back one entry per
    /// `sb_drain_cycles_per_entry` elapsed, oldest first.
    pub fn drain(&mut self, memory: &mut PhysicalMemory, cache: &mut CacheModel, now: u64, profile: &ArchProfile) -> usize {
        if now > self.drain_clock {
            self.drain_credit += now - self.drain_clock;
            self.drain_clock = now;
        }
        let per_entry = profile.sb_drain_cycles_per_entry();
        let mut drained = 0;
        while self.drain_credit >= per_entry && self.drain_front(memory, cache) {
            self.drain_credit -= per_entry;
            drained += 1;
        }
        if self.entries.is_empty() {
            // an idle buffer does not bank drain time
            self.drain_credit = 0;
        }
        drained
    }

    /// Drains every resolvable, committed entry immediately (fence or
    /// domain-switch flush).
    pub fn flush_all(&mut self, memory: &mut PhysicalMemory, cache: &mut CacheModel) -> usize {
        let barrier = self.commit_barrier;
        let mut drained = 0;
        let mut kept = VecDeque::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            if e.drainable(barrier) {
                Self::write_back(&e, memory, cache);
                drained += 1;
            } else {
                kept.push_back(e);
            }
        }
        self.entries = kept;
        self.drain_credit = 0;
        drained
    }

    /// Keeps one free slot in `thread`'s partition: if the partition is
    /// full, its oldest entry is written back. Returns whether one was.
    ///
    /// With capacity C this makes the oldest of N back-to-back stores
    /// observable only for N ≤ C − 1.
    pub fn make_headroom(&mut self, thread: HwThread, memory: &mut PhysicalMemory, cache: &mut CacheModel) -> bool {
        if self.occupancy(thread) < self.effective_capacity() {
            return false;
        }
        let barrier = self.commit_barrier;
        let Some(idx) = self.entries.iter().position(|e| e.hw_thread == thread) else { return false };
        if !self.entries[idx].drainable(barrier) {
            return false;
        }
        let e = self.entries.remove(idx).expect("index in range");
        Self::write_back(&e, memory, cache);
        true
    }

    /// Human-readable table for `--dump-sb`.
    pub fn dump_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>3} {:>18} {:>6} {:>5} {:>18} {:>3} {:>3} data",
            "order", "thr", "vaddr", "offset", "width", "paddr", "sta", "sda"
        );
        for e in &self.entries {
            let paddr = e.paddr.map(|p| format!("{p:#x}")).unwrap_or_else(|| "-".into());
            let data = e.data.map(|d| hex::encode(d.as_slice())).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:>6} {:>3} {:>#18x} {:>#6x} {:>5} {:>18} {:>3} {:>3} {}",
                e.program_order,
                e.hw_thread,
                e.vaddr,
                e.page_offset,
                e.width,
                paddr,
                u8::from(e.sta_resolved),
                u8::from(e.sda_present),
                data
            );
        }
        out
    }
}
