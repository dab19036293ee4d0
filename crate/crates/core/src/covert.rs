//! Flush+Reload over a 256-slot probe array.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::memory::{
    page_offset, Access, AddressSpace, CacheModel, PageTableEntry, Privilege, TranslationOutcome, PAGE_SIZE,
};
use crate::pipeline::{MicroOp, Reg};

pub const PROBE_SLOTS: usize = 256;
pub const PROBE_STRIDE: u64 = PAGE_SIZE;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CovertError {
    #[error("threshold {threshold} must lie strictly between hit ({hit}) and miss ({miss}) latency")]
    BadThreshold { threshold: u64, hit: u64, miss: u64 },
    #[error("probe base {0:#x} is not page aligned")]
    Misaligned(u64),
    #[error("probe slot {0} is not mapped for the receiver")]
    Unmapped(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProbeArray {
    base: u64,
}

impl ProbeArray {
    pub fn new(base: u64) -> Result<Self, CovertError> {
        if page_offset(base) != 0 {
            return Err(CovertError::Misaligned(base));
        }
        Ok(ProbeArray { base })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn slot_vaddr(&self, slot: u8) -> u64 {
        self.base + PROBE_STRIDE * u64::from(slot)
    }

    /// Maps the 256 probe pages as ordinary user data starting at `first_frame`.
    pub fn map_into(&self, space: &mut AddressSpace, first_frame: u64) {
        let first_vpn = self.base / PAGE_SIZE;
        for i in 0..PROBE_SLOTS as u64 {
            space.map(first_vpn + i, PageTableEntry::user_data(first_frame + i));
        }
    }

    /// The transmitter: `probe base, reg`.
    pub fn touch_op(&self, reg: Reg) -> MicroOp {
        MicroOp::ProbeTouch { base: self.base, reg }
    }

    fn slot_paddr(&self, space: &AddressSpace, slot: usize) -> Result<u64, CovertError> {
        let vaddr = self.base + PROBE_STRIDE * slot as u64;
        match space.translate(vaddr, Access::Read, Privilege::User) {
            TranslationOutcome::Ok(p) => Ok(p),
            _ => Err(CovertError::Unmapped(slot)),
        }
    }

    /// Resolves the receiver's 256 slot addresses once, for trial loops
    /// that keep the address space fixed.
    pub fn resolve(&self, space: &AddressSpace) -> Result<ResolvedProbe, CovertError> {
        let paddrs = (0..PROBE_SLOTS).map(|slot| self.slot_paddr(space, slot)).collect::<Result<_, _>>()?;
        Ok(ResolvedProbe { paddrs })
    }

    /// Flushes every probe line.
    pub fn prime(&self, space: &AddressSpace, cache: &mut CacheModel) -> Result<(), CovertError> {
        self.resolve(space)?.prime(cache);
        Ok(())
    }

    /// Times a reload of every slot. Reloading caches the lines, so the
    /// receiver has to prime again before the next trial.
    pub fn decode(&self, space: &AddressSpace, cache: &mut CacheModel, threshold: u64) -> Result<ProbeReading, CovertError> {
        self.resolve(space)?.decode(cache, threshold)
    }

    pub fn flush_slot(&self, space: &AddressSpace, cache: &mut CacheModel, slot: u8) -> Result<(), CovertError> {
        cache.flush_line(self.slot_paddr(space, slot as usize)?);
        Ok(())
    }

    /// Times a reload of one slot only, for a receiver that knows which
    /// value it is waiting for.
    pub fn probe_slot(&self, space: &AddressSpace, cache: &mut CacheModel, slot: u8, threshold: u64) -> Result<bool, CovertError> {
        check_threshold(cache, threshold)?;
        Ok(cache.timed_access(self.slot_paddr(space, slot as usize)?) < threshold)
    }

    /// With probability `p`, caches one uniformly chosen slot (prefetcher
    /// or other noise). Returns the polluted slot.
    pub fn inject_noise(
        &self,
        space: &AddressSpace,
        cache: &mut CacheModel,
        p: f64,
        rng: &mut impl Rng,
    ) -> Result<Option<u8>, CovertError> {
        if p <= 0.0 || rng.random::<f64>() >= p {
            return Ok(None);
        }
        let slot: u8 = rng.random();
        cache.touch(self.slot_paddr(space, slot as usize)?);
        Ok(Some(slot))
    }
}

/// Probe array with its physical slot addresses already looked up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedProbe {
    paddrs: Vec<u64>,
}

impl ResolvedProbe {
    pub fn slot_paddr(&self, slot: u8) -> u64 {
        self.paddrs[slot as usize]
    }

    pub fn prime(&self, cache: &mut CacheModel) {
        for &p in &self.paddrs {
            cache.flush_line(p);
        }
    }

    pub fn decode(&self, cache: &mut CacheModel, threshold: u64) -> Result<ProbeReading, CovertError> {
        check_threshold(cache, threshold)?;
        let latencies = self.paddrs.iter().map(|&p| cache.timed_access(p)).collect();
        Ok(ProbeReading::new(latencies, threshold))
    }
}

pub fn check_threshold(cache: &CacheModel, threshold: u64) -> Result<(), CovertError> {
    let (hit, miss) = (cache.hit_cycles(), cache.miss_cycles());
    if threshold <= hit || threshold >= miss {
        return Err(CovertError::BadThreshold { threshold, hit, miss });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeReading {
    pub latencies: Vec<u64>,
    pub threshold: u64,
    pub hits: BTreeSet<u8>,
}

impl ProbeReading {
    pub fn new(latencies: Vec<u64>, threshold: u64) -> Self {
        let hits = latencies
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < threshold)
            .map(|(i, _)| i as u8)
            .collect();
        ProbeReading { latencies, threshold, hits }
    }

    /// The hit slot if exactly one slot hit.
    pub fn single_hit(&self) -> Option<u8> {
        match self.hits.len() {
            1 => self.hits.first().copied(),
            _ => None,
        }
    }

    /// `slot,latency` rows.
    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot", "latency"])?;
        for (slot, latency) in self.latencies.iter().enumerate() {
            w.serialize((slot, latency))?;
        }
        w.flush()?;
        Ok(())
    }
}
