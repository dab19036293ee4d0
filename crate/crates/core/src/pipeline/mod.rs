//! Straight-line µOP execution with transient windows.
//!
//! A faulting load inside a transaction, a mispredicted guard region, and a
//! load that needs an accessed/dirty microcode assist each open a transient
//! window: the following µOPs (up to a budget) run against shadow registers,
//! and only their cache fills survive. A faulting load's value in that window
//! comes from the store buffer's WTF hit, and only if the profile's leak
//! matrix allows it for the (fault cause, suppression) pair.

mod program;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::memory::{
    vpn_of, Access, AddressSpace, AssistKind, CacheModel, MemoryError, PhysicalMemory, Privilege, TranslationOutcome,
    PAGE_SIZE,
};
use crate::profile::{ArchProfile, FaultCause, Suppression, UndefinedCell};
use crate::store_buffer::{ForwardDecision, HwThread, StoreBuffer, StoreBufferError, StoreData};

pub use program::{MicroOp, Program, ProgramError, Reg, NUM_REGS};

/// µOPs a transient window may execute, growing with store-buffer occupancy.
pub fn transient_budget(profile: &ArchProfile, filler_stores: usize) -> usize {
    profile.transient_base_uops() + filler_stores / profile.transient_stores_per_extra_uop()
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Contract(#[from] UndefinedCell),
    #[error(transparent)]
    StoreBuffer(#[from] StoreBufferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WindowTrigger {
    Fault { cause: FaultCause, suppression: Suppression },
    Assist(AssistKind),
    Mispredict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SideEffect {
    /// Value a transient load produced; `None` means it never became available.
    LoadValue { pc: usize, dst: Reg, value: Option<u8> },
    CacheFill { pc: usize, paddr: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransientWindow {
    pub trigger: WindowTrigger,
    pub trigger_pc: usize,
    pub length_budget: usize,
    pub uops_executed: usize,
    pub executed: Vec<SideEffect>,
}

impl TransientWindow {
    pub fn cache_fills(&self) -> impl Iterator<Item = u64> + '_ {
        self.executed.iter().filter_map(|e| match e {
            SideEffect::CacheFill { paddr, .. } => Some(*paddr),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionStats {
    pub aborted_transactions: usize,
    pub faults_raised: usize,
    /// µOP index of the unsuppressed fault that ended the program.
    pub terminated_at: Option<usize>,
    pub registers: [u8; NUM_REGS],
    pub windows: Vec<TransientWindow>,
}

/// Everything a standalone [`run`] hands back.
#[derive(Debug, Clone)]
pub struct ExecutionResult {
    pub architectural_memory: BTreeMap<u64, u8>,
    pub cache: CacheModel,
    pub space: AddressSpace,
    pub stats: ExecutionStats,
}

impl ExecutionResult {
    pub fn aborted_transactions(&self) -> usize {
        self.stats.aborted_transactions
    }

    pub fn faults_raised(&self) -> usize {
        self.stats.faults_raised
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Drain the store buffer on every return to user mode.
    pub countermeasure_flush: bool,
    /// Standard deviation of the kernel-return latency, in cycles.
    pub return_jitter_cycles: f64,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: u64,
    pub thread: HwThread,
    pub pc: usize,
    pub transient: bool,
    pub op: MicroOp,
    pub note: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = if self.transient { "T" } else { "A" };
        write!(f, "t={:<6} thr={} pc={:<4} {} {:<32}", self.time, self.thread, self.pc, mode, self.op.to_string())?;
        if !self.note.is_empty() {
            write!(f, " ; {}", self.note)?;
        }
        Ok(())
    }
}

struct Transaction {
    begin_order: u64,
    end_pc: usize,
    saved_regs: [u8; NUM_REGS],
}

struct Exec<'p> {
    program: &'p Program,
    thread: HwThread,
    regs: [u8; NUM_REGS],
    privilege: Privilege,
    tx: Option<Transaction>,
    stats: ExecutionStats,
}

enum Flow {
    Next,
    Jump(usize),
    Stop,
}

/// One core: address spaces, physical memory, cache and store buffer.
///
/// Successive [`Simulator::run`] calls share all microarchitectural state, so
/// a victim program followed by an attacker program behaves like two
/// consecutive code regions on the same core.
#[derive(Debug, Clone)]
pub struct Simulator {
    profile: ArchProfile,
    user_space: AddressSpace,
    /// Separate kernel view when page-table isolation is on.
    kernel_space: Option<AddressSpace>,
    memory: PhysicalMemory,
    cache: CacheModel,
    sb: StoreBuffer,
    options: RunOptions,
    rng: ChaCha8Rng,
    now: u64,
    trace: Vec<TraceEvent>,
}

impl Simulator {
    pub fn new(profile: ArchProfile, space: AddressSpace) -> Self {
        let cache = CacheModel::new(&profile);
        let sb = StoreBuffer::for_profile(&profile);
        Self::from_parts(profile, space, sb, cache, PhysicalMemory::new())
    }

    pub fn from_parts(
        profile: ArchProfile,
        space: AddressSpace,
        sb: StoreBuffer,
        cache: CacheModel,
        memory: PhysicalMemory,
    ) -> Self {
        Simulator {
            profile,
            user_space: space,
            kernel_space: None,
            memory,
            cache,
            sb,
            options: RunOptions::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
            now: 0,
            trace: Vec::new(),
        }
    }

    pub fn with_options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    /// Gives the kernel its own address space; entering and leaving the
    /// kernel then switches page tables, which drains the store buffer.
    pub fn with_kernel_space(mut self, space: AddressSpace) -> Self {
        self.kernel_space = Some(space);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.reseed(seed);
        self
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Uses an independent stream of the same seed (per-trial determinism).
    pub fn reseed_stream(&mut self, seed: u64, stream: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(stream);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn profile(&self) -> &ArchProfile {
        &self.profile
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn options_mut(&mut self) -> &mut RunOptions {
        &mut self.options
    }

    pub fn user_space(&self) -> &AddressSpace {
        &self.user_space
    }

    pub fn user_space_mut(&mut self) -> &mut AddressSpace {
        &mut self.user_space
    }

    pub fn kernel_space(&self) -> Option<&AddressSpace> {
        self.kernel_space.as_ref()
    }

    pub fn kernel_space_mut(&mut self) -> Option<&mut AddressSpace> {
        self.kernel_space.as_mut()
    }

    pub fn memory(&self) -> &PhysicalMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut PhysicalMemory {
        &mut self.memory
    }

    pub fn cache(&self) -> &CacheModel {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CacheModel {
        &mut self.cache
    }

    /// The user address space and the cache, borrowed together for a receiver.
    pub fn space_and_cache(&mut self) -> (&AddressSpace, &mut CacheModel) {
        (&self.user_space, &mut self.cache)
    }

    pub fn store_buffer(&self) -> &StoreBuffer {
        &self.sb
    }

    pub fn store_buffer_mut(&mut self) -> &mut StoreBuffer {
        &mut self.sb
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Lets `cycles` pass; the store buffer keeps draining meanwhile.
    pub fn advance_time(&mut self, cycles: u64) {
        self.now += cycles;
        self.sb.drain(&mut self.memory, &mut self.cache, self.now, &self.profile);
    }

    /// Writes back every pending store, as a long idle period would.
    pub fn settle(&mut self) {
        self.sb.flush_all(&mut self.memory, &mut self.cache);
    }

    /// Drops store-buffer contents and cached lines and rewinds the clock.
    /// Memory and page tables are kept.
    pub fn reset_microarch(&mut self) {
        self.sb.reset();
        self.cache.clear();
        self.now = 0;
        self.trace.clear();
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    /// Memory as the program sees it: physical memory overlaid with the
    /// stores still waiting in the buffer.
    pub fn architectural_memory(&self) -> BTreeMap<u64, u8> {
        let mut memory = self.memory.clone();
        for e in self.sb.entries() {
            if let (Some(paddr), Some(data)) = (e.paddr, e.data) {
                for (i, b) in data.as_slice().iter().enumerate() {
                    memory.write(paddr + i as u64, *b);
                }
            }
        }
        memory.image()
    }

    fn space(&self, privilege: Privilege) -> &AddressSpace {
        match (privilege, &self.kernel_space) {
            (Privilege::Kernel, Some(k)) => k,
            _ => &self.user_space,
        }
    }

    fn space_mut(&mut self, privilege: Privilege) -> &mut AddressSpace {
        match (privilege, &mut self.kernel_space) {
            (Privilege::Kernel, Some(k)) => k,
            _ => &mut self.user_space,
        }
    }

    fn note(&mut self, thread: HwThread, pc: usize, transient: bool, op: MicroOp, note: impl FnOnce() -> String) {
        if self.options.trace {
            self.trace.push(TraceEvent { time: self.now, thread, pc, transient, op, note: note() });
        }
    }

    fn kernel_return_latency(&mut self) -> u64 {
        let base = self.profile.kernel_return_cycles() as f64;
        let sigma = self.options.return_jitter_cycles;
        if sigma <= 0.0 {
            return base as u64;
        }
        let jitter = Normal::new(0.0, sigma).expect("finite positive sigma").sample(&mut self.rng);
        (base + jitter).round().max(0.0) as u64
    }

    /// The misforwarded byte for an invalid-translation load, if any.
    fn wtf_value(&mut self, vaddr: u64, translation: TranslationOutcome, order: u64, thread: HwThread) -> Option<u8> {
        match self.sb.match_load(vaddr, translation, order, thread) {
            ForwardDecision::WtfForward { data, .. } => {
                debug_assert!(!translation.is_ok(), "WTF forward on a valid translation");
                let rate = self.profile.wtf_success_rate();
                (rate >= 1.0 || self.rng.random::<f64>() < rate).then_some(data)
            }
            _ => None,
        }
    }

    fn read_ok(&self, vaddr: u64, paddr: u64, order: u64, thread: HwThread) -> u8 {
        match self.sb.match_load(vaddr, TranslationOutcome::Ok(paddr), order, thread) {
            ForwardDecision::TrueForward(b) => b,
            _ => self.memory.read(paddr),
        }
    }

    /// Executes `program` on `thread` in user mode.
    pub fn run(&mut self, program: &Program, thread: HwThread) -> Result<ExecutionStats, SimError> {
        let mut ex = Exec {
            program,
            thread,
            regs: [0; NUM_REGS],
            privilege: Privilege::User,
            tx: None,
            stats: ExecutionStats::default(),
        };
        let mut pc = 0;
        while pc < program.len() {
            match self.step(&mut ex, pc)? {
                Flow::Next => pc += 1,
                Flow::Jump(target) => pc = target,
                Flow::Stop => break,
            }
        }
        ex.stats.registers = ex.regs;
        Ok(ex.stats)
    }

    fn step(&mut self, ex: &mut Exec<'_>, pc: usize) -> Result<Flow, SimError> {
        let op = ex.program.ops()[pc];
        let thread = ex.thread;
        match op {
            MicroOp::Store { vaddr, value } => self.exec_store(ex, pc, vaddr, StoreData::byte(value)),
            MicroOp::StoreWide { vaddr, data } => self.exec_store(ex, pc, vaddr, data),
            MicroOp::Load { vaddr, dst } => self.exec_load(ex, pc, vaddr, dst),
            MicroOp::ProbeTouch { base, reg } => {
                let vaddr = base + PAGE_SIZE * u64::from(ex.regs[reg.index()]);
                self.exec_probe(ex, pc, vaddr)
            }
            MicroOp::TsxBegin => {
                let begin_order = self.sb.allocate_order();
                self.sb.set_commit_barrier(Some(begin_order));
                let end_pc = ex.program.closer_of(pc).expect("validated program");
                ex.tx = Some(Transaction { begin_order, end_pc, saved_regs: ex.regs });
                self.note(thread, pc, false, op, String::new);
                Ok(Flow::Next)
            }
            MicroOp::TsxEnd => {
                ex.tx = None;
                self.sb.set_commit_barrier(None);
                self.note(thread, pc, false, op, || "commit".into());
                Ok(Flow::Next)
            }
            MicroOp::BranchGuard { mispredicted } => {
                let end = ex.program.closer_of(pc).expect("validated program");
                self.note(thread, pc, false, op, String::new);
                if mispredicted {
                    let regs = ex.regs.map(Some);
                    self.transient_window(ex, WindowTrigger::Mispredict, pc, pc + 1, end, regs);
                }
                Ok(Flow::Jump(end + 1))
            }
            MicroOp::GuardEnd => Ok(Flow::Next),
            MicroOp::ClearAccessedBit { vaddr } => {
                self.space_mut(ex.privilege).clear_accessed(vpn_of(vaddr))?;
                self.note(thread, pc, false, op, String::new);
                Ok(Flow::Next)
            }
            MicroOp::EnterKernel => {
                ex.privilege = Privilege::Kernel;
                self.note(thread, pc, false, op, String::new);
                Ok(Flow::Next)
            }
            MicroOp::ExitKernel => {
                let latency = self.kernel_return_latency();
                let before = self.sb.len();
                self.advance_time(latency);
                let drained = before - self.sb.len();
                let cr3_switch = self.kernel_space.is_some();
                let flushed = if cr3_switch || self.options.countermeasure_flush {
                    self.sb.flush_all(&mut self.memory, &mut self.cache)
                } else {
                    0
                };
                ex.privilege = Privilege::User;
                self.note(thread, pc, false, op, || format!("return {latency} cycles, drained {drained}, flushed {flushed}"));
                Ok(Flow::Next)
            }
            MicroOp::Fence => {
                let flushed = self.sb.flush_all(&mut self.memory, &mut self.cache);
                self.note(thread, pc, false, op, || format!("flushed {flushed}"));
                Ok(Flow::Next)
            }
        }
    }

    /// Delivers an architectural fault: aborts the open transaction or ends
    /// the program.
    fn fault(&mut self, ex: &mut Exec<'_>, pc: usize, cause: FaultCause) -> Flow {
        match ex.tx.take() {
            Some(tx) => {
                self.abort(ex, &tx);
                self.note(ex.thread, pc, false, ex.program.ops()[pc], || format!("{cause} fault, transaction aborted"));
                Flow::Jump(tx.end_pc + 1)
            }
            None => {
                ex.stats.faults_raised += 1;
                ex.stats.terminated_at = Some(pc);
                self.note(ex.thread, pc, false, ex.program.ops()[pc], || format!("{cause} fault, program terminated"));
                Flow::Stop
            }
        }
    }

    fn abort(&mut self, ex: &mut Exec<'_>, tx: &Transaction) {
        ex.regs = tx.saved_regs;
        self.sb.squash_from(tx.begin_order);
        self.sb.set_commit_barrier(None);
        ex.stats.aborted_transactions += 1;
    }

    fn exec_store(&mut self, ex: &mut Exec<'_>, pc: usize, vaddr: u64, data: StoreData) -> Result<Flow, SimError> {
        let op = ex.program.ops()[pc];
        let mut translation = self.space(ex.privilege).translate(vaddr, Access::Write, ex.privilege);
        if let TranslationOutcome::AssistNeeded(_) = translation {
            // stores do not forward, so the assist opens no useful window
            self.space_mut(ex.privilege).apply_assist(vaddr, AssistKind::SetDirty)?;
            translation = self.space(ex.privilege).translate(vaddr, Access::Write, ex.privilege);
        }
        let paddr = match translation {
            TranslationOutcome::Ok(p) => p,
            TranslationOutcome::Fault(cause) => return Ok(self.fault(ex, pc, cause)),
            TranslationOutcome::AssistNeeded(kind) => unreachable!("assist {kind:?} persists after SetDirty"),
        };
        match self.sb.push_store(vaddr, paddr, data, ex.thread) {
            Ok(_) => {}
            Err(StoreBufferError::Stall { .. }) if ex.tx.is_some() => {
                // partition full of uncommitted transactional stores: capacity abort
                let tx = ex.tx.take().expect("checked");
                self.abort(ex, &tx);
                self.note(ex.thread, pc, false, op, || "capacity abort".into());
                return Ok(Flow::Jump(tx.end_pc + 1));
            }
            Err(e) => return Err(e.into()),
        }
        self.sb.make_headroom(ex.thread, &mut self.memory, &mut self.cache);
        self.note(ex.thread, pc, false, op, || format!("paddr {paddr:#x}"));
        Ok(Flow::Next)
    }

    fn exec_load(&mut self, ex: &mut Exec<'_>, pc: usize, vaddr: u64, dst: Reg) -> Result<Flow, SimError> {
        let op = ex.program.ops()[pc];
        let translation = self.space(ex.privilege).translate(vaddr, Access::Read, ex.privilege);
        let order = self.sb.allocate_order();
        match translation {
            TranslationOutcome::Ok(paddr) => {
                let value = self.read_ok(vaddr, paddr, order, ex.thread);
                ex.regs[dst.index()] = value;
                self.note(ex.thread, pc, false, op, || format!("{dst} = {value}"));
                Ok(Flow::Next)
            }
            TranslationOutcome::Fault(cause) => {
                if let Some(end) = ex.tx.as_ref().map(|tx| tx.end_pc) {
                    if self.profile.leak_permitted(cause, Suppression::Tsx)? {
                        let value = self.wtf_value(vaddr, translation, order, ex.thread);
                        let mut regs = ex.regs.map(Some);
                        regs[dst.index()] = value;
                        let trigger = WindowTrigger::Fault { cause, suppression: Suppression::Tsx };
                        self.transient_window(ex, trigger, pc, pc + 1, end, regs);
                        if let Some(w) = ex.stats.windows.last_mut() {
                            w.executed.insert(0, SideEffect::LoadValue { pc, dst, value });
                        }
                    }
                }
                Ok(self.fault(ex, pc, cause))
            }
            TranslationOutcome::AssistNeeded(kind) => {
                let value = self.wtf_value(vaddr, translation, order, ex.thread);
                let mut regs = ex.regs.map(Some);
                regs[dst.index()] = value;
                self.note(ex.thread, pc, false, op, || format!("{kind:?} assist, redispatch"));
                self.transient_window(ex, WindowTrigger::Assist(kind), pc, pc + 1, ex.program.len(), regs);
                if let Some(w) = ex.stats.windows.last_mut() {
                    w.executed.insert(0, SideEffect::LoadValue { pc, dst, value });
                }
                self.space_mut(ex.privilege).apply_assist(vaddr, kind)?;
                Ok(Flow::Jump(pc))
            }
        }
    }

    fn exec_probe(&mut self, ex: &mut Exec<'_>, pc: usize, vaddr: u64) -> Result<Flow, SimError> {
        match self.space(ex.privilege).translate(vaddr, Access::Read, ex.privilege) {
            TranslationOutcome::Ok(paddr) => {
                self.cache.touch(paddr);
                self.note(ex.thread, pc, false, ex.program.ops()[pc], || format!("fill {paddr:#x}"));
                Ok(Flow::Next)
            }
            TranslationOutcome::AssistNeeded(kind) => {
                self.space_mut(ex.privilege).apply_assist(vaddr, kind)?;
                Ok(Flow::Jump(pc))
            }
            TranslationOutcome::Fault(cause) => Ok(self.fault(ex, pc, cause)),
        }
    }

    /// Runs `ops[start..stop]` transiently. Nothing architectural changes.
    fn transient_window(
        &mut self,
        ex: &mut Exec<'_>,
        trigger: WindowTrigger,
        trigger_pc: usize,
        start: usize,
        stop: usize,
        mut regs: [Option<u8>; NUM_REGS],
    ) {
        let thread = ex.thread;
        let privilege = ex.privilege;
        let budget = transient_budget(&self.profile, self.sb.occupancy(thread));
        let suppression = match trigger {
            WindowTrigger::Fault { suppression, .. } => Some(suppression),
            WindowTrigger::Mispredict => Some(Suppression::BranchMispredict),
            WindowTrigger::Assist(_) => None,
        };
        let mut window = TransientWindow { trigger, trigger_pc, length_budget: budget, uops_executed: 0, executed: Vec::new() };

        let mut pc = start;
        while pc < stop && window.uops_executed < budget {
            let op = ex.program.ops()[pc];
            match op {
                MicroOp::TsxBegin | MicroOp::TsxEnd | MicroOp::BranchGuard { .. } | MicroOp::GuardEnd => {
                    pc += 1;
                    continue;
                }
                MicroOp::Load { vaddr, dst } => {
                    let translation = self.space(privilege).translate(vaddr, Access::Read, privilege);
                    let order = self.sb.allocate_order();
                    let value = match translation {
                        TranslationOutcome::Ok(paddr) => Some(self.read_ok(vaddr, paddr, order, thread)),
                        TranslationOutcome::Fault(cause) => {
                            let permitted = suppression
                                .is_some_and(|s| self.profile.leak_permitted(cause, s).unwrap_or(false));
                            if permitted {
                                self.wtf_value(vaddr, translation, order, thread)
                            } else {
                                None
                            }
                        }
                        TranslationOutcome::AssistNeeded(_) => self.wtf_value(vaddr, translation, order, thread),
                    };
                    regs[dst.index()] = value;
                    window.executed.push(SideEffect::LoadValue { pc, dst, value });
                    self.note(thread, pc, true, op, || match value {
                        Some(v) => format!("{dst} = {v}"),
                        None => format!("{dst} unavailable"),
                    });
                }
                MicroOp::ProbeTouch { base, reg } => {
                    if let Some(v) = regs[reg.index()] {
                        let vaddr = base + PAGE_SIZE * u64::from(v);
                        if let TranslationOutcome::Ok(paddr) = self.space(privilege).translate(vaddr, Access::Read, privilege) {
                            self.cache.touch(paddr);
                            window.executed.push(SideEffect::CacheFill { pc, paddr });
                            self.note(thread, pc, true, op, || format!("fill {paddr:#x} (slot {v})"));
                        }
                    }
                }
                _ => self.note(thread, pc, true, op, || "dropped".into()),
            }
            window.uops_executed += 1;
            pc += 1;
        }
        ex.stats.windows.push(window);
    }
}

/// Runs one program on a fresh core built from the given parts.
pub fn run(
    program: &Program,
    space: AddressSpace,
    sb: StoreBuffer,
    cache: CacheModel,
    profile: &ArchProfile,
    countermeasure_flush: bool,
    seed: u64,
) -> Result<ExecutionResult, SimError> {
    let mut sim = Simulator::from_parts(profile.clone(), space, sb, cache, PhysicalMemory::new())
        .with_options(RunOptions { countermeasure_flush, ..RunOptions::default() })
        .with_seed(seed);
    let stats = sim.run(program, HwThread::T0)?;
    Ok(ExecutionResult {
        architectural_memory: sim.architectural_memory(),
        cache: sim.cache.clone(),
        space: sim.user_space.clone(),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Microarch;
    use crate::victims::{self, layout};

    fn sim(arch: Microarch) -> Simulator {
        Simulator::new(ArchProfile::builtin(arch), victims::lab_space())
    }

    fn program(text: &str) -> Program {
        Program::parse(text).unwrap()
    }

    fn probe_fills(stats: &ExecutionStats) -> Vec<u64> {
        stats.windows.iter().flat_map(|w| w.cache_fills()).collect()
    }

    #[test]
    fn tsx_fault_forwards_store_into_window() {
        let mut s = sim(Microarch::Skylake);
        let victim = layout::page(layout::VICTIM_VPN) + 7;
        let kernel = layout::page(layout::KERNEL_DATA_VPN) + 7;
        let base = victims::probe_array().base();
        let p = program(&format!("store {victim:#x} 42\ntsx_begin\nload {kernel:#x} r0\nprobe {base:#x} r0\ntsx_end\nload {victim:#x} r1"));
        let stats = s.run(&p, HwThread::T0).unwrap();
        assert_eq!(stats.aborted_transactions, 1);
        assert_eq!(stats.faults_raised, 0);
        assert_eq!(stats.registers[0], 0, "aborted transaction restores registers");
        assert_eq!(stats.registers[1], 42, "architectural load sees the buffered store");
        let slot42 = s.user_space().translate(base + 42 * PAGE_SIZE, Access::Read, Privilege::User);
        assert_eq!(probe_fills(&stats), vec![match slot42 {
            TranslationOutcome::Ok(p) => p,
            other => panic!("{other:?}"),
        }]);
    }

    #[test]
    fn forbidden_cell_opens_no_window() {
        let mut s = sim(Microarch::CoffeeLakeR);
        let kernel = layout::page(layout::KERNEL_DATA_VPN) + 7;
        let p = program(&format!("store {:#x} 42\ntsx_begin\nload {kernel:#x} r0\nprobe 0x100000 r0\ntsx_end", layout::page(layout::VICTIM_VPN) + 7));
        let stats = s.run(&p, HwThread::T0).unwrap();
        assert_eq!(stats.aborted_transactions, 1);
        assert!(stats.windows.is_empty());
    }

    #[test]
    fn unsuppressed_fault_terminates() {
        let mut s = sim(Microarch::Skylake);
        let kernel = layout::page(layout::KERNEL_DATA_VPN);
        let p = program(&format!("load {kernel:#x} r0\nstore {:#x} 1", layout::page(layout::VICTIM_VPN)));
        let stats = s.run(&p, HwThread::T0).unwrap();
        assert_eq!(stats.faults_raised, 1);
        assert_eq!(stats.terminated_at, Some(0));
        assert!(s.store_buffer().is_empty());
    }

    #[test]
    fn mispredicted_guard_runs_region_transiently() {
        let mut s = sim(Microarch::Skylake);
        let victim = layout::page(layout::VICTIM_VPN);
        let p = program(&format!("guard mispredicted\nstore {victim:#x} 9\nload {victim:#x} r0\nguard_end"));
        let stats = s.run(&p, HwThread::T0).unwrap();
        assert!(s.store_buffer().is_empty(), "transient stores never reach the buffer");
        assert_eq!(stats.windows.len(), 1);
        assert_eq!(stats.windows[0].trigger, WindowTrigger::Mispredict);
        assert_eq!(stats.registers[0], 0);
    }

    #[test]
    fn assist_reexecutes_with_architectural_value() {
        let mut s = sim(Microarch::CoffeeLakeR);
        let attacker = layout::page(layout::ATTACKER_VPN) + 7;
        s.memory_mut().write(layout::ATTACKER_VPN * PAGE_SIZE + 7, 5);
        let p = program(&format!(
            "store {:#x} 42\nclear_accessed {attacker:#x}\nload {attacker:#x} r0",
            layout::page(layout::VICTIM_VPN) + 7
        ));
        let stats = s.run(&p, HwThread::T0).unwrap();
        assert_eq!(stats.faults_raised, 0);
        assert_eq!(stats.registers[0], 5);
        assert_eq!(stats.windows.len(), 1);
        assert_eq!(stats.windows[0].executed[0], SideEffect::LoadValue { pc: 2, dst: Reg::new(0).unwrap(), value: Some(42) });
        assert!(s.user_space().entry(layout::ATTACKER_VPN).unwrap().accessed);
    }

    #[test]
    fn transactional_stores_overflowing_partition_abort() {
        let mut s = sim(Microarch::Skylake);
        let victim = layout::page(layout::VICTIM_VPN);
        let mut text = String::from("tsx_begin\n");
        for i in 0..60 {
            text.push_str(&format!("store {:#x} 1\n", victim + i));
        }
        text.push_str("tsx_end");
        let stats = s.run(&program(&text), HwThread::T0).unwrap();
        assert_eq!(stats.aborted_transactions, 1);
        assert!(s.store_buffer().is_empty());
    }

    #[test]
    fn kernel_exit_drains_and_cr3_switch_flushes() {
        let kdata = layout::page(layout::KERNEL_DATA_VPN);
        let store = format!("enter_kernel\nstore {kdata:#x} 1\nstore {:#x} 2\nexit_kernel", kdata + 1);
        let mut plain = sim(Microarch::Skylake);
        plain.run(&program(&store), HwThread::T0).unwrap();
        // 400 return cycles at 40 per entry drain both stores
        assert!(plain.store_buffer().is_empty());
        assert_eq!(plain.now(), 400);

        let mut kpti = sim(Microarch::Skylake).with_kernel_space(victims::lab_space());
        let many: String = (0..20).map(|i| format!("store {:#x} 1\n", kdata + i)).collect();
        let stats = kpti.run(&program(&format!("enter_kernel\n{many}exit_kernel")), HwThread::T0).unwrap();
        assert_eq!(stats.faults_raised, 0);
        assert!(kpti.store_buffer().is_empty());
    }

    #[test]
    fn budget_grows_with_occupancy() {
        let p = ArchProfile::builtin(Microarch::Skylake);
        assert!(transient_budget(&p, 0) < transient_budget(&p, 48));
        assert_eq!(transient_budget(&p, 0), p.transient_base_uops());
    }
}
