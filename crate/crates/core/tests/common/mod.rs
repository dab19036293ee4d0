#![allow(dead_code)]

pub mod fifo;

use std::collections::{BTreeMap, HashMap};

use falloutsim::memory::{AddressSpace, PageTableEntry, PAGE_SIZE};
use falloutsim::pipeline::{MicroOp, Program, Reg, RunOptions, Simulator};
use falloutsim::profile::{ArchProfile, Microarch};
use falloutsim::store_buffer::{HwThread, StoreData};
use proptest::test_runner::TestCaseError;
use falloutsim::victims::layout;
use proptest::prelude::*;

/// Architectural outcome of a program, as an in-order machine without any
/// speculation would produce it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefOutcome {
    pub registers: [u8; 16],
    pub memory: BTreeMap<u64, u8>,
    pub faults_raised: usize,
    pub aborted_transactions: usize,
    pub terminated_at: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct RefPte {
    frame: u64,
    present: bool,
    user: bool,
    accessed: bool,
    dirty: bool,
}

/// Plain in-order interpreter. Knows nothing about store buffers, caches or
/// transient execution.
pub struct Reference {
    ptes: HashMap<u64, RefPte>,
    mem: HashMap<u64, u8>,
}

impl Reference {
    pub fn new(space: &AddressSpace, memory: &BTreeMap<u64, u8>) -> Self {
        let ptes = space
            .entries()
            .map(|(vpn, e)| {
                (vpn, RefPte { frame: e.frame, present: e.present, user: e.user_accessible, accessed: e.accessed, dirty: e.dirty })
            })
            .collect();
        Reference { ptes, mem: memory.iter().map(|(a, v)| (*a, *v)).collect() }
    }

    /// `None` means the access faults. Kernel accesses to user pages fault (SMAP).
    fn translate(&mut self, vaddr: u64, write: bool, kernel: bool) -> Option<u64> {
        let pte = self.ptes.get_mut(&(vaddr / PAGE_SIZE))?;
        if !pte.present || (!kernel && !pte.user) || (kernel && pte.user) {
            return None;
        }
        pte.accessed = true;
        pte.dirty |= write;
        Some(pte.frame * PAGE_SIZE + vaddr % PAGE_SIZE)
    }

    pub fn run(mut self, program: &Program) -> RefOutcome {
        let ops = program.ops();
        let mut regs = [0u8; 16];
        let mut kernel = false;
        let mut tx: Option<(usize, [u8; 16], HashMap<u64, u8>)> = None;
        let (mut faults, mut aborts, mut terminated) = (0, 0, None);
        let mut pc = 0;
        while pc < ops.len() {
            let mut faulted = false;
            match ops[pc] {
                MicroOp::Store { vaddr, value } => match self.translate(vaddr, true, kernel) {
                    Some(p) => {
                        self.mem.insert(p, value);
                    }
                    None => faulted = true,
                },
                MicroOp::StoreWide { vaddr, data } => match self.translate(vaddr, true, kernel) {
                    Some(p) => {
                        for (i, b) in data.as_slice().iter().enumerate() {
                            self.mem.insert(p + i as u64, *b);
                        }
                    }
                    None => faulted = true,
                },
                MicroOp::Load { vaddr, dst } => match self.translate(vaddr, false, kernel) {
                    Some(p) => regs[dst.index()] = self.mem.get(&p).copied().unwrap_or(0),
                    None => faulted = true,
                },
                MicroOp::ProbeTouch { base, reg } => {
                    faulted = self.translate(base + PAGE_SIZE * u64::from(regs[reg.index()]), false, kernel).is_none();
                }
                MicroOp::TsxBegin => {
                    let end = (pc..ops.len()).find(|&i| ops[i] == MicroOp::TsxEnd).expect("balanced");
                    tx = Some((end, regs, self.mem.clone()));
                }
                MicroOp::TsxEnd => tx = None,
                MicroOp::BranchGuard { .. } => {
                    pc = (pc..ops.len()).find(|&i| ops[i] == MicroOp::GuardEnd).expect("balanced");
                }
                MicroOp::GuardEnd | MicroOp::Fence => {}
                MicroOp::ClearAccessedBit { vaddr } => {
                    let pte = self.ptes.get_mut(&(vaddr / PAGE_SIZE)).expect("mapped");
                    pte.accessed = false;
                    pte.dirty = false;
                }
                MicroOp::EnterKernel => kernel = true,
                MicroOp::ExitKernel => kernel = false,
            }
            if faulted {
                match tx.take() {
                    Some((end, saved_regs, saved_mem)) => {
                        regs = saved_regs;
                        self.mem = saved_mem;
                        aborts += 1;
                        pc = end + 1;
                        continue;
                    }
                    None => {
                        faults += 1;
                        terminated = Some(pc);
                        break;
                    }
                }
            }
            pc += 1;
        }
        RefOutcome {
            registers: regs,
            memory: self.mem.into_iter().filter(|(_, v)| *v != 0).collect(),
            faults_raised: faults,
            aborted_transactions: aborts,
            terminated_at: terminated,
        }
    }
}

pub const GEN_VPNS: [u64; 6] = [
    layout::VICTIM_VPN,
    layout::ATTACKER_VPN,
    layout::FILLER_VPN,
    layout::KERNEL_DATA_VPN,
    layout::KERNEL_CODE_VPN,
    layout::KERNEL_NOT_PRESENT_VPN,
];

/// Page offsets chosen so that different pages alias often.
fn offset() -> impl Strategy<Value = u64> {
    prop_oneof![0u64..8, Just(0x7f0u64), Just(0xff8u64)]
}

fn addr() -> impl Strategy<Value = u64> {
    (prop::sample::select(&GEN_VPNS[..]), offset()).prop_map(|(vpn, off)| vpn * PAGE_SIZE + off)
}

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..4).prop_map(|r| Reg::new(r).unwrap())
}

pub fn plain_op() -> impl Strategy<Value = MicroOp> {
    prop_oneof![
        4 => (addr(), any::<u8>()).prop_map(|(vaddr, value)| MicroOp::Store { vaddr, value }),
        1 => (prop::sample::select(&GEN_VPNS[..]), 0u64..4, any::<[u8; 16]>()).prop_map(|(vpn, slot, bytes)| {
            MicroOp::StoreWide { vaddr: vpn * PAGE_SIZE + slot * 16, data: StoreData::from_slice(&bytes).unwrap() }
        }),
        4 => (addr(), reg()).prop_map(|(vaddr, dst)| MicroOp::Load { vaddr, dst }),
        2 => reg().prop_map(|reg| MicroOp::ProbeTouch { base: layout::page(layout::PROBE_VPN), reg }),
        1 => prop::sample::select(&GEN_VPNS[..3]).prop_map(|vpn| MicroOp::ClearAccessedBit { vaddr: vpn * PAGE_SIZE }),
        1 => Just(MicroOp::Fence),
    ]
}

fn block() -> impl Strategy<Value = Vec<MicroOp>> {
    let body = || prop::collection::vec(plain_op(), 0..8);
    prop_oneof![
        4 => plain_op().prop_map(|op| vec![op]),
        2 => body().prop_map(|b| wrap(MicroOp::TsxBegin, b, MicroOp::TsxEnd)),
        1 => (any::<bool>(), body()).prop_map(|(m, b)| wrap(MicroOp::BranchGuard { mispredicted: m }, b, MicroOp::GuardEnd)),
        1 => body().prop_map(|b| wrap(MicroOp::EnterKernel, b, MicroOp::ExitKernel)),
    ]
}

fn wrap(open: MicroOp, body: Vec<MicroOp>, close: MicroOp) -> Vec<MicroOp> {
    let mut ops = vec![open];
    ops.extend(body);
    ops.push(close);
    ops
}

pub fn program() -> impl Strategy<Value = Program> {
    prop::collection::vec(block(), 1..12).prop_map(|blocks| Program::new(blocks.concat()).unwrap())
}

/// Lab space with some pages' flags perturbed.
pub fn perturbed_space() -> impl Strategy<Value = AddressSpace> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(revoke, clear_victim, clear_kernel)| {
        let mut space = falloutsim::victims::lab_space();
        if revoke {
            space.revoke(layout::ATTACKER_VPN).unwrap();
        }
        if clear_victim {
            space.clear_accessed(layout::VICTIM_VPN).unwrap();
        }
        if clear_kernel {
            space.map(layout::KERNEL_DATA_VPN, PageTableEntry { accessed: false, dirty: false, ..PageTableEntry::kernel_data(0x20) });
        }
        space
    })
}

/// A few non-zero bytes in the frames the generator touches.
pub fn initial_memory() -> impl Strategy<Value = BTreeMap<u64, u8>> {
    prop::collection::btree_map(
        (prop::sample::select(&GEN_VPNS[..]), offset()).prop_map(|(vpn, off)| {
            let frame = match vpn {
                layout::KERNEL_DATA_VPN => 0x20,
                layout::KERNEL_CODE_VPN => 0x21,
                layout::KERNEL_NOT_PRESENT_VPN => 0x22,
                user => user,
            };
            frame * PAGE_SIZE + off
        }),
        1u8..=255,
        0..6,
    )
}

pub fn arch() -> impl Strategy<Value = Microarch> {
    prop::sample::select(&Microarch::ALL[..])
}

#[derive(Debug, Clone)]
pub struct EquivalenceCase {
    pub arch: Microarch,
    pub space: AddressSpace,
    pub memory: BTreeMap<u64, u8>,
    pub program: Program,
    pub partitioned: bool,
    pub jitter: f64,
    pub seed: u64,
}

pub fn equivalence_case() -> impl Strategy<Value = EquivalenceCase> {
    (arch(), perturbed_space(), initial_memory(), program(), any::<bool>(), prop_oneof![Just(0.0), Just(100.0)], any::<u64>())
        .prop_map(|(arch, space, memory, program, partitioned, jitter, seed)| EquivalenceCase {
            arch,
            space,
            memory,
            program,
            partitioned,
            jitter,
            seed,
        })
}

/// Runs the case on the simulator and on [`Reference`] and compares every
/// architectural result.
pub fn check_equivalence(case: EquivalenceCase) -> Result<(), TestCaseError> {
    let expected = Reference::new(&case.space, &case.memory).run(&case.program);
    let mut sim = Simulator::new(ArchProfile::builtin(case.arch), case.space)
        .with_options(RunOptions { return_jitter_cycles: case.jitter, ..RunOptions::default() })
        .with_seed(case.seed);
    sim.store_buffer_mut().set_partitioned(case.partitioned);
    for (a, v) in &case.memory {
        sim.memory_mut().write(*a, *v);
    }
    let stats = sim.run(&case.program, HwThread::T0).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(stats.registers, expected.registers);
    prop_assert_eq!(stats.faults_raised, expected.faults_raised);
    prop_assert_eq!(stats.aborted_transactions, expected.aborted_transactions);
    prop_assert_eq!(stats.terminated_at, expected.terminated_at);
    prop_assert_eq!(sim.architectural_memory(), expected.memory);
    Ok(())
}
