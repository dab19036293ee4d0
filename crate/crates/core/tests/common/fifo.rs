use std::collections::{BTreeMap, VecDeque};

use falloutsim::memory::{AssistKind, CacheModel, PhysicalMemory, TranslationOutcome, PAGE_SIZE};
use falloutsim::profile::{ArchProfile, FaultCause, Microarch};
use falloutsim::store_buffer::{ForwardDecision, HwThread, StoreBuffer, StoreData};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

#[derive(Debug, Clone)]
pub enum SbOp {
    Push { thread: HwThread, offset: u64, width: usize, resolved: bool, data: u8 },
    Resolve(usize),
    Attach(usize),
    Advance(u64),
    Flush,
    Barrier(Option<usize>),
    Squash(usize),
    Headroom(HwThread),
    Match { offset: u64, thread: HwThread, fault: Option<bool> },
}

fn thread() -> impl Strategy<Value = HwThread> {
    prop_oneof![Just(HwThread::T0), Just(HwThread::T1)]
}

fn sb_op() -> impl Strategy<Value = SbOp> {
    prop_oneof![
        6 => (thread(), 0u64..32, prop_oneof![Just(1usize), Just(2), Just(8), Just(16)], any::<bool>(), any::<u8>())
            .prop_map(|(thread, offset, width, resolved, data)| SbOp::Push { thread, offset: offset * 16, width, resolved, data }),
        2 => any::<usize>().prop_map(SbOp::Resolve),
        2 => any::<usize>().prop_map(SbOp::Attach),
        3 => (0u64..200).prop_map(SbOp::Advance),
        1 => Just(SbOp::Flush),
        1 => prop::option::of(any::<usize>()).prop_map(SbOp::Barrier),
        1 => any::<usize>().prop_map(SbOp::Squash),
        1 => thread().prop_map(SbOp::Headroom),
        3 => (0u64..0x200, thread(), prop::option::of(any::<bool>()))
            .prop_map(|(offset, thread, fault)| SbOp::Match { offset, thread, fault }),
    ]
}

#[derive(Debug, Clone)]
struct RefEntry {
    order: u64,
    thread: HwThread,
    paddr: u64,
    offset: u64,
    bytes: Vec<u8>,
    resolved: bool,
    has_data: bool,
}

const FRAME: u64 = 0x77;

/// Plain in-order queue: entries leave only from the front, or all
/// resolvable ones at once on a flush.
struct RefQueue {
    q: VecDeque<RefEntry>,
    barrier: Option<u64>,
    mem: BTreeMap<u64, u8>,
}

impl RefQueue {
    fn drainable(&self, e: &RefEntry) -> bool {
        e.resolved && e.has_data && self.barrier.is_none_or(|b| e.order < b)
    }

    fn write(&mut self, e: &RefEntry) {
        for (i, b) in e.bytes.iter().enumerate() {
            self.mem.insert(e.paddr + i as u64, *b);
        }
    }
}

pub fn sb_ops() -> impl Strategy<Value = (Vec<SbOp>, bool)> {
    (prop::collection::vec(sb_op(), 1..80), any::<bool>())
}

/// Replays `ops` on a store buffer and on the reference queue, checking
/// order, forwarding and written-back memory after every step. Every WTF
/// forwarding decision is checked against its precondition.
pub fn check_fifo(ops: Vec<SbOp>, partitioned: bool) -> Result<(), TestCaseError> {
    let profile = ArchProfile::builtin(Microarch::Skylake);
    let per_entry = profile.sb_drain_cycles_per_entry();
    let mut sb = StoreBuffer::for_profile(&profile);
    sb.set_partitioned(partitioned);
    let mut memory = PhysicalMemory::new();
    let mut cache = CacheModel::new(&profile);
    let mut reference = RefQueue { q: VecDeque::new(), barrier: None, mem: BTreeMap::new() };
    let mut now = 0;
    let mut next_load_order = 0;
    let mut drained_total = 0u64;

    for op in ops {
        match op {
            SbOp::Push { thread, offset, width, resolved, data } => {
                let vaddr = 0x10 * PAGE_SIZE + offset;
                let paddr = FRAME * PAGE_SIZE + offset;
                let occupancy = reference.q.iter().filter(|e| e.thread == thread).count();
                let cap = if partitioned { profile.sb_capacity() / 2 } else { profile.sb_capacity() };
                let res = sb.push_sta(vaddr, resolved.then_some(paddr), width, thread);
                if occupancy >= cap {
                    prop_assert!(res.is_err());
                    continue;
                }
                let order = res.unwrap();
                let bytes: Vec<u8> = (0..width).map(|i| data.wrapping_add(i as u8)).collect();
                reference.q.push_back(RefEntry { order, thread, paddr, offset, bytes, resolved, has_data: false });
            }
            SbOp::Resolve(i) if !reference.q.is_empty() => {
                let i = i % reference.q.len();
                let e = &mut reference.q[i];
                sb.resolve_sta(e.order, e.paddr).unwrap();
                e.resolved = true;
            }
            SbOp::Attach(i) if !reference.q.is_empty() => {
                let i = i % reference.q.len();
                let e = &mut reference.q[i];
                sb.attach_sda(e.order, StoreData::from_slice(&e.bytes).unwrap()).unwrap();
                e.has_data = true;
            }
            SbOp::Advance(dt) => {
                now += dt;
                let drained = sb.drain(&mut memory, &mut cache, now, &profile);
                drained_total += drained as u64;
                prop_assert!(drained_total <= now / per_entry, "drained faster than one entry per {per_entry} cycles");
                for _ in 0..drained {
                    let e = reference.q.pop_front().expect("drained entries exist");
                    prop_assert!(reference.drainable(&e), "drained a blocked entry");
                    reference.write(&e);
                }
            }
            SbOp::Flush => {
                sb.flush_all(&mut memory, &mut cache);
                let entries: Vec<_> = reference.q.drain(..).collect();
                for e in entries {
                    if reference.drainable(&e) {
                        reference.write(&e);
                    } else {
                        reference.q.push_back(e);
                    }
                }
            }
            SbOp::Barrier(i) => {
                let order = i.and_then(|i| (!reference.q.is_empty()).then(|| reference.q[i % reference.q.len()].order));
                sb.set_commit_barrier(order);
                reference.barrier = order;
            }
            SbOp::Squash(i) if !reference.q.is_empty() => {
                let order = reference.q[i % reference.q.len()].order;
                sb.squash_from(order);
                reference.q.retain(|e| e.order < order);
            }
            SbOp::Headroom(thread) => {
                let cap = if partitioned { profile.sb_capacity() / 2 } else { profile.sb_capacity() };
                let occupancy = reference.q.iter().filter(|e| e.thread == thread).count();
                let wrote = sb.make_headroom(thread, &mut memory, &mut cache);
                let oldest = reference.q.iter().position(|e| e.thread == thread);
                let expect = occupancy >= cap && oldest.is_some_and(|i| reference.drainable(&reference.q[i]));
                prop_assert_eq!(wrote, expect);
                if wrote {
                    let e = reference.q.remove(oldest.unwrap()).unwrap();
                    reference.write(&e);
                }
            }
            SbOp::Match { offset, thread, fault } => {
                let translation = match fault {
                    None => TranslationOutcome::Ok(0x99 * PAGE_SIZE + offset),
                    Some(true) => TranslationOutcome::Fault(FaultCause::UserNotPresent),
                    Some(false) => TranslationOutcome::AssistNeeded(AssistKind::SetAccessed),
                };
                next_load_order += 1;
                let decision = sb.match_load(0x20 * PAGE_SIZE + offset, translation, u64::MAX - next_load_order, thread);
                if let ForwardDecision::WtfForward { data, matched_order } = decision {
                    // the precondition: never on a valid translation
                    prop_assert!(!translation.is_ok());
                    let youngest = reference.q.iter().rev().find(|e| {
                        e.thread == thread && e.has_data && (e.offset..e.offset + e.bytes.len() as u64).contains(&offset)
                    });
                    let e = youngest.expect("forwarded from a matching entry");
                    prop_assert_eq!(e.order, matched_order);
                    prop_assert_eq!(e.bytes[(offset - e.offset) as usize], data);
                } else {
                    // a valid translation to another frame never forwards either
                    prop_assert_eq!(decision, if translation.is_ok() {
                        ForwardDecision::NoForward
                    } else {
                        let any = reference.q.iter().any(|e| {
                            e.thread == thread && e.has_data && (e.offset..e.offset + e.bytes.len() as u64).contains(&offset)
                        });
                        prop_assert!(!any);
                        ForwardDecision::NoForward
                    });
                }
            }
            _ => {}
        }
        prop_assert_eq!(
            sb.entries().map(|e| e.program_order).collect::<Vec<_>>(),
            reference.q.iter().map(|e| e.order).collect::<Vec<_>>()
        );
    }
    sb.set_commit_barrier(None);
    reference.barrier = None;
    sb.flush_all(&mut memory, &mut cache);
    let entries: Vec<_> = reference.q.drain(..).collect();
    for e in entries {
        if reference.drainable(&e) {
            reference.write(&e);
        }
    }
    let expected: BTreeMap<u64, u8> = reference.mem.into_iter().filter(|(_, v)| *v != 0).collect();
    prop_assert_eq!(memory.image(), expected);
    Ok(())
}
