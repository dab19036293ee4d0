//! µOP programs and their line-oriented text form.
//!
//! One µOP per line, `#` starts a comment:
//!
//! ```text
//! store 0x10007 42
//! tsx_begin
//! load 0x11007 r0
//! probe 0x100000 r0
//! tsx_end
//! ```

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::store_buffer::StoreData;

pub const NUM_REGS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Option<Reg> {
        ((index as usize) < NUM_REGS).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MicroOp {
    Store { vaddr: u64, value: u8 },
    /// One 16-byte vector store (`movaps`).
    StoreWide { vaddr: u64, data: StoreData },
    Load { vaddr: u64, dst: Reg },
    /// Touches `base + 4096 * reg`, the covert-channel transmitter.
    ProbeTouch { base: u64, reg: Reg },
    TsxBegin,
    TsxEnd,
    /// Opens a region, closed by `GuardEnd`, that is architecturally
    /// skipped. When mispredicted the region first runs transiently.
    BranchGuard { mispredicted: bool },
    GuardEnd,
    ClearAccessedBit { vaddr: u64 },
    EnterKernel,
    ExitKernel,
    Fence,
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MicroOp::Store { vaddr, value } => write!(f, "store {vaddr:#x} {value}"),
            MicroOp::StoreWide { vaddr, data } => write!(f, "store16 {vaddr:#x} {}", hex::encode(data.as_slice())),
            MicroOp::Load { vaddr, dst } => write!(f, "load {vaddr:#x} {dst}"),
            MicroOp::ProbeTouch { base, reg } => write!(f, "probe {base:#x} {reg}"),
            MicroOp::TsxBegin => f.write_str("tsx_begin"),
            MicroOp::TsxEnd => f.write_str("tsx_end"),
            MicroOp::BranchGuard { mispredicted: true } => f.write_str("guard mispredicted"),
            MicroOp::BranchGuard { mispredicted: false } => f.write_str("guard predicted"),
            MicroOp::GuardEnd => f.write_str("guard_end"),
            MicroOp::ClearAccessedBit { vaddr } => write!(f, "clear_accessed {vaddr:#x}"),
            MicroOp::EnterKernel => f.write_str("enter_kernel"),
            MicroOp::ExitKernel => f.write_str("exit_kernel"),
            MicroOp::Fence => f.write_str("fence"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("µOP {0}: transactions cannot nest")]
    NestedTransaction(usize),
    #[error("µOP {0}: closing µOP has no matching opener")]
    Unbalanced(usize),
    #[error("µOP {0}: region left open at end of program")]
    Unclosed(usize),
}

fn parse_u64(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

fn parse_reg(s: &str) -> Option<Reg> {
    s.strip_prefix('r').and_then(|n| n.parse().ok()).and_then(Reg::new)
}

impl FromStr for MicroOp {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let arg = |i: usize| words.get(i).copied().ok_or_else(|| format!("`{}` needs more operands", words[0]));
        let addr = |i: usize| arg(i).and_then(|w| parse_u64(w).ok_or_else(|| format!("bad address `{w}`")));
        let reg = |i: usize| arg(i).and_then(|w| parse_reg(w).ok_or_else(|| format!("bad register `{w}`")));
        let op = match words[0] {
            "store" => {
                let value = arg(2)?;
                let value = parse_u64(value)
                    .and_then(|v| u8::try_from(v).ok())
                    .ok_or_else(|| format!("bad byte `{value}`"))?;
                MicroOp::Store { vaddr: addr(1)?, value }
            }
            "store16" => {
                let bytes = hex::decode(arg(2)?).map_err(|e| format!("bad data: {e}"))?;
                if bytes.len() != 16 {
                    return Err(format!("store16 needs 16 bytes, got {}", bytes.len()));
                }
                MicroOp::StoreWide { vaddr: addr(1)?, data: StoreData::from_slice(&bytes).map_err(|e| e.to_string())? }
            }
            "load" => MicroOp::Load { vaddr: addr(1)?, dst: reg(2)? },
            "probe" => MicroOp::ProbeTouch { base: addr(1)?, reg: reg(2)? },
            "tsx_begin" | "xbegin" => MicroOp::TsxBegin,
            "tsx_end" | "xend" => MicroOp::TsxEnd,
            "guard" => match arg(1)? {
                "mispredicted" => MicroOp::BranchGuard { mispredicted: true },
                "predicted" => MicroOp::BranchGuard { mispredicted: false },
                other => return Err(format!("guard expects `mispredicted` or `predicted`, got `{other}`")),
            },
            "guard_end" => MicroOp::GuardEnd,
            "clear_accessed" => MicroOp::ClearAccessedBit { vaddr: addr(1)? },
            "enter_kernel" => MicroOp::EnterKernel,
            "exit_kernel" => MicroOp::ExitKernel,
            "fence" | "mfence" => MicroOp::Fence,
            other => return Err(format!("unknown µOP `{other}`")),
        };
        let expected = match op {
            MicroOp::Store { .. } | MicroOp::StoreWide { .. } | MicroOp::Load { .. } | MicroOp::ProbeTouch { .. } => 3,
            MicroOp::BranchGuard { .. } | MicroOp::ClearAccessedBit { .. } => 2,
            _ => 1,
        };
        if words.len() > expected {
            return Err(format!("trailing operands after `{}`", words[0]));
        }
        Ok(op)
    }
}

/// A validated µOP sequence with its transaction and guard regions matched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    ops: Vec<MicroOp>,
    /// For each opener (`TsxBegin`, `BranchGuard`), the index of its closer.
    closer: Vec<Option<usize>>,
}

impl Program {
    pub fn new(ops: Vec<MicroOp>) -> Result<Self, ProgramError> {
        let mut closer = vec![None; ops.len()];
        let mut open: Vec<usize> = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            match op {
                MicroOp::TsxBegin => {
                    if open.iter().any(|&j| ops[j] == MicroOp::TsxBegin) {
                        return Err(ProgramError::NestedTransaction(i));
                    }
                    open.push(i);
                }
                MicroOp::BranchGuard { .. } => open.push(i),
                MicroOp::TsxEnd | MicroOp::GuardEnd => {
                    let j = open.pop().ok_or(ProgramError::Unbalanced(i))?;
                    let matches = matches!(
                        (&ops[j], op),
                        (MicroOp::TsxBegin, MicroOp::TsxEnd) | (MicroOp::BranchGuard { .. }, MicroOp::GuardEnd)
                    );
                    if !matches {
                        return Err(ProgramError::Unbalanced(i));
                    }
                    closer[j] = Some(i);
                }
                _ => {}
            }
        }
        if let Some(&j) = open.first() {
            return Err(ProgramError::Unclosed(j));
        }
        Ok(Program { ops, closer })
    }

    pub fn parse(text: &str) -> Result<Self, ProgramError> {
        let mut ops = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            ops.push(line.parse().map_err(|msg| ProgramError::Syntax { line: idx + 1, msg })?);
        }
        Program::new(ops)
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Index of the µOP closing the region opened at `pc`.
    pub fn closer_of(&self, pc: usize) -> Option<usize> {
        self.closer.get(pc).copied().flatten()
    }

    /// Index of the `TsxEnd` of the transaction enclosing `pc`, if any.
    pub fn enclosing_tsx_end(&self, pc: usize) -> Option<usize> {
        (0..pc)
            .rev()
            .find(|&j| self.ops[j] == MicroOp::TsxBegin)
            .and_then(|j| self.closer_of(j))
            .filter(|&end| end > pc)
    }

    pub fn to_text(&self) -> String {
        self.ops.iter().map(|op| format!("{op}\n")).collect()
    }

    /// Concatenates fragments and revalidates the result.
    pub fn concat(fragments: &[&[MicroOp]]) -> Result<Self, ProgramError> {
        Program::new(fragments.iter().flat_map(|f| f.iter().copied()).collect())
    }
}
