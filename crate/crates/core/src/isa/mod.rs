//! The eight pseudo-instructions, per-core programs, their text and binary
//! encodings, and the execution-pattern rewrite passes.
//!
//! Addresses and lengths are byte offsets into a core's local memory or the
//! shared global memory. Data words are 32-bit little-endian integers.

mod encode;
mod passes;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use encode::{decode_programs, encode_programs, render_asm};
pub use passes::{centralize_comm, lower_exec_model};

use crate::hw::{CommMechanism, HardwareConfig};

/// Element-wise VFU operations. Unary ops ignore `src2`; `Requant` reads its
/// right-shift amount from `src2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VecOp {
    Add,
    Sub,
    Mul,
    Max,
    Relu,
    MaxpoolStep,
    ConcatMove,
    Requant,
}

impl VecOp {
    pub const ALL: [VecOp; 8] =
        [VecOp::Add, VecOp::Sub, VecOp::Mul, VecOp::Max, VecOp::Relu, VecOp::MaxpoolStep, VecOp::ConcatMove, VecOp::Requant];

    pub fn is_unary(self) -> bool {
        matches!(self, VecOp::Relu | VecOp::ConcatMove | VecOp::Requant)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            VecOp::Add => "add",
            VecOp::Sub => "sub",
            VecOp::Mul => "mul",
            VecOp::Max => "max",
            VecOp::Relu => "relu",
            VecOp::MaxpoolStep => "maxpool_step",
            VecOp::ConcatMove => "concat_move",
            VecOp::Requant => "requant",
        }
    }

    pub fn code(self) -> u8 {
        VecOp::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<VecOp> {
        VecOp::ALL.get(c as usize).copied()
    }

    /// Applies the op to one word.
    pub fn apply(self, a: i32, b: i32, shift_or_b: u64) -> i32 {
        match self {
            VecOp::Add => a.wrapping_add(b),
            VecOp::Sub => a.wrapping_sub(b),
            VecOp::Mul => a.wrapping_mul(b),
            VecOp::Max | VecOp::MaxpoolStep => a.max(b),
            VecOp::Relu => a.max(0),
            VecOp::ConcatMove => a,
            VecOp::Requant => requantize(a, shift_or_b as u32),
        }
    }
}

/// Arithmetic right shift with round-half-away-from-zero.
pub fn requantize(v: i32, shift: u32) -> i32 {
    if shift == 0 {
        return v;
    }
    let v = v as i64;
    let half = 1i64 << (shift - 1);
    let r = if v >= 0 { (v + half) >> shift } else { -((-v + half) >> shift) };
    r as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Mvm { ag: u32, dst: u64, src: u64, len: u64 },
    Vec { op: VecOp, dst: u64, src1: u64, src2: u64, len: u64 },
    Copy { dst: u64, src: u64, len: u64 },
    Write { dst: u64, len: u64, imm: i32 },
    Load { dst: u64, src: u64, len: u64 },
    Store { dst: u64, src: u64, len: u64 },
    Send { peer: u32, src: u64, len: u64 },
    Recv { peer: u32, dst: u64, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Opcode {
    Mvm,
    Vec,
    Copy,
    Write,
    Load,
    Store,
    Send,
    Recv,
}

impl Opcode {
    pub const ALL: [Opcode; 8] =
        [Opcode::Mvm, Opcode::Vec, Opcode::Copy, Opcode::Write, Opcode::Load, Opcode::Store, Opcode::Send, Opcode::Recv];

    pub fn mnemonic(self) -> &'static str {
        ["mvm", "vec", "copy", "write", "load", "store", "send", "recv"][self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Local,
    Global,
}

/// A byte range in one memory space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Access {
    pub space: Space,
    pub addr: u64,
    pub len: u64,
}

impl Access {
    fn local(addr: u64, len: u64) -> Self {
        Access { space: Space::Local, addr, len }
    }
    fn global(addr: u64, len: u64) -> Self {
        Access { space: Space::Global, addr, len }
    }
    pub fn end(&self) -> u64 {
        self.addr + self.len
    }
    pub fn overlaps(&self, o: &Access) -> bool {
        self.space == o.space && self.addr < o.end() && o.addr < self.end()
    }
}

/// Per-AG facts the ISA needs: the owning core and the MVM input/output
/// lengths in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgInfo {
    pub core: usize,
    pub in_len: u64,
    pub out_len: u64,
    /// Logical arrays driven by one MVM on this AG.
    pub arrays: usize,
    /// Index of the AG's first logical array within its core.
    pub first_array: usize,
}

impl Op {
    pub fn opcode(&self) -> Opcode {
        match self {
            Op::Mvm { .. } => Opcode::Mvm,
            Op::Vec { .. } => Opcode::Vec,
            Op::Copy { .. } => Opcode::Copy,
            Op::Write { .. } => Opcode::Write,
            Op::Load { .. } => Opcode::Load,
            Op::Store { .. } => Opcode::Store,
            Op::Send { .. } => Opcode::Send,
            Op::Recv { .. } => Opcode::Recv,
        }
    }

    pub fn is_comm(&self) -> bool {
        matches!(self, Op::Send { .. } | Op::Recv { .. })
    }

    pub fn len(&self) -> u64 {
        match *self {
            Op::Mvm { len, .. }
            | Op::Vec { len, .. }
            | Op::Copy { len, .. }
            | Op::Write { len, .. }
            | Op::Load { len, .. }
            | Op::Store { len, .. }
            | Op::Send { len, .. }
            | Op::Recv { len, .. } => len,
        }
    }

    /// Memory ranges read by the instruction. MVM output length comes from
    /// the AG table.
    pub fn reads(&self) -> Vec<Access> {
        match *self {
            Op::Mvm { src, len, .. } => vec![Access::local(src, len)],
            Op::Vec { op, src1, src2, len, .. } => {
                if op.is_unary() {
                    vec![Access::local(src1, len)]
                } else {
                    vec![Access::local(src1, len), Access::local(src2, len)]
                }
            }
            Op::Copy { src, len, .. } => vec![Access::local(src, len)],
            Op::Write { .. } => vec![],
            Op::Load { src, len, .. } => vec![Access::global(src, len)],
            Op::Store { src, len, .. } => vec![Access::local(src, len)],
            Op::Send { src, len, .. } => vec![Access::local(src, len)],
            Op::Recv { .. } => vec![],
        }
    }

    pub fn writes(&self, ags: &[AgInfo]) -> Vec<Access> {
        match *self {
            Op::Mvm { ag, dst, .. } => vec![Access::local(dst, ags[ag as usize].out_len)],
            Op::Vec { dst, len, .. } | Op::Copy { dst, len, .. } | Op::Write { dst, len, .. } | Op::Load { dst, len, .. } => {
                vec![Access::local(dst, len)]
            }
            Op::Store { dst, len, .. } => vec![Access::global(dst, len)],
            Op::Send { .. } => vec![],
            Op::Recv { dst, len, .. } => vec![Access::local(dst, len)],
        }
    }
}

/// Sentinel layer tag for instructions not attributed to a layer.
pub const NO_LAYER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Inst {
    pub op: Op,
    /// Layer the instruction works for, used by the profiler's timeline
    /// checks and pipeline masking.
    pub layer: u32,
}

impl Inst {
    pub fn new(op: Op, layer: u32) -> Self {
        Inst { op, layer }
    }
}

impl fmt::Display for Inst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Op::Mvm { ag, dst, src, len } => write!(f, "mvm {ag},{dst},{src},{len}")?,
            Op::Vec { op, dst, src1, src2, len } => write!(f, "vec {},{dst},{src1},{src2},{len}", op.mnemonic())?,
            Op::Copy { dst, src, len } => write!(f, "copy {dst},{src},{len}")?,
            Op::Write { dst, len, imm } => write!(f, "write {dst},{len},{imm}")?,
            Op::Load { dst, src, len } => write!(f, "load {dst},{src},{len}")?,
            Op::Store { dst, src, len } => write!(f, "store {dst},{src},{len}")?,
            Op::Send { peer, src, len } => write!(f, "send {peer},{src},{len}")?,
            Op::Recv { peer, dst, len } => write!(f, "recv {peer},{dst},{len}")?,
        }
        if self.layer != NO_LAYER {
            write!(f, "  ; L{}", self.layer)?;
        }
        Ok(())
    }
}

/// The ordered instruction stream of one core. `barriers[k]` is the program
/// position before which every core waits for all others to reach barrier
/// `k`; all programs of a set carry the same number of barriers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoreProgram {
    pub core: usize,
    pub instrs: Vec<Inst>,
    pub barriers: Vec<usize>,
}

impl CoreProgram {
    pub fn new(core: usize) -> Self {
        CoreProgram { core, instrs: Vec::new(), barriers: Vec::new() }
    }

    pub fn push(&mut self, op: Op, layer: u32) {
        self.instrs.push(Inst::new(op, layer));
    }

    pub fn barrier(&mut self) {
        self.barriers.push(self.instrs.len());
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Instruction index ranges between consecutive barriers.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.barriers.len() + 1);
        let mut start = 0;
        for &b in &self.barriers {
            out.push(start..b);
            start = b;
        }
        out.push(start..self.instrs.len());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroLength { core: usize, pos: usize },
    AddressOutOfRange { core: usize, pos: usize, space: Space, end: u64, size: u64 },
    UnknownAg { core: usize, pos: usize, ag: u32 },
    ForeignAg { core: usize, pos: usize, ag: u32, owner: usize },
    MvmLength { core: usize, pos: usize, expected: u64, got: u64 },
    UnsupportedVecOp { core: usize, pos: usize, op: VecOp },
    BadPeer { core: usize, pos: usize, peer: u32 },
    UnpairedSend { from: usize, to: usize, count: usize },
    UnpairedRecv { from: usize, to: usize, count: usize },
    PairLength { from: usize, to: usize, index: usize, send_len: u64, recv_len: u64 },
    BarrierCount { core: usize, expected: usize, got: usize },
}

impl Violation {
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::ZeroLength { .. } => "zero-length",
            Violation::AddressOutOfRange { .. } => "address-out-of-range",
            Violation::UnknownAg { .. } => "unknown-ag",
            Violation::ForeignAg { .. } => "foreign-ag",
            Violation::MvmLength { .. } => "mvm-length",
            Violation::UnsupportedVecOp { .. } => "unsupported-vec-op",
            Violation::BadPeer { .. } => "bad-peer",
            Violation::UnpairedSend { .. } => "unpaired-send",
            Violation::UnpairedRecv { .. } => "unpaired-recv",
            Violation::PairLength { .. } => "pair-length",
            Violation::BarrierCount { .. } => "barrier-count",
        }
    }
}

/// Checks a single program: lengths, address bounds, AG ownership and VEC
/// op support.
pub fn check_program(p: &CoreProgram, ags: &[AgInfo], cfg: &HardwareConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let core = p.core;
    for (pos, inst) in p.instrs.iter().enumerate() {
        let op = &inst.op;
        if op.len() == 0 {
            out.push(Violation::ZeroLength { core, pos });
            continue;
        }
        match *op {
            Op::Mvm { ag, len, .. } => match ags.get(ag as usize) {
                None => {
                    out.push(Violation::UnknownAg { core, pos, ag });
                    continue;
                }
                Some(info) => {
                    if info.core != core {
                        out.push(Violation::ForeignAg { core, pos, ag, owner: info.core });
                    }
                    if info.in_len != len {
                        out.push(Violation::MvmLength { core, pos, expected: info.in_len, got: len });
                    }
                }
            },
            Op::Vec { op: v, .. } if !cfg.vfu_ops.contains(&v) => out.push(Violation::UnsupportedVecOp { core, pos, op: v }),
            Op::Send { peer, .. } | Op::Recv { peer, .. } if peer as usize >= cfg.total_cores() || peer as usize == core => {
                out.push(Violation::BadPeer { core, pos, peer })
            }
            _ => {}
        }
        for a in op.reads().into_iter().chain(op.writes(ags)) {
            let size = match a.space {
                Space::Local => cfg.local_mem_size,
                Space::Global => cfg.global_mem_size,
            };
            if a.end() > size {
                out.push(Violation::AddressOutOfRange { core, pos, space: a.space, end: a.end(), size });
            }
        }
    }
    out
}

/// Checks SEND/RECV pairing across programs: for every ordered core pair
/// the sequence of SEND lengths equals the sequence of RECV lengths.
pub fn check_pairing(programs: &[CoreProgram]) -> Vec<Violation> {
    use std::collections::BTreeMap;
    let mut sends: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut recvs: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    for p in programs {
        for i in &p.instrs {
            match i.op {
                Op::Send { peer, len, .. } => sends.entry((p.core, peer as usize)).or_default().push(len),
                Op::Recv { peer, len, .. } => recvs.entry((peer as usize, p.core)).or_default().push(len),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    let keys: std::collections::BTreeSet<_> = sends.keys().chain(recvs.keys()).copied().collect();
    for (from, to) in keys {
        let s = sends.get(&(from, to)).map(Vec::as_slice).unwrap_or(&[]);
        let r = recvs.get(&(from, to)).map(Vec::as_slice).unwrap_or(&[]);
        for (index, (a, b)) in s.iter().zip(r).enumerate() {
            if a != b {
                out.push(Violation::PairLength { from, to, index, send_len: *a, recv_len: *b });
            }
        }
        if s.len() > r.len() {
            out.push(Violation::UnpairedSend { from, to, count: s.len() - r.len() });
        } else if r.len() > s.len() {
            out.push(Violation::UnpairedRecv { from, to, count: r.len() - s.len() });
        }
    }
    out
}

/// Full well-formedness check of a program set.
pub fn check_wellformed(programs: &[CoreProgram], ags: &[AgInfo], cfg: &HardwareConfig) -> Vec<Violation> {
    let mut out: Vec<Violation> = programs.iter().flat_map(|p| check_program(p, ags, cfg)).collect();
    if cfg.comm_mechanism == CommMechanism::Sync || programs.iter().any(|p| p.instrs.iter().any(|i| matches!(i.op, Op::Recv { .. }))) {
        out.extend(check_pairing(programs));
    }
    if let Some(first) = programs.first() {
        for p in programs {
            if p.barriers.len() != first.barriers.len() {
                out.push(Violation::BarrierCount { core: p.core, expected: first.barriers.len(), got: p.barriers.len() });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HardwareConfig {
        HardwareConfig::preset("desk_tiny").unwrap()
    }

    fn ags() -> Vec<AgInfo> {
        vec![AgInfo { core: 0, in_len: 16, out_len: 32, arrays: 1, first_array: 0 }]
    }

    #[test]
    fn requantize_rounds_half_away() {
        assert_eq!(requantize(6, 2), 2); // 1.5 -> 2
        assert_eq!(requantize(-6, 2), -2);
        assert_eq!(requantize(5, 2), 1); // 1.25 -> 1
        assert_eq!(requantize(-5, 2), -1);
        assert_eq!(requantize(7, 0), 7);
    }

    #[test]
    fn load_beyond_local_memory() {
        let c = cfg();
        let mut p = CoreProgram::new(0);
        p.push(Op::Load { dst: c.local_mem_size - 4, src: 0, len: 8 }, NO_LAYER);
        let v = check_program(&p, &ags(), &c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind(), "address-out-of-range");
    }

    #[test]
    fn unpaired_send_reported() {
        let mut a = CoreProgram::new(0);
        a.push(Op::Send { peer: 1, src: 0, len: 4 }, NO_LAYER);
        let b = CoreProgram::new(1);
        let v = check_wellformed(&[a, b], &ags(), &cfg());
        assert_eq!(v.iter().map(|v| v.kind()).collect::<Vec<_>>(), vec!["unpaired-send"]);
    }

    #[test]
    fn foreign_ag_and_length() {
        let mut p = CoreProgram::new(1);
        p.push(Op::Mvm { ag: 0, dst: 0, src: 64, len: 8 }, 0);
        let kinds: Vec<_> = check_program(&p, &ags(), &cfg()).iter().map(|v| v.kind()).collect();
        assert_eq!(kinds, vec!["foreign-ag", "mvm-length"]);
    }

    #[test]
    fn unsupported_vec_op() {
        let mut c = cfg();
        c.vfu_ops.remove(&VecOp::Mul);
        let mut p = CoreProgram::new(0);
        p.push(Op::Vec { op: VecOp::Mul, dst: 0, src1: 0, src2: 0, len: 4 }, 0);
        assert_eq!(check_program(&p, &ags(), &c)[0].kind(), "unsupported-vec-op");
    }
}
