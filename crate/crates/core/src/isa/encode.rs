//! Assembly text rendering and the versioned binary program format.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic "PIMB", u32 version, u32 program count
//! per program: u32 core, u32 barrier count, u64 barrier positions...,
//!              u64 instruction count, records...
//! record: u8 opcode, u8 vec op, u32 layer, u64 a, u64 b, u64 c, u64 d
//! ```

use std::fmt::Write as _;

use super::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIMB";
const VERSION: u32 = 1;

/// Renders a program as one instruction per line with barrier markers.
pub fn render_asm(p: &CoreProgram) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "; core {}", p.core);
    let mut next_barrier = 0;
    for (pos, inst) in p.instrs.iter().enumerate() {
        while next_barrier < p.barriers.len() && p.barriers[next_barrier] == pos {
            let _ = writeln!(s, "; ---- barrier {next_barrier} ----");
            next_barrier += 1;
        }
        let _ = writeln!(s, "{inst}");
    }
    while next_barrier < p.barriers.len() {
        let _ = writeln!(s, "; ---- barrier {next_barrier} ----");
        next_barrier += 1;
    }
    s
}

fn fields(op: &Op) -> (u8, u8, [u64; 4]) {
    match *op {
        Op::Mvm { ag, dst, src, len } => (0, 0, [ag as u64, dst, src, len]),
        Op::Vec { op, dst, src1, src2, len } => (1, op.code(), [dst, src1, src2, len]),
        Op::Copy { dst, src, len } => (2, 0, [dst, src, len, 0]),
        Op::Write { dst, len, imm } => (3, 0, [dst, len, imm as u32 as u64, 0]),
        Op::Load { dst, src, len } => (4, 0, [dst, src, len, 0]),
        Op::Store { dst, src, len } => (5, 0, [dst, src, len, 0]),
        Op::Send { peer, src, len } => (6, 0, [peer as u64, src, len, 0]),
        Op::Recv { peer, dst, len } => (7, 0, [peer as u64, dst, len, 0]),
    }
}

fn from_fields(code: u8, vop: u8, f: [u64; 4]) -> Result<Op> {
    let [a, b, c, d] = f;
    Ok(match code {
        0 => Op::Mvm { ag: a as u32, dst: b, src: c, len: d },
        1 => Op::Vec {
            op: VecOp::from_code(vop).ok_or_else(|| Error::Format(format!("unknown vec op {vop}")))?,
            dst: a,
            src1: b,
            src2: c,
            len: d,
        },
        2 => Op::Copy { dst: a, src: b, len: c },
        3 => Op::Write { dst: a, len: b, imm: c as u32 as i32 },
        4 => Op::Load { dst: a, src: b, len: c },
        5 => Op::Store { dst: a, src: b, len: c },
        6 => Op::Send { peer: a as u32, src: b, len: c },
        7 => Op::Recv { peer: a as u32, dst: b, len: c },
        _ => return Err(Error::Format(format!("unknown opcode {code}"))),
    })
}

pub fn encode_programs(programs: &[CoreProgram]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(programs.len() as u32).to_le_bytes());
    for p in programs {
        out.extend_from_slice(&(p.core as u32).to_le_bytes());
        out.extend_from_slice(&(p.barriers.len() as u32).to_le_bytes());
        for &b in &p.barriers {
            out.extend_from_slice(&(b as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.instrs.len() as u64).to_le_bytes());
        for i in &p.instrs {
            let (code, vop, f) = fields(&i.op);
            out.push(code);
            out.push(vop);
            out.extend_from_slice(&i.layer.to_le_bytes());
            for v in f {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("truncated program file".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_programs(bytes: &[u8]) -> Result<Vec<CoreProgram>> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a program file (bad magic)".into()));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported program format version {v}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let core = r.u32()? as usize;
        let nb = r.u32()? as usize;
        let barriers = (0..nb).map(|_| r.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let ni = r.u64()? as usize;
        let mut instrs = Vec::with_capacity(ni.min(1 << 24));
        for _ in 0..ni {
            let code = r.u8()?;
            let vop = r.u8()?;
            let layer = r.u32()?;
            let f = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
            instrs.push(Inst::new(from_fields(code, vop, f)?, layer));
        }
        out.push(CoreProgram { core, instrs, barriers });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after programs".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CoreProgram {
        let mut p = CoreProgram::new(3);
        p.push(Op::Load { dst: 0, src: 128, len: 16 }, 1);
        p.push(Op::Mvm { ag: 2, dst: 64, src: 0, len: 16 }, 1);
        p.barrier();
        p.push(Op::Vec { op: VecOp::Requant, dst: 64, src1: 64, src2: 8, len: 32 }, 1);
        p.push(Op::Write { dst: 200, len: 8, imm: -3 }, NO_LAYER);
        p.push(Op::Send { peer: 1, src: 64, len: 32 }, 1);
        p.push(Op::Recv { peer: 1, dst: 96, len: 32 }, 2);
        p.push(Op::Store { dst: 4096, src: 96, len: 32 }, 2);
        p.push(Op::Copy { dst: 300, src: 96, len: 4 }, 2);
        p
    }

    #[test]
    fn binary_round_trip() {
        let ps = vec![sample(), CoreProgram::new(0)];
        assert_eq!(decode_programs(&encode_programs(&ps)).unwrap(), ps);
    }

    #[test]
    fn corrupt_header_rejected() {
        let mut b = encode_programs(&[sample()]);
        b[4] = 9;
        assert!(matches!(decode_programs(&b), Err(Error::Format(_))));
        assert!(matches!(decode_programs(&b[..3]), Err(Error::Format(_))));
    }

    #[test]
    fn asm_mnemonics() {
        let text = render_asm(&sample());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[1], "load 0,128,16  ; L1");
        assert_eq!(lines[2], "mvm 2,64,0,16  ; L1");
        assert_eq!(lines[3], "; ---- barrier 0 ----");
        assert_eq!(lines[4], "vec requant,64,64,8,32  ; L1");
        assert_eq!(lines[5], "write 200,8,-3");
    }
}
