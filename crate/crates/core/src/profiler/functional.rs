//! Bit-exact functional execution of core programs.
//!
//! Memories are word arrays with an initialization bitmap. Instructions
//! commit in the order given by the timing model, each applying its full
//! effect at completion; SEND copies its source into a per-link mailbox and
//! the paired RECV drains it.

use std::collections::{HashMap, VecDeque};

use crate::backend::{self, PhysicalImage};
use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::isa::{CoreProgram, Op};
use crate::partition::Matrix;

/// How MVMs are evaluated.
pub enum MvmEngine<'a> {
    /// Quantized logical matrix per AG.
    Logical(&'a [Matrix<i32>]),
    /// Bit-split cell images per AG, recombined by shift and sign.
    Physical(&'a [Vec<PhysicalImage>]),
}

#[derive(Debug, Clone)]
pub struct Memory {
    words: Vec<i32>,
    init: Vec<bool>,
}

impl Memory {
    pub fn new(bytes: u64, zeroed: bool) -> Self {
        let n = bytes.div_ceil(4) as usize;
        Memory { words: vec![0; n], init: vec![zeroed; n] }
    }

    fn range(&self, addr: u64, len: u64) -> Result<std::ops::Range<usize>> {
        let (a, n) = ((addr / 4) as usize, (len / 4) as usize);
        if a + n > self.words.len() {
            return Err(Error::Format(format!("access [{addr}, {}) beyond memory of {} bytes", addr + len, self.words.len() * 4)));
        }
        Ok(a..a + n)
    }

    pub fn read(&self, addr: u64, len: u64, core: Option<usize>, pos: usize) -> Result<&[i32]> {
        let r = self.range(addr, len)?;
        if let Some(k) = self.init[r.clone()].iter().position(|&b| !b) {
            return Err(Error::UninitializedRead { core, addr: addr + 4 * k as u64, pos });
        }
        Ok(&self.words[r])
    }

    pub fn write(&mut self, addr: u64, data: &[i32]) -> Result<()> {
        let r = self.range(addr, data.len() as u64 * 4)?;
        self.words[r.clone()].copy_from_slice(data);
        self.init[r].iter_mut().for_each(|b| *b = true);
        Ok(())
    }
}

pub struct Machine<'a> {
    pub local: Vec<Memory>,
    pub global: Memory,
    cfg: &'a HardwareConfig,
    mailbox: HashMap<(usize, usize), VecDeque<Vec<i32>>>,
}

impl<'a> Machine<'a> {
    /// `zeroed` starts every word initialized to zero; otherwise reading a
    /// word before any write is an error.
    pub fn new(cfg: &'a HardwareConfig, global_bytes: u64, zeroed: bool) -> Self {
        Machine {
            local: (0..cfg.total_cores()).map(|_| Memory::new(cfg.local_mem_size, zeroed)).collect(),
            global: Memory::new(global_bytes.max(4), zeroed),
            cfg,
            mailbox: HashMap::new(),
        }
    }

    /// Runs programs in the given commit order.
    pub fn run(&mut self, programs: &[CoreProgram], order: &[(usize, usize)], engine: &MvmEngine) -> Result<()> {
        for &(c, i) in order {
            self.step(c, i, &programs[c].instrs[i].op, engine)?;
        }
        if let Some(((a, b), q)) = self.mailbox.iter().find(|(_, q)| !q.is_empty()) {
            return Err(Error::Format(format!("{} undelivered transfers from core {a} to core {b}", q.len())));
        }
        Ok(())
    }

    /// Runs programs sequentially core by core; only valid for programs
    /// without transfers.
    pub fn run_sequential(&mut self, programs: &[CoreProgram], engine: &MvmEngine) -> Result<()> {
        let order: Vec<(usize, usize)> = programs.iter().enumerate().flat_map(|(c, p)| (0..p.len()).map(move |i| (c, i))).collect();
        self.run(programs, &order, engine)
    }

    fn step(&mut self, c: usize, pos: usize, op: &Op, engine: &MvmEngine) -> Result<()> {
        let at = Some(c);
        match *op {
            Op::Mvm { ag, dst, src, len } => {
                let x = self.local[c].read(src, len, at, pos)?.to_vec();
                let y = match engine {
                    MvmEngine::Logical(m) => backend::logical_mvm(&m[ag as usize], &x),
                    MvmEngine::Physical(imgs) => backend::physical_mvm(&imgs[ag as usize], &x, self.cfg.cell_bits),
                };
                self.local[c].write(dst, &y)?;
            }
            Op::Vec { op, dst, src1, src2, len } => {
                let a = self.local[c].read(src1, len, at, pos)?.to_vec();
                let out: Vec<i32> = if op.is_unary() {
                    a.iter().map(|&v| op.apply(v, 0, src2)).collect()
                } else {
                    let b = self.local[c].read(src2, len, at, pos)?;
                    a.iter().zip(b).map(|(&u, &v)| op.apply(u, v, 0)).collect()
                };
                self.local[c].write(dst, &out)?;
            }
            Op::Copy { dst, src, len } => {
                let v = self.local[c].read(src, len, at, pos)?.to_vec();
                self.local[c].write(dst, &v)?;
            }
            Op::Write { dst, len, imm } => self.local[c].write(dst, &vec![imm; (len / 4) as usize])?,
            Op::Load { dst, src, len } => {
                let v = self.global.read(src, len, None, pos)?.to_vec();
                self.local[c].write(dst, &v)?;
            }
            Op::Store { dst, src, len } => {
                let v = self.local[c].read(src, len, at, pos)?.to_vec();
                self.global.write(dst, &v)?;
            }
            Op::Send { peer, src, len } => {
                let v = self.local[c].read(src, len, at, pos)?.to_vec();
                self.mailbox.entry((c, peer as usize)).or_default().push_back(v);
            }
            Op::Recv { peer, dst, .. } => {
                let v = self
                    .mailbox
                    .get_mut(&(peer as usize, c))
                    .and_then(|q| q.pop_front())
                    .ok_or_else(|| Error::Format(format!("core {c} instr {pos}: receive before its send")))?;
                self.local[c].write(dst, &v)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Inst;

    #[test]
    fn uninitialized_read_is_reported() {
        let cfg = HardwareConfig::preset("desk_tiny").unwrap();
        let p = CoreProgram { core: 0, instrs: vec![Inst::new(Op::Copy { dst: 0, src: 64, len: 4 }, 0)], barriers: vec![] };
        let mut m = Machine::new(&cfg, 64, false);
        let err = m.run_sequential(&[p, CoreProgram::new(1)], &MvmEngine::Logical(&[])).unwrap_err();
        assert!(matches!(err, Error::UninitializedRead { core: Some(0), addr: 64, pos: 0 }));
    }
}
