//! Latency pipeline: one sample flows through the network with every layer
//! starting as soon as the pixels its next task needs exist.
//!
//! Scheduling proceeds in rounds over the layers in topological order; in
//! each round every replica (or, for layers without weights, every core
//! holding tasks) emits its next task if all inputs are already resident on
//! its core. Every produced pixel lives in its own heap block whose
//! reference count is the number of task reads still to come on that core
//! plus the transfers still waiting to send it; the block is freed when the
//! count reaches zero. Transfers are requested once per pixel and
//! destination core and flushed when the queue reaches a threshold or the
//! round ends.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{emit_aux_task, emit_weighted_task, Ctx, Emitter, GlobalAlloc, Heap, MemoryMap, Runtime, Schedule, WORD};
use crate::error::{Error, Result};
use crate::ir::LayerId;
use crate::isa::{CoreProgram, Op, Space};
use crate::mapping::{task_inputs, NET_INPUT};
use crate::Mode;

pub const DEFAULT_TRANSMIT_THRESHOLD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocKind {
    Alloc,
    Free,
}

/// A heap event placed before instruction `pos` of `core`'s program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub pos: usize,
    pub core: usize,
    pub kind: AllocKind,
    pub addr: u64,
    pub len: u64,
}

/// One pixel moved between cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transmit {
    pub layer: LayerId,
    pub pixel: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlTrace {
    pub allocs: Vec<AllocEvent>,
    pub transmits: Vec<Transmit>,
    pub rounds: usize,
    /// Freeing disabled and unbounded heaps.
    pub naive: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LlOptions {
    pub transmit_threshold: usize,
    pub naive: bool,
}

impl Default for LlOptions {
    fn default() -> Self {
        LlOptions { transmit_threshold: DEFAULT_TRANSMIT_THRESHOLD, naive: false }
    }
}

struct Pending {
    layer: LayerId,
    pixel: usize,
    from: usize,
    src: u64,
    to: usize,
    dst: u64,
    len: u64,
}

struct LlRt {
    em: Emitter,
    heaps: Vec<Heap>,
    size: u64,
    naive: bool,
    trace: LlTrace,
    zero: Vec<u64>,
    bias: BTreeMap<(usize, LayerId), u64>,
    /// Resident pixel blocks `(core, layer, pixel) -> addr`.
    resident: BTreeMap<(usize, LayerId, usize), u64>,
    refs: BTreeMap<(usize, LayerId, usize), usize>,
    input_base: u64,
    task_scratch: Vec<(usize, u64)>,
}

impl LlRt {
    fn alloc(&mut self, core: usize, bytes: u64) -> Result<u64> {
        let heap = &mut self.heaps[core];
        let addr =
            heap.alloc(bytes).ok_or(Error::LocalMemOverflow { core, needed: bytes, high_water: heap.high_water(), size: self.size })?;
        let len = bytes.max(1).div_ceil(WORD) * WORD;
        self.trace.allocs.push(AllocEvent { pos: self.em.progs[core].len(), core, kind: AllocKind::Alloc, addr, len });
        Ok(addr)
    }

    fn free(&mut self, core: usize, addr: u64) {
        if self.naive {
            return;
        }
        let len = self.heaps[core].free(addr);
        self.trace.allocs.push(AllocEvent { pos: self.em.progs[core].len(), core, kind: AllocKind::Free, addr, len });
    }

    /// Drops one reference to a resident pixel, freeing it at zero.
    fn unref(&mut self, key: (usize, LayerId, usize)) {
        let r = self.refs.get_mut(&key).expect("reference to a pixel that is not resident");
        *r -= 1;
        if *r == 0 {
            self.refs.remove(&key);
            let addr = self.resident.remove(&key).unwrap();
            self.free(key.0, addr);
        }
    }
}

impl Runtime for LlRt {
    fn em(&mut self) -> &mut Emitter {
        &mut self.em
    }

    fn scratch(&mut self, core: usize, bytes: u64) -> Result<u64> {
        self.alloc(core, bytes)
    }

    fn release(&mut self, core: usize, addr: u64) {
        self.free(core, addr);
    }

    fn input_pixel(&mut self, ctx: &Ctx, core: usize, consumer: LayerId, src: LayerId, px: usize) -> Result<u64> {
        if src == NET_INPUT {
            let bytes = ctx.pixel_bytes(NET_INPUT);
            let a = self.alloc(core, bytes)?;
            self.em.op(core, Op::Load { dst: a, src: self.input_base + px as u64 * bytes, len: bytes }, consumer);
            self.task_scratch.push((core, a));
            return Ok(a);
        }
        self.resident.get(&(core, src, px)).copied().ok_or_else(|| Error::invalid(Some(consumer), "input pixel not resident"))
    }

    fn zero_pixel(&mut self, core: usize) -> u64 {
        self.zero[core]
    }

    fn bias(&self, core: usize, layer: LayerId) -> Option<u64> {
        self.bias.get(&(core, layer)).copied()
    }
}

/// Emits a whole single-sample inference.
pub fn schedule_ll(ctx: &Ctx, opts: LlOptions) -> Result<Schedule> {
    let g = ctx.g;
    let cfg = ctx.cfg;
    let cores = cfg.total_cores();
    let heap_size = if opts.naive { u64::MAX / 4 } else { cfg.local_mem_size };
    let mut rt = LlRt {
        em: Emitter::new(cores),
        heaps: (0..cores).map(|_| Heap::new(heap_size)).collect(),
        size: heap_size,
        naive: opts.naive,
        trace: LlTrace { naive: opts.naive, ..LlTrace::default() },
        zero: vec![0; cores],
        bias: BTreeMap::new(),
        resident: BTreeMap::new(),
        refs: BTreeMap::new(),
        input_base: 0,
        task_scratch: Vec::new(),
    };
    let order = g.topo_order()?;

    // constants live in the setup program; their blocks are never freed
    let mut setup = Emitter::new(cores);
    let zbytes = ctx.max_pixel_bytes();
    for c in 0..cores {
        rt.zero[c] =
            rt.heaps[c].alloc(zbytes).ok_or(Error::LocalMemOverflow { core: c, needed: zbytes, high_water: 0, size: heap_size })?;
        setup.op(c, Op::Write { dst: rt.zero[c], len: zbytes, imm: 0 }, NET_INPUT);
    }
    for &l in &order {
        let Some(bias) = ctx.quant.get(&l).and_then(|q| q.bias.clone()) else { continue };
        if !g.layer(l).op.is_weighted() {
            continue;
        }
        for &c in ctx.assign.layers[&l].per_core.keys() {
            let len = bias.len() as u64 * WORD;
            let heap = &mut rt.heaps[c];
            let base =
                heap.alloc(len).ok_or(Error::LocalMemOverflow { core: c, needed: len, high_water: heap.high_water(), size: heap_size })?;
            for (o, &b) in bias.iter().enumerate() {
                setup.op(c, Op::Write { dst: base + o as u64 * WORD, len: WORD, imm: b }, l);
            }
            rt.bias.insert((c, l), base);
        }
    }

    let mut global = GlobalAlloc::default();
    let mut memory = MemoryMap::default();
    memory.input_bytes = ctx.pixels(NET_INPUT) as u64 * ctx.pixel_bytes(NET_INPUT);
    memory.input = global.alloc(memory.input_bytes);
    rt.input_base = memory.input;
    for &l in g.outputs() {
        let bytes = ctx.pixels(l) as u64 * ctx.pixel_bytes(l);
        memory.outputs.insert(l, global.alloc(bytes));
        memory.output_bytes.insert(l, bytes);
    }

    // static reads of every pixel per core
    let mut inputs: BTreeMap<(LayerId, usize), Vec<(LayerId, usize)>> = BTreeMap::new();
    let mut reads: BTreeMap<(usize, LayerId, usize), usize> = BTreeMap::new();
    for &l in &order {
        let lt = &ctx.assign.layers[&l];
        for t in 0..lt.tasks() {
            let ins: Vec<(LayerId, usize)> = task_inputs(g, l, t).into_iter().filter(|(s, _)| *s != NET_INPUT).collect();
            for &(s, p) in &ins {
                *reads.entry((lt.core(t), s, p)).or_default() += 1;
            }
            inputs.insert((l, t), ins);
        }
    }
    let mut dests: BTreeMap<(LayerId, usize), Vec<usize>> = BTreeMap::new();
    for &(c, s, p) in reads.keys() {
        dests.entry((s, p)).or_default().push(c);
    }

    // lanes: each replica or each core runs its tasks in order
    let mut lanes: Vec<(LayerId, VecDeque<usize>)> = Vec::new();
    for &l in &order {
        let lt = &ctx.assign.layers[&l];
        if g.layer(l).op.is_weighted() {
            let reps = ctx.layout.layers[&l].replicas;
            for r in 0..reps {
                lanes.push((l, (0..lt.tasks()).filter(|&t| lt.owner[t].0 == r).collect()));
            }
        } else {
            for ts in lt.per_core.values() {
                lanes.push((l, ts.iter().copied().collect()));
            }
        }
    }

    let mut pending: Vec<Pending> = Vec::new();
    let flush = |rt: &mut LlRt, pending: &mut Vec<Pending>| {
        for p in pending.drain(..) {
            rt.em.transfer(p.from, p.src, p.to, p.dst, p.len, p.layer);
            rt.trace.transmits.push(Transmit { layer: p.layer, pixel: p.pixel, from: p.from, to: p.to });
            rt.resident.insert((p.to, p.layer, p.pixel), p.dst);
            rt.unref((p.from, p.layer, p.pixel));
        }
    };

    let total: usize = lanes.iter().map(|(_, q)| q.len()).sum();
    let mut done = 0usize;
    while done < total {
        rt.trace.rounds += 1;
        let mut progressed = false;
        for li in 0..lanes.len() {
            let (l, Some(&t)) = (lanes[li].0, lanes[li].1.front()) else { continue };
            let core = ctx.assign.layers[&l].core(t);
            if !inputs[&(l, t)].iter().all(|&(s, p)| rt.resident.contains_key(&(core, s, p))) {
                continue;
            }
            lanes[li].1.pop_front();
            let bytes = ctx.pixel_bytes(l);
            let out = rt.alloc(core, bytes)?;
            if g.layer(l).op.is_weighted() {
                emit_weighted_task(ctx, &mut rt, l, t, out)?;
            } else {
                emit_aux_task(ctx, &mut rt, l, t, core, out)?;
            }
            for (c, a) in std::mem::take(&mut rt.task_scratch) {
                rt.free(c, a);
            }
            for &(s, p) in &inputs[&(l, t)] {
                rt.unref((core, s, p));
            }
            if let Some(&o) = memory.outputs.get(&l) {
                rt.em.op(core, Op::Store { dst: o + t as u64 * bytes, src: out, len: bytes }, l);
            }
            // local reads plus one per queued transfer; a pixel nobody
            // needs here is held only by its transfers
            let local = reads.get(&(core, l, t)).copied().unwrap_or(0);
            let remote: Vec<usize> = dests.get(&(l, t)).map(|v| v.iter().copied().filter(|&d| d != core).collect()).unwrap_or_default();
            let count = local + remote.len();
            rt.resident.insert((core, l, t), out);
            if count == 0 {
                rt.resident.remove(&(core, l, t));
                rt.free(core, out);
            } else {
                rt.refs.insert((core, l, t), count);
            }
            for d in remote {
                let dst = rt.alloc(d, bytes)?;
                rt.refs.insert((d, l, t), reads[&(d, l, t)]);
                pending.push(Pending { layer: l, pixel: t, from: core, src: out, to: d, dst, len: bytes });
            }
            if pending.len() >= opts.transmit_threshold.max(1) {
                flush(&mut rt, &mut pending);
            }
            done += 1;
            progressed = true;
        }
        flush(&mut rt, &mut pending);
        if !progressed {
            let stuck = lanes.iter().filter_map(|(l, q)| q.front().map(|&t| (*l, t))).collect();
            return Err(Error::Deadlock(stuck));
        }
    }

    memory.global_used = global.used();
    Ok(Schedule {
        mode: Mode::Ll,
        setup: setup.into_programs(),
        programs: rt.em.into_programs(),
        ags: ctx.ags.clone(),
        memory,
        groups: Vec::new(),
        high_water: rt.heaps.iter().map(|h| h.high_water()).collect(),
        ll: Some(rt.trace),
    })
}

/// Replays the allocation log against the programs and reports every
/// instruction that touches local memory outside a live block. Constant
/// blocks from the setup program are live throughout.
pub fn check_liveness(sched: &Schedule) -> Vec<String> {
    let Some(trace) = &sched.ll else { return Vec::new() };
    let mut problems = Vec::new();
    for (core, prog) in sched.programs.iter().enumerate() {
        let mut live: BTreeMap<u64, u64> = constant_blocks(&sched.setup[core]);
        let mut events = trace.allocs.iter().filter(|e| e.core == core).peekable();
        for (pos, inst) in prog.instrs.iter().enumerate() {
            while let Some(e) = events.next_if(|e| e.pos <= pos) {
                match e.kind {
                    AllocKind::Alloc => {
                        live.insert(e.addr, e.len);
                    }
                    AllocKind::Free => {
                        live.remove(&e.addr);
                    }
                }
            }
            let accesses = inst.op.reads().into_iter().chain(inst.op.writes(&sched.ags.infos)).filter(|a| a.space == Space::Local);
            for a in accesses {
                let ok = live.range(..=a.addr).next_back().is_some_and(|(&s, &l)| a.addr + a.len <= s + l);
                if !ok {
                    problems.push(format!(
                        "core {core} instr {pos}: {} touches [{}, {}) outside a live block",
                        inst.op.opcode().mnemonic(),
                        a.addr,
                        a.addr + a.len
                    ));
                }
            }
        }
    }
    problems
}

/// Blocks written by a setup program, merged into word runs.
fn constant_blocks(setup: &CoreProgram) -> BTreeMap<u64, u64> {
    let mut out: BTreeMap<u64, u64> = BTreeMap::new();
    for i in &setup.instrs {
        if let Op::Write { dst, len, .. } = i.op {
            match out.range_mut(..=dst).next_back() {
                Some((&s, l)) if s + *l == dst => *l += len,
                _ => {
                    out.insert(dst, len);
                }
            }
        }
    }
    out
}

/// True when every produced pixel was sent to each core at most once.
pub fn transmits_unique(trace: &LlTrace) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    trace.transmits.iter().all(|t| seen.insert((t.layer, t.pixel, t.to)))
}
