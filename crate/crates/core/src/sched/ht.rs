//! Throughput pipeline: every layer group works on a different sample and
//! the program of one pipeline iteration is reused for every batch step.
//!
//! An iteration has a compute phase and a boundary phase separated by
//! barriers. During compute, layer outputs go to per-core staging buffers
//! and layers of the same group exchange pixels directly. At the boundary,
//! staged outputs move to their consumers: into a local copy of the whole
//! feature map on the consumer core when it fits the retention budget,
//! otherwise to global memory, where consumers load windows through a small
//! row cache. An edge spanning `d` groups reads slot `d` of a shift chain
//! that advances one slot per iteration. The network input is injected into
//! input slot 0 before each iteration.

use std::collections::BTreeMap;

use super::{emit_aux_task, emit_weighted_task, Ctx, Emitter, GlobalAlloc, Heap, MemoryMap, Runtime, Schedule, WORD};
use crate::error::{Error, Result};
use crate::ir::{LayerId, LayerParams, OpKind, StructureGraph};
use crate::isa::Op;
use crate::mapping::NET_INPUT;
use crate::Mode;

/// Fraction of each core's local memory that retained inputs may use.
pub const RETENTION_BUDGET: f64 = 0.5;
/// Largest single LOAD/STORE pair used when advancing a shift chain.
const SHIFT_CHUNK: u64 = 4096;

/// Greedy grouping in topological order. A layer joins the current group if
/// it is independent of every member, or if the group's longest dependent
/// chain including it stays within the slowest single layer time.
pub fn group_layers(g: &StructureGraph, times: &BTreeMap<LayerId, f64>) -> Vec<Vec<LayerId>> {
    let order = g.topo_order().expect("validated graph is acyclic");
    let t = |l: LayerId| times.get(&l).copied().unwrap_or(0.0);
    let cycle = order.iter().map(|&l| t(l)).fold(0.0, f64::max);
    let mut groups: Vec<Vec<LayerId>> = Vec::new();
    let mut finish: BTreeMap<LayerId, f64> = BTreeMap::new();
    for &l in &order {
        let merged = groups.last().and_then(|cur| {
            let deps: Vec<LayerId> = cur.iter().copied().filter(|&m| g.reaches(m, l)).collect();
            let start = deps.iter().map(|m| finish[m]).fold(0.0, f64::max);
            let end = start + t(l);
            (deps.is_empty() || end <= cycle * (1.0 + 1e-9)).then_some(end)
        });
        match merged {
            Some(end) => {
                groups.last_mut().unwrap().push(l);
                finish.insert(l, end);
            }
            None => {
                groups.push(vec![l]);
                finish.insert(l, t(l));
            }
        }
    }
    groups
}

/// One group per layer in topological order.
pub fn singleton_groups(g: &StructureGraph) -> Vec<Vec<LayerId>> {
    g.topo_order().expect("validated graph is acyclic").into_iter().map(|l| vec![l]).collect()
}

/// Rows of the source map a consumer's window spans.
fn window_rows(g: &StructureGraph, consumer: LayerId) -> usize {
    let l = g.layer(consumer);
    match (l.op, &l.params) {
        (OpKind::Conv, LayerParams::Conv(c)) => c.kernel,
        (OpKind::Pool, LayerParams::Pool(p)) => p.kernel,
        (OpKind::Fc, _) | (OpKind::Flatten, _) => g.input_shapes(consumer)[0].h,
        _ => 1,
    }
}

struct RowCache {
    base: u64,
    rows: usize,
    width: usize,
    tags: Vec<Option<usize>>,
}

struct HtRt {
    em: Emitter,
    heaps: Vec<Heap>,
    size: u64,
    zero: Vec<u64>,
    bias: BTreeMap<(usize, LayerId), u64>,
    group: BTreeMap<LayerId, usize>,
    staging: BTreeMap<(LayerId, usize), u64>,
    /// Address of every staged pixel on its producing core.
    staged: BTreeMap<(LayerId, usize), u64>,
    retained: BTreeMap<(LayerId, usize), u64>,
    slots: BTreeMap<(LayerId, usize), u64>,
    caches: BTreeMap<(usize, LayerId, LayerId), RowCache>,
    received: BTreeMap<(usize, LayerId, usize), u64>,
    phase_scratch: Vec<(usize, u64)>,
}

impl HtRt {
    fn alloc(&mut self, core: usize, bytes: u64) -> Result<u64> {
        let heap = &mut self.heaps[core];
        heap.alloc(bytes).ok_or(Error::LocalMemOverflow { core, needed: bytes, high_water: heap.high_water(), size: self.size })
    }

    /// Slot distance of an edge: 0 within a group.
    fn delay(&self, src: LayerId, consumer: LayerId) -> usize {
        let gc = self.group[&consumer];
        if src == NET_INPUT {
            gc
        } else {
            gc - self.group[&src]
        }
    }

    fn cached_load(&mut self, ctx: &Ctx, core: usize, consumer: LayerId, src: LayerId, slot: usize, px: usize) -> Result<u64> {
        let bytes = ctx.pixel_bytes(src);
        let key = (core, consumer, src);
        if !self.caches.contains_key(&key) {
            let rows = window_rows(ctx.g, consumer);
            let width = if src == NET_INPUT { ctx.g.input_shape().w } else { ctx.g.shape(src).w };
            let base = self.alloc(core, (rows * width) as u64 * bytes)?;
            self.caches.insert(key, RowCache { base, rows, width, tags: vec![None; rows * width] });
        }
        let gbase = self.slots[&(src, slot)];
        let c = self.caches.get_mut(&key).unwrap();
        let (y, x) = (px / c.width, px % c.width);
        let idx = (y % c.rows) * c.width + x;
        let addr = c.base + idx as u64 * bytes;
        if c.tags[idx] != Some(px) {
            c.tags[idx] = Some(px);
            self.em.op(core, Op::Load { dst: addr, src: gbase + px as u64 * bytes, len: bytes }, consumer);
        }
        Ok(addr)
    }
}

impl Runtime for HtRt {
    fn em(&mut self) -> &mut Emitter {
        &mut self.em
    }

    fn scratch(&mut self, core: usize, bytes: u64) -> Result<u64> {
        self.alloc(core, bytes)
    }

    fn release(&mut self, core: usize, addr: u64) {
        self.heaps[core].free(addr);
    }

    fn input_pixel(&mut self, ctx: &Ctx, core: usize, consumer: LayerId, src: LayerId, px: usize) -> Result<u64> {
        let d = self.delay(src, consumer);
        if src != NET_INPUT && d == 0 {
            let pc = ctx.assign.pixel_core(src, px);
            let at = *self
                .staged
                .get(&(src, px))
                .ok_or_else(|| Error::invalid(Some(consumer), "reads a pixel its producer does not compute"))?;
            if pc == core {
                return Ok(at);
            }
            if let Some(&a) = self.received.get(&(core, src, px)) {
                return Ok(a);
            }
            let bytes = ctx.pixel_bytes(src);
            let dst = self.alloc(core, bytes)?;
            self.phase_scratch.push((core, dst));
            self.em.transfer(pc, at, core, dst, bytes, src);
            self.received.insert((core, src, px), dst);
            return Ok(dst);
        }
        if d == 1 {
            if let Some(&base) = self.retained.get(&(src, core)) {
                return Ok(base + px as u64 * ctx.pixel_bytes(src));
            }
        }
        self.cached_load(ctx, core, consumer, src, d, px)
    }

    fn zero_pixel(&mut self, core: usize) -> u64 {
        self.zero[core]
    }

    fn bias(&self, core: usize, layer: LayerId) -> Option<u64> {
        self.bias.get(&(core, layer)).copied()
    }
}

/// Which tasks to emit; `None` emits all.
pub type TaskFilter<'a> = Option<&'a dyn Fn(LayerId, usize) -> bool>;

/// Consecutive runs `(first pixel, count, staging address)` of a core's
/// staged pixels.
fn runs(pixels: &[usize], staged: &BTreeMap<(LayerId, usize), u64>, layer: LayerId) -> Vec<(usize, usize, u64)> {
    let mut out: Vec<(usize, usize, u64)> = Vec::new();
    for &p in pixels {
        let a = staged[&(layer, p)];
        match out.last_mut() {
            Some((s, n, _)) if *s + *n == p => *n += 1,
            _ => out.push((p, 1, a)),
        }
    }
    out
}

pub fn schedule_ht(ctx: &Ctx, groups: &[Vec<LayerId>], filter: TaskFilter) -> Result<Schedule> {
    let cfg = ctx.cfg;
    let cores = cfg.total_cores();
    let g = ctx.g;
    let group: BTreeMap<LayerId, usize> = groups.iter().enumerate().flat_map(|(i, ls)| ls.iter().map(move |&l| (l, i))).collect();
    let keep = |l: LayerId, t: usize| filter.is_none_or(|f| f(l, t));
    let tasks_on = |l: LayerId, c: usize| -> Vec<usize> {
        ctx.assign.layers[&l].per_core.get(&c).map(|v| v.iter().copied().filter(|&t| keep(l, t)).collect()).unwrap_or_default()
    };
    let exec_cores = |l: LayerId| -> Vec<usize> { (0..cores).filter(|&c| !tasks_on(l, c).is_empty()).collect() };

    let mut rt = HtRt {
        em: Emitter::new(cores),
        heaps: (0..cores).map(|_| Heap::new(cfg.local_mem_size)).collect(),
        size: cfg.local_mem_size,
        zero: vec![0; cores],
        bias: BTreeMap::new(),
        group: group.clone(),
        staging: BTreeMap::new(),
        staged: BTreeMap::new(),
        retained: BTreeMap::new(),
        slots: BTreeMap::new(),
        caches: BTreeMap::new(),
        received: BTreeMap::new(),
        phase_scratch: Vec::new(),
    };
    let mut setup = Emitter::new(cores);
    let mut global = GlobalAlloc::default();
    let mut memory = MemoryMap::default();

    // constants
    let zbytes = ctx.max_pixel_bytes();
    for c in 0..cores {
        rt.zero[c] = rt.alloc(c, zbytes)?;
        setup.op(c, Op::Write { dst: rt.zero[c], len: zbytes, imm: 0 }, NET_INPUT);
    }
    let order = g.topo_order()?;
    for &l in &order {
        if !g.layer(l).op.is_weighted() {
            continue;
        }
        let Some(bias) = ctx.quant.get(&l).and_then(|q| q.bias.clone()) else { continue };
        for c in exec_cores(l) {
            let base = rt.alloc(c, bias.len() as u64 * WORD)?;
            for (o, &b) in bias.iter().enumerate() {
                setup.op(c, Op::Write { dst: base + o as u64 * WORD, len: WORD, imm: b }, l);
            }
            rt.bias.insert((c, l), base);
        }
    }

    // staging buffers
    for &l in &order {
        let bytes = ctx.pixel_bytes(l);
        for c in exec_cores(l) {
            let ts = tasks_on(l, c);
            let base = rt.alloc(c, ts.len() as u64 * bytes)?;
            rt.staging.insert((l, c), base);
            for (k, t) in ts.into_iter().enumerate() {
                rt.staged.insert((l, t), base + k as u64 * bytes);
            }
        }
    }

    // retention and global slots
    let budget = (cfg.local_mem_size as f64 * RETENTION_BUDGET) as u64;
    let mut retained_bytes = vec![0u64; cores];
    let mut max_slot: BTreeMap<LayerId, usize> = BTreeMap::new();
    let mut input_slots = 0usize;
    for &lc in &order {
        for src in ctx.sources(lc) {
            let d = rt.delay(src, lc);
            if src == NET_INPUT {
                input_slots = input_slots.max(d + 1);
                continue;
            }
            if d == 0 {
                continue;
            }
            let size = ctx.pixels(src) as u64 * ctx.pixel_bytes(src);
            let mut needs_global = d > 1;
            if d == 1 {
                for c in exec_cores(lc) {
                    if rt.retained.contains_key(&(src, c)) {
                        continue;
                    }
                    if retained_bytes[c] + size <= budget {
                        let base = rt.alloc(c, size)?;
                        rt.retained.insert((src, c), base);
                        retained_bytes[c] += size;
                    } else {
                        needs_global = true;
                    }
                }
            }
            if needs_global {
                let m = max_slot.entry(src).or_default();
                *m = (*m).max(d);
            }
        }
    }
    let in_bytes = ctx.pixels(NET_INPUT) as u64 * ctx.pixel_bytes(NET_INPUT);
    for k in 0..input_slots.max(1) {
        let a = global.alloc(in_bytes);
        rt.slots.insert((NET_INPUT, k), a);
    }
    memory.input = rt.slots[&(NET_INPUT, 0)];
    memory.input_bytes = in_bytes;
    for (&l, &m) in &max_slot {
        let size = ctx.pixels(l) as u64 * ctx.pixel_bytes(l);
        for k in 1..=m {
            let a = global.alloc(size);
            rt.slots.insert((l, k), a);
        }
    }
    for &l in g.outputs() {
        let bytes = ctx.pixels(l) as u64 * ctx.pixel_bytes(l);
        memory.outputs.insert(l, global.alloc(bytes));
        memory.output_bytes.insert(l, bytes);
    }

    // compute phase
    for grp in groups {
        for &l in grp {
            let n = ctx.assign.layers[&l].tasks();
            let weighted = g.layer(l).op.is_weighted();
            for t in (0..n).filter(|&t| keep(l, t)) {
                let out = rt.staged[&(l, t)];
                if weighted {
                    emit_weighted_task(ctx, &mut rt, l, t, out)?;
                } else {
                    let core = ctx.assign.layers[&l].core(t);
                    emit_aux_task(ctx, &mut rt, l, t, core, out)?;
                }
            }
        }
    }
    for (c, a) in std::mem::take(&mut rt.phase_scratch) {
        rt.heaps[c].free(a);
    }
    rt.em.barrier();

    // boundary phase: advance shift chains oldest first, then publish
    let shift = |rt: &mut HtRt, core: usize, from: u64, to: u64, len: u64, layer: LayerId| -> Result<()> {
        let mut off = 0;
        while off < len {
            let n = SHIFT_CHUNK.min(len - off);
            let tmp = rt.alloc(core, n)?;
            rt.em.op(core, Op::Load { dst: tmp, src: from + off, len: n }, layer);
            rt.em.op(core, Op::Store { dst: to + off, src: tmp, len: n }, layer);
            rt.heaps[core].free(tmp);
            off += n;
        }
        Ok(())
    };
    for k in (1..input_slots).rev() {
        let (from, to) = (rt.slots[&(NET_INPUT, k - 1)], rt.slots[&(NET_INPUT, k)]);
        shift(&mut rt, 0, from, to, in_bytes, NET_INPUT)?;
    }
    for &l in &order {
        let bytes = ctx.pixel_bytes(l);
        let producers: Vec<(usize, Vec<(usize, usize, u64)>)> =
            exec_cores(l).into_iter().map(|c| (c, runs(&tasks_on(l, c), &rt.staged, l))).collect();
        let m = max_slot.get(&l).copied().unwrap_or(0);
        for k in (2..=m).rev() {
            let (from, to) = (rt.slots[&(l, k - 1)], rt.slots[&(l, k)]);
            for (c, rs) in &producers {
                for &(p, n, _) in rs {
                    let off = p as u64 * bytes;
                    shift(&mut rt, *c, from + off, to + off, n as u64 * bytes, l)?;
                }
            }
        }
        let mut publish_global = Vec::new();
        if m >= 1 {
            publish_global.push(rt.slots[&(l, 1)]);
        }
        if let Some(&o) = memory.outputs.get(&l) {
            publish_global.push(o);
        }
        for base in publish_global {
            for (c, rs) in &producers {
                for &(p, n, a) in rs {
                    rt.em.op(*c, Op::Store { dst: base + p as u64 * bytes, src: a, len: n as u64 * bytes }, l);
                }
            }
        }
        let holders: Vec<(usize, u64)> = rt.retained.iter().filter(|((s, _), _)| *s == l).map(|(&(_, c), &b)| (c, b)).collect();
        for (dst_core, base) in holders {
            for (c, rs) in &producers {
                for &(p, n, a) in rs {
                    let dst = base + p as u64 * bytes;
                    let len = n as u64 * bytes;
                    if *c == dst_core {
                        rt.em.copy(*c, dst, a, len, l);
                    } else {
                        rt.em.transfer(*c, a, dst_core, dst, len, l);
                    }
                }
            }
        }
    }
    rt.em.barrier();

    memory.global_used = global.used();
    let high_water = rt.heaps.iter().map(|h| h.high_water()).collect();
    Ok(Schedule {
        mode: Mode::Ht,
        setup: setup.into_programs(),
        programs: rt.em.into_programs(),
        ags: ctx.ags.clone(),
        memory,
        groups: groups.to_vec(),
        high_water,
        ll: None,
    })
}
