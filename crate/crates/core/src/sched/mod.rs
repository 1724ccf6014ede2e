//! Instruction scheduling shared by the throughput (HT) and latency (LL)
//! pipelines.
//!
//! Both schedulers act as a virtual runtime: they walk the computation in a
//! global order and append each instruction to its core's program, adding
//! SEND and RECV of a transfer at the same point. Every core therefore sees
//! its communication in one global order, which keeps synchronous
//! rendezvous deadlock free.
//!
//! Activations are stored one pixel per block: all channels of a pixel are
//! contiguous 4-byte words.

pub mod heap;
pub mod ht;
pub mod ll;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::QuantizedWeights;
use crate::error::Result;
use crate::hw::HardwareConfig;
use crate::ir::{Activation, LayerId, LayerParams, OpKind, StructureGraph};
use crate::isa::{AgInfo, CoreProgram, Op, VecOp, NO_LAYER};
use crate::layout::Layout;
use crate::mapping::{task_inputs, TaskAssignment, NET_INPUT};
use crate::partition::{LayerPartition, Matrix};
use crate::Mode;

pub use heap::Heap;

pub const WORD: u64 = 4;

/// Every placed AG with a dense id used by MVM instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgTable {
    pub infos: Vec<AgInfo>,
    /// `(layer, replica, AG index within the replica)` per id.
    pub keys: Vec<(LayerId, usize, usize)>,
    index: BTreeMap<(LayerId, usize, usize), u32>,
}

impl AgTable {
    pub fn build(parts: &BTreeMap<LayerId, LayerPartition>, layout: &Layout) -> Self {
        let mut infos = Vec::new();
        let mut keys = Vec::new();
        let mut index = BTreeMap::new();
        let mut next_array: BTreeMap<usize, usize> = BTreeMap::new();
        for (&layer, part) in parts {
            let place = &layout.layers[&layer];
            for (r, cores) in place.ag_cores.iter().enumerate() {
                for (a, &core) in cores.iter().enumerate() {
                    let spec = &part.ags[a];
                    let first = next_array.entry(core).or_default();
                    index.insert((layer, r, a), infos.len() as u32);
                    infos.push(AgInfo {
                        core,
                        in_len: spec.rows.len() as u64 * WORD,
                        out_len: part.format.w as u64 * WORD,
                        arrays: part.arrays_per_ag,
                        first_array: *first,
                    });
                    *first += part.arrays_per_ag;
                    keys.push((layer, r, a));
                }
            }
        }
        AgTable { infos, keys, index }
    }

    /// Rebuilds a table from its per-id entries.
    pub fn from_entries(infos: Vec<AgInfo>, keys: Vec<(LayerId, usize, usize)>) -> Self {
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        AgTable { infos, keys, index }
    }

    pub fn id(&self, layer: LayerId, replica: usize, ag: usize) -> u32 {
        self.index[&(layer, replica, ag)]
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.keys.iter().map(|k| k.0).collect()
    }

    /// Quantized logical matrix of every AG, indexed by AG id.
    pub fn matrices(&self, parts: &BTreeMap<LayerId, LayerPartition>, quant: &QuantizedWeights) -> Result<Vec<Matrix<i32>>> {
        let mut unfolded: BTreeMap<LayerId, Vec<Matrix<i32>>> = BTreeMap::new();
        for (&l, p) in parts {
            let q = quant.get(&l).ok_or_else(|| crate::Error::invalid(Some(l), "no weights for layer"))?;
            unfolded.insert(l, crate::partition::unfold_weights(&q.weights, &p.geom, &p.format)?);
        }
        Ok(self
            .keys
            .iter()
            .map(|&(l, _, a)| {
                let spec = &parts[&l].ags[a];
                unfolded[&l][spec.p_idx].row_block(spec.rows.clone())
            })
            .collect())
    }
}

/// Global memory regions the host uses to feed inputs and read results.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    /// Base address of the network input, pixel-major.
    pub input: u64,
    pub input_bytes: u64,
    /// Base address of each network output, pixel-major.
    pub outputs: BTreeMap<LayerId, u64>,
    pub output_bytes: BTreeMap<LayerId, u64>,
    pub global_used: u64,
}

/// Bump allocator over global memory.
#[derive(Debug, Clone, Default)]
pub struct GlobalAlloc {
    next: u64,
}

impl GlobalAlloc {
    pub fn alloc(&mut self, bytes: u64) -> u64 {
        let a = self.next;
        self.next += bytes.div_ceil(WORD) * WORD;
        a
    }
    pub fn used(&self) -> u64 {
        self.next
    }
}

/// Per-core programs under construction.
#[derive(Debug, Clone)]
pub struct Emitter {
    pub progs: Vec<CoreProgram>,
}

pub fn layer_tag(l: LayerId) -> u32 {
    if l == NET_INPUT {
        NO_LAYER
    } else {
        l as u32
    }
}

impl Emitter {
    pub fn new(cores: usize) -> Self {
        Emitter { progs: (0..cores).map(CoreProgram::new).collect() }
    }

    pub fn op(&mut self, core: usize, op: Op, layer: LayerId) {
        self.progs[core].push(op, layer_tag(layer));
    }

    pub fn transfer(&mut self, from: usize, src: u64, to: usize, dst: u64, len: u64, layer: LayerId) {
        self.op(from, Op::Send { peer: to as u32, src, len }, layer);
        self.op(to, Op::Recv { peer: from as u32, dst, len }, layer);
    }

    pub fn barrier(&mut self) {
        for p in &mut self.progs {
            p.barrier();
        }
    }

    pub fn copy(&mut self, core: usize, dst: u64, src: u64, len: u64, layer: LayerId) {
        if dst != src {
            self.op(core, Op::Copy { dst, src, len }, layer);
        }
    }

    pub fn vec(&mut self, core: usize, op: VecOp, dst: u64, src1: u64, src2: u64, len: u64, layer: LayerId) {
        self.op(core, Op::Vec { op, dst, src1, src2, len }, layer);
    }

    pub fn into_programs(self) -> Vec<CoreProgram> {
        self.progs
    }
}

/// Everything the schedulers read but never change.
pub struct Ctx<'a> {
    pub g: &'a StructureGraph,
    pub parts: &'a BTreeMap<LayerId, LayerPartition>,
    pub layout: &'a Layout,
    pub assign: &'a TaskAssignment,
    pub ags: &'a AgTable,
    pub quant: &'a QuantizedWeights,
    pub cfg: &'a HardwareConfig,
}

impl Ctx<'_> {
    pub fn pixel_bytes(&self, layer: LayerId) -> u64 {
        if layer == NET_INPUT {
            self.g.input_shape().c as u64 * WORD
        } else {
            self.g.shape(layer).c as u64 * WORD
        }
    }

    pub fn pixels(&self, layer: LayerId) -> usize {
        if layer == NET_INPUT {
            self.g.input_shape().pixels()
        } else {
            self.g.shape(layer).pixels()
        }
    }

    pub fn src_of(&self, layer: LayerId, k: usize) -> LayerId {
        self.g.layer(layer).preds.get(k).copied().unwrap_or(NET_INPUT)
    }

    /// Producers feeding a layer, with the network input as [`NET_INPUT`].
    pub fn sources(&self, layer: LayerId) -> Vec<LayerId> {
        let p = &self.g.layer(layer).preds;
        if p.is_empty() {
            vec![NET_INPUT]
        } else {
            p.clone()
        }
    }

    /// Largest pixel of any feature map, for the padding source.
    pub fn max_pixel_bytes(&self) -> u64 {
        self.g.layers().iter().map(|l| self.pixel_bytes(l.id)).chain([self.pixel_bytes(NET_INPUT)]).max().unwrap_or(WORD)
    }
}

/// State the task emitters need from a scheduler.
pub trait Runtime {
    fn em(&mut self) -> &mut Emitter;
    /// Temporary local buffer; released with [`Runtime::release`].
    fn scratch(&mut self, core: usize, bytes: u64) -> Result<u64>;
    fn release(&mut self, core: usize, addr: u64);
    /// Local address on `core` of `pixel` of `src` as read by `consumer`,
    /// bringing it in first if needed.
    fn input_pixel(&mut self, ctx: &Ctx, core: usize, consumer: LayerId, src: LayerId, pixel: usize) -> Result<u64>;
    /// A run of zero words at least one pixel long.
    fn zero_pixel(&mut self, core: usize) -> u64;
    /// Quantized bias of a weighted layer, resident on `core`.
    fn bias(&self, core: usize, layer: LayerId) -> Option<u64>;
}

/// Emits the instructions of one output pixel of a weighted layer, leaving
/// the finished pixel at `out` on the replica's home core.
pub fn emit_weighted_task<R: Runtime>(ctx: &Ctx, rt: &mut R, layer: LayerId, task: usize, out: u64) -> Result<()> {
    let part = &ctx.parts[&layer];
    let geom = &part.geom;
    let (replica, home) = ctx.assign.layers[&layer].owner[task];
    let src = ctx.src_of(layer, 0);
    let (oy, ox) = (task / geom.out_w, task % geom.out_w);
    let o_bytes = geom.c_out as u64 * WORD;
    let per_matrix = part.ags_per_matrix();
    let mut first = true;
    for step in &part.steps {
        let mut taps = Vec::with_capacity(step.taps.len());
        for &(kr, kc) in &step.taps {
            taps.push(match geom.tap_pixel(oy, ox, kr, kc) {
                Some(px) => rt.input_pixel(ctx, home, layer, src, px)?,
                None => rt.zero_pixel(home),
            });
        }
        for a in 0..per_matrix {
            let idx = step.p * per_matrix + a;
            let spec = &part.ags[idx];
            let ag = ctx.ags.id(layer, replica, idx);
            let info = ctx.ags.infos[ag as usize];
            let in_bytes = info.in_len;
            let gathered = if let [seg] = spec.input_slice.as_slice() {
                (taps[seg.tap] + seg.ch_start as u64 * WORD, None)
            } else {
                let buf = rt.scratch(home, in_bytes)?;
                let mut off = 0;
                for seg in &spec.input_slice {
                    let len = seg.ch_len as u64 * WORD;
                    rt.em().copy(home, buf + off, taps[seg.tap] + seg.ch_start as u64 * WORD, len, layer);
                    off += len;
                }
                (buf, Some(buf))
            };
            let col = step.col_off as u64 * WORD;
            let (partial, partial_buf) = if info.core == home {
                let buf = rt.scratch(home, info.out_len)?;
                rt.em().op(home, Op::Mvm { ag, dst: buf, src: gathered.0, len: in_bytes }, layer);
                (buf + col, buf)
            } else {
                let c = info.core;
                let rx = rt.scratch(c, in_bytes)?;
                rt.em().transfer(home, gathered.0, c, rx, in_bytes, layer);
                let res = rt.scratch(c, info.out_len)?;
                rt.em().op(c, Op::Mvm { ag, dst: res, src: rx, len: in_bytes }, layer);
                let back = rt.scratch(home, o_bytes)?;
                rt.em().transfer(c, res + col, home, back, o_bytes, layer);
                rt.release(c, rx);
                rt.release(c, res);
                (back, back)
            };
            if first {
                rt.em().copy(home, out, partial, o_bytes, layer);
                first = false;
            } else {
                rt.em().vec(home, VecOp::Add, out, out, partial, o_bytes, layer);
            }
            rt.release(home, partial_buf);
            if let Some(b) = gathered.1 {
                rt.release(home, b);
            }
        }
    }
    let shift = ctx.quant.get(&layer).map_or(0, |q| q.shift);
    if shift > 0 {
        rt.em().vec(home, VecOp::Requant, out, out, shift as u64, o_bytes, layer);
    }
    if let Some(b) = rt.bias(home, layer) {
        rt.em().vec(home, VecOp::Add, out, out, b, o_bytes, layer);
    }
    if ctx.g.layer(layer).fused_activation == Activation::Relu {
        rt.em().vec(home, VecOp::Relu, out, out, 0, o_bytes, layer);
    }
    Ok(())
}

/// Emits one output pixel of a non-weighted layer on `core`.
pub fn emit_aux_task<R: Runtime>(ctx: &Ctx, rt: &mut R, layer: LayerId, task: usize, core: usize, out: u64) -> Result<()> {
    let l = ctx.g.layer(layer);
    let out_bytes = ctx.pixel_bytes(layer);
    let inputs = task_inputs(ctx.g, layer, task);
    let mut addrs = Vec::with_capacity(inputs.len());
    for &(src, px) in &inputs {
        addrs.push((src, rt.input_pixel(ctx, core, layer, src, px)?));
    }
    match (l.op, &l.params) {
        (OpKind::Pool, _) => match addrs.split_first() {
            Some((&(_, a0), rest)) => {
                rt.em().copy(core, out, a0, out_bytes, layer);
                for &(_, a) in rest {
                    rt.em().vec(core, VecOp::MaxpoolStep, out, out, a, out_bytes, layer);
                }
            }
            None => rt.em().op(core, Op::Write { dst: out, len: out_bytes, imm: 0 }, layer),
        },
        (OpKind::EltwiseAdd, _) => {
            rt.em().copy(core, out, addrs[0].1, out_bytes, layer);
            for &(_, a) in &addrs[1..] {
                rt.em().vec(core, VecOp::Add, out, out, a, out_bytes, layer);
            }
        }
        (OpKind::Concat, _) => {
            let mut off = 0;
            for &(src, a) in &addrs {
                let len = ctx.pixel_bytes(src);
                rt.em().copy(core, out + off, a, len, layer);
                off += len;
            }
        }
        (OpKind::Activation, _) => rt.em().vec(core, VecOp::Relu, out, addrs[0].1, 0, out_bytes, layer),
        (OpKind::Split, LayerParams::Split(s)) => {
            rt.em().copy(core, out, addrs[0].1 + s.start as u64 * WORD, out_bytes, layer);
        }
        (OpKind::Flatten, _) => {
            let mut off = 0;
            for &(src, a) in &addrs {
                let len = ctx.pixel_bytes(src);
                rt.em().copy(core, out + off, a, len, layer);
                off += len;
            }
        }
        _ => return Err(crate::Error::UnsupportedLayer(layer)),
    }
    if l.fused_activation == Activation::Relu && l.op != OpKind::Activation {
        rt.em().vec(core, VecOp::Relu, out, out, 0, out_bytes, layer);
    }
    Ok(())
}

/// Output of either scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub mode: Mode,
    /// One-time constant setup run before the first iteration.
    pub setup: Vec<CoreProgram>,
    /// HT: one pipeline iteration. LL: the whole inference.
    pub programs: Vec<CoreProgram>,
    pub ags: AgTable,
    pub memory: MemoryMap,
    /// HT layer groups in pipeline order; empty for LL.
    pub groups: Vec<Vec<LayerId>>,
    /// Peak bytes of local memory in use per core.
    pub high_water: Vec<u64>,
    /// LL bookkeeping for the replay checks.
    pub ll: Option<ll::LlTrace>,
}

impl Schedule {
    /// Group index of every layer (HT).
    pub fn group_of(&self) -> BTreeMap<LayerId, usize> {
        self.groups.iter().enumerate().flat_map(|(gi, ls)| ls.iter().map(move |&l| (l, gi))).collect()
    }
}
