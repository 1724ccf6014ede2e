//! Discrete-event timing model.
//!
//! Each core owns timelines for its crossbar control units, vector units,
//! local-memory port, global-memory port and network link. Instructions are
//! placed in program order at the earliest time that respects data hazards
//! on the byte ranges they touch, the issue window of the execution model,
//! barriers, and free time on every unit they occupy. Synchronous transfers
//! start when both sides are ready and finish together.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::{CommMechanism, ExecModel, HardwareConfig, MgmtGranularity};
use crate::isa::{AgInfo, CoreProgram, Op, Space};

/// Busy intervals of one unit, keyed by start.
#[derive(Debug, Clone, Default)]
struct Timeline {
    busy: BTreeMap<u64, u64>,
}

impl Timeline {
    /// Earliest start `>= t` of a free interval of length `d`.
    fn fit(&self, t: u64, d: u64) -> u64 {
        let mut t = t;
        if let Some((_, &e)) = self.busy.range(..=t).next_back() {
            t = t.max(e);
        }
        for (&s, &e) in self.busy.range(t..) {
            if s >= t + d {
                break;
            }
            t = t.max(e);
        }
        t
    }

    fn reserve(&mut self, s: u64, d: u64) {
        if d > 0 {
            self.busy.insert(s, s + d);
        }
    }
}

/// Earliest common start on several units.
fn fit_all(tls: &[&Timeline], t: u64, d: u64) -> u64 {
    let mut t = t;
    loop {
        let next = tls.iter().fold(t, |acc, tl| acc.max(tl.fit(acc, d)));
        if next == t {
            return t;
        }
        t = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Pimfu,
    Vfu,
    LocalMem,
    GlobalMem,
    Noc,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Pimfu, Component::Vfu, Component::LocalMem, Component::GlobalMem, Component::Noc];

    pub fn label(self) -> &'static str {
        ["pimfu", "vfu", "local_mem", "global_mem", "noc"][self as usize]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingResult {
    pub makespan: u64,
    /// Start and end of every instruction, per core in program order.
    pub spans: Vec<Vec<Span>>,
    /// Time every barrier was passed, in barrier order.
    pub barrier_times: Vec<u64>,
    /// Busy cycles per core and component (summed over units).
    pub busy: Vec<[u64; 5]>,
    /// Units per core and component.
    pub units: [usize; 5],
}

impl TimingResult {
    /// Instructions in completion order; at equal times a receive follows
    /// the send it pairs with, then lower core and program position first.
    pub fn commit_order(&self, programs: &[CoreProgram]) -> Vec<(usize, usize)> {
        let mut v: Vec<(u64, bool, usize, usize)> = Vec::new();
        for (c, spans) in self.spans.iter().enumerate() {
            for (i, s) in spans.iter().enumerate() {
                let recv = matches!(programs[c].instrs[i].op, Op::Recv { .. });
                v.push((s.end, recv, c, i));
            }
        }
        v.sort_unstable();
        v.into_iter().map(|(_, _, c, i)| (c, i)).collect()
    }

    /// Busy fraction of each component per core.
    pub fn utilization(&self) -> Vec<[f64; 5]> {
        self.busy
            .iter()
            .map(|b| {
                let mut u = [0.0; 5];
                for k in 0..5 {
                    let cap = self.makespan as f64 * self.units[k] as f64;
                    u[k] = if cap > 0.0 { (b[k] as f64 / cap).min(1.0) } else { 0.0 };
                }
                u
            })
            .collect()
    }
}

/// Last write and last read completion per word.
#[derive(Default)]
struct Hazards {
    words: HashMap<(Space, u64), (u64, u64)>,
}

impl Hazards {
    fn words(space: Space, addr: u64, len: u64) -> impl Iterator<Item = (Space, u64)> {
        (addr / 4..(addr + len).div_ceil(4)).map(move |w| (space, w))
    }

    fn ready(&self, op: &Op, ags: &[AgInfo]) -> u64 {
        let mut t = 0;
        for a in op.reads() {
            for w in Self::words(a.space, a.addr, a.len) {
                if let Some(&(wd, _)) = self.words.get(&w) {
                    t = t.max(wd);
                }
            }
        }
        for a in op.writes(ags) {
            for w in Self::words(a.space, a.addr, a.len) {
                if let Some(&(wd, rd)) = self.words.get(&w) {
                    t = t.max(wd).max(rd);
                }
            }
        }
        t
    }

    fn commit(&mut self, op: &Op, ags: &[AgInfo], end: u64) {
        for a in op.reads() {
            for w in Self::words(a.space, a.addr, a.len) {
                let e = self.words.entry(w).or_default();
                e.1 = e.1.max(end);
            }
        }
        for a in op.writes(ags) {
            for w in Self::words(a.space, a.addr, a.len) {
                let e = self.words.entry(w).or_default();
                e.0 = e.0.max(end);
            }
        }
    }
}

struct CoreState {
    pim: Vec<Timeline>,
    vfu: Vec<Timeline>,
    lmem: Timeline,
    gmem: Timeline,
    noc: Timeline,
    hazards: Hazards,
    cursor: usize,
    next_barrier: usize,
    floor: u64,
    posted: bool,
    busy: [u64; 5],
}

/// A communication instruction waiting for its partner.
#[derive(Clone, Copy)]
struct Posted {
    core: usize,
    idx: usize,
    ready: u64,
}

pub struct Simulator<'a> {
    cfg: &'a HardwareConfig,
    ags: &'a [AgInfo],
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a HardwareConfig, ags: &'a [AgInfo]) -> Self {
        Simulator { cfg, ags }
    }

    fn pim_units(&self) -> usize {
        let arrays = self.ags.iter().map(|a| a.first_array + a.arrays).max().unwrap_or(0).max(1);
        match self.cfg.pim_mgmt_granularity {
            MgmtGranularity::SingleArray => arrays,
            MgmtGranularity::ArraySet(n) => arrays.div_ceil(n.max(1)),
            MgmtGranularity::All => 1,
        }
    }

    fn unit_of(&self, array: usize) -> usize {
        match self.cfg.pim_mgmt_granularity {
            MgmtGranularity::SingleArray => array,
            MgmtGranularity::ArraySet(n) => array / n.max(1),
            MgmtGranularity::All => 0,
        }
    }

    fn comm_cycles(&self, a: usize, b: usize, len: u64) -> u64 {
        let sync = if self.cfg.comm_mechanism == CommMechanism::Sync { self.cfg.timing.handshake } else { 0 };
        sync + self.cfg.hop_cycles(a, b) + self.cfg.transfer_cycles(len, self.cfg.link_bandwidth(a, b))
    }

    /// Earliest start of instruction `i` from core-local constraints only.
    fn local_ready(&self, st: &CoreState, prog: &CoreProgram, spans: &[Span], i: usize) -> u64 {
        let op = &prog.instrs[i].op;
        let mut t = st.floor.max(st.hazards.ready(op, self.ags));
        match self.cfg.exec_model {
            ExecModel::OutOfOrder => {
                let w = self.cfg.timing.lookahead.max(1);
                if i >= w {
                    t = t.max(spans[i - w].end);
                }
            }
            ExecModel::InOrder => {
                if i > 0 {
                    let prev = &prog.instrs[i - 1].op;
                    let batched = matches!(op, Op::Load { .. }) && matches!(prev, Op::Load { .. });
                    t = t.max(if batched { spans[i - 1].start } else { spans[i - 1].end });
                }
            }
        }
        t
    }

    /// Places a non-transfer instruction.
    fn place(&self, st: &mut CoreState, op: &Op, ready: u64) -> Span {
        let cfg = self.cfg;
        let tm = &cfg.timing;
        match *op {
            Op::Mvm { ag, .. } => {
                let info = self.ags[ag as usize];
                let d = tm.mvm_latency + cfg.transfer_cycles(info.out_len, cfg.local_mem_bandwidth);
                let mut units: Vec<usize> = (info.first_array..info.first_array + info.arrays).map(|a| self.unit_of(a)).collect();
                units.dedup();
                let s = fit_all(&units.iter().map(|&u| &st.pim[u]).collect::<Vec<_>>(), ready, d);
                for &u in &units {
                    st.pim[u].reserve(s, d);
                }
                st.busy[0] += d * units.len() as u64;
                Span { start: s, end: s + d }
            }
            Op::Vec { len, .. } => {
                let d = (len / 4).div_ceil(tm.vec_elems_per_cycle.max(1)).max(1);
                let (u, s) = st.vfu.iter().enumerate().map(|(u, tl)| (u, tl.fit(ready, d))).min_by_key(|&(u, s)| (s, u)).unwrap();
                st.vfu[u].reserve(s, d);
                st.busy[1] += d;
                Span { start: s, end: s + d }
            }
            Op::Copy { len, .. } | Op::Write { len, .. } => {
                let d = cfg.transfer_cycles(len, cfg.local_mem_bandwidth);
                let s = st.lmem.fit(ready, d);
                st.lmem.reserve(s, d);
                st.busy[2] += d;
                Span { start: s, end: s + d }
            }
            Op::Load { len, .. } | Op::Store { len, .. } => {
                let d = cfg.transfer_cycles(len, cfg.global_mem_bandwidth);
                let s = st.gmem.fit(ready, d);
                st.gmem.reserve(s, d);
                st.busy[3] += d;
                Span { start: s, end: s + d + tm.global_latency }
            }
            Op::Send { .. } | Op::Recv { .. } => unreachable!("transfers are placed in pairs"),
        }
    }

    pub fn run(&self, programs: &[CoreProgram]) -> Result<TimingResult> {
        let n = programs.len();
        let units = self.pim_units();
        let vfus = self.cfg.vfu_count.max(1);
        let mut cores: Vec<CoreState> = (0..n)
            .map(|_| CoreState {
                pim: vec![Timeline::default(); units],
                vfu: vec![Timeline::default(); vfus],
                lmem: Timeline::default(),
                gmem: Timeline::default(),
                noc: Timeline::default(),
                hazards: Hazards::default(),
                cursor: 0,
                next_barrier: 0,
                floor: 0,
                posted: false,
                busy: [0; 5],
            })
            .collect();
        let mut spans: Vec<Vec<Span>> = programs.iter().map(|p| vec![Span::default(); p.len()]).collect();
        let barriers = programs.iter().map(|p| p.barriers.len()).max().unwrap_or(0);
        let mut barrier_times = Vec::with_capacity(barriers);
        let sync = self.cfg.comm_mechanism == CommMechanism::Sync;
        // SYNC: posted sends and receives per (from, to); ASYNC: arrival
        // times of sent data and posted receives
        let mut sends: HashMap<(usize, usize), VecDeque<Posted>> = HashMap::new();
        let mut recvs: HashMap<(usize, usize), VecDeque<Posted>> = HashMap::new();
        let mut arrivals: HashMap<(usize, usize), VecDeque<u64>> = HashMap::new();

        loop {
            let mut progressed = false;
            for c in 0..n {
                let prog = &programs[c];
                loop {
                    let st = &cores[c];
                    if st.posted || st.cursor >= prog.len() {
                        break;
                    }
                    if prog.barriers.get(st.next_barrier) == Some(&st.cursor) {
                        break;
                    }
                    let i = st.cursor;
                    let op = prog.instrs[i].op;
                    let ready = self.local_ready(st, prog, &spans[c], i);
                    match op {
                        Op::Send { peer, len, .. } => {
                            let to = peer as usize;
                            if sync {
                                match recvs.get_mut(&(c, to)).and_then(|q| q.pop_front()) {
                                    Some(r) => {
                                        self.rendezvous(&mut cores, &mut spans, programs, Posted { core: c, idx: i, ready }, r, len);
                                    }
                                    None => {
                                        sends.entry((c, to)).or_default().push_back(Posted { core: c, idx: i, ready });
                                        cores[c].posted = true;
                                    }
                                }
                            } else {
                                let st = &mut cores[c];
                                let d = self.comm_cycles(c, to, len);
                                let s = st.noc.fit(ready, d);
                                st.noc.reserve(s, d);
                                st.busy[4] += d;
                                let span = Span { start: s, end: s + d };
                                spans[c][i] = span;
                                st.hazards.commit(&op, self.ags, span.end);
                                st.cursor += 1;
                                match recvs.get_mut(&(c, to)).and_then(|q| q.pop_front()) {
                                    Some(r) => self.deliver(&mut cores, &mut spans, programs, r, span.end),
                                    None => arrivals.entry((c, to)).or_default().push_back(span.end),
                                }
                            }
                        }
                        Op::Recv { peer, len, .. } => {
                            let from = peer as usize;
                            let me = Posted { core: c, idx: i, ready };
                            if sync {
                                match sends.get_mut(&(from, c)).and_then(|q| q.pop_front()) {
                                    Some(s) => self.rendezvous(&mut cores, &mut spans, programs, s, me, len),
                                    None => {
                                        recvs.entry((from, c)).or_default().push_back(me);
                                        cores[c].posted = true;
                                    }
                                }
                            } else {
                                match arrivals.get_mut(&(from, c)).and_then(|q| q.pop_front()) {
                                    Some(at) => {
                                        cores[c].posted = true;
                                        self.deliver(&mut cores, &mut spans, programs, me, at);
                                    }
                                    None => {
                                        recvs.entry((from, c)).or_default().push_back(me);
                                        cores[c].posted = true;
                                    }
                                }
                            }
                        }
                        _ => {
                            let st = &mut cores[c];
                            let span = self.place(st, &op, ready);
                            spans[c][i] = span;
                            st.hazards.commit(&op, self.ags, span.end);
                            st.cursor += 1;
                        }
                    }
                    progressed = true;
                }
            }
            let at_barrier = |st: &CoreState, p: &CoreProgram| !st.posted && p.barriers.get(st.next_barrier) == Some(&st.cursor);
            if barrier_times.len() < barriers
                && (0..n).all(|c| at_barrier(&cores[c], &programs[c]) || programs[c].barriers.len() <= cores[c].next_barrier)
            {
                let t = spans.iter().flatten().map(|s| s.end).max().unwrap_or(0).max(barrier_times.last().copied().unwrap_or(0));
                for st in cores.iter_mut() {
                    st.floor = t;
                    st.next_barrier += 1;
                }
                barrier_times.push(t);
                continue;
            }
            if (0..n).all(|c| cores[c].cursor >= programs[c].len() && !cores[c].posted) {
                break;
            }
            if !progressed {
                let blocked = (0..n).filter(|&c| cores[c].cursor < programs[c].len()).map(|c| (c, cores[c].cursor)).collect();
                return Err(Error::Deadlock(blocked));
            }
        }

        let makespan = spans.iter().flatten().map(|s| s.end).max().unwrap_or(0).max(barrier_times.last().copied().unwrap_or(0));
        Ok(TimingResult { makespan, spans, barrier_times, busy: cores.iter().map(|c| c.busy).collect(), units: [units, vfus, 1, 1, 1] })
    }

    /// Completes a synchronous send/receive pair.
    fn rendezvous(&self, cores: &mut [CoreState], spans: &mut [Vec<Span>], programs: &[CoreProgram], s: Posted, r: Posted, len: u64) {
        let d = self.comm_cycles(s.core, r.core, len);
        let start = fit_all(&[&cores[s.core].noc, &cores[r.core].noc], s.ready.max(r.ready), d);
        for (p, occupy) in [(s, true), (r, s.core != r.core)] {
            let st = &mut cores[p.core];
            if occupy {
                st.noc.reserve(start, d);
                st.busy[4] += d;
            }
            spans[p.core][p.idx] = Span { start, end: start + d };
            st.hazards.commit(&programs[p.core].instrs[p.idx].op, self.ags, start + d);
            st.cursor = p.idx + 1;
            st.posted = false;
        }
    }

    /// Completes an asynchronous receive once its data has arrived.
    fn deliver(&self, cores: &mut [CoreState], spans: &mut [Vec<Span>], programs: &[CoreProgram], r: Posted, arrival: u64) {
        let st = &mut cores[r.core];
        let end = r.ready.max(arrival);
        spans[r.core][r.idx] = Span { start: r.ready, end };
        st.hazards.commit(&programs[r.core].instrs[r.idx].op, self.ags, end);
        st.cursor = r.idx + 1;
        st.posted = false;
    }
}

/// Convenience wrapper over [`Simulator::run`].
pub fn simulate_timing(programs: &[CoreProgram], ags: &[AgInfo], cfg: &HardwareConfig) -> Result<TimingResult> {
    Simulator::new(cfg, ags).run(programs)
}
