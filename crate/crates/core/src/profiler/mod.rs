//! Timing, functional and energy evaluation of compiled programs, plus the
//! summary report.

pub mod functional;
pub mod timing;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::quantize_activation;
use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::LayerId;
use crate::isa::{AgInfo, CoreProgram, Inst, Op, Space, NO_LAYER};
use crate::sched::Schedule;
use crate::Mode;

pub use functional::{Machine, MvmEngine};
pub use timing::{simulate_timing, Component, Span, TimingResult};

/// Appends programs run one after another, with a barrier between parts.
pub fn concat(parts: &[&[CoreProgram]]) -> Vec<CoreProgram> {
    let cores = parts.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut out: Vec<CoreProgram> = (0..cores).map(CoreProgram::new).collect();
    for (k, part) in parts.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            if k > 0 {
                o.barrier();
            }
            if let Some(p) = part.get(c) {
                let base = o.instrs.len();
                o.instrs.extend_from_slice(&p.instrs);
                o.barriers.extend(p.barriers.iter().map(|b| b + base));
            }
        }
    }
    out
}

/// One HT iteration with the compute work of inactive groups removed.
/// `active(group)` says whether a group holds a real sample.
pub fn mask_iteration(s: &Schedule, active: &dyn Fn(usize) -> bool) -> Vec<CoreProgram> {
    let group = s.group_of();
    s.programs
        .iter()
        .map(|p| {
            let compute_end = p.barriers.first().copied().unwrap_or(p.len());
            let keep = |i: usize, inst: &Inst| {
                i >= compute_end || inst.layer == NO_LAYER || group.get(&(inst.layer as LayerId)).is_none_or(|&g| active(g))
            };
            let mut q = CoreProgram::new(p.core);
            let mut removed = 0;
            let mut barriers = p.barriers.iter().peekable();
            for (i, inst) in p.instrs.iter().enumerate() {
                while barriers.next_if(|&&b| b == i).is_some() {
                    q.barriers.push(i - removed);
                }
                if keep(i, inst) {
                    q.instrs.push(*inst);
                } else {
                    removed += 1;
                }
            }
            q.barriers.extend(barriers.map(|&b| b - removed));
            q
        })
        .collect()
}

/// Pipeline iterations needed to push `batch` samples through.
pub fn ht_iterations(s: &Schedule, batch: usize) -> usize {
    batch + s.groups.len().saturating_sub(1)
}

/// Setup followed by the fill, steady and drain iterations of a batch.
pub fn ht_batch_programs(s: &Schedule, batch: usize) -> Vec<CoreProgram> {
    let iters: Vec<Vec<CoreProgram>> =
        (0..ht_iterations(s, batch)).map(|i| mask_iteration(s, &|g: usize| i >= g && i - g < batch)).collect();
    let mut parts: Vec<&[CoreProgram]> = vec![&s.setup];
    parts.extend(iters.iter().map(|v| v.as_slice()));
    concat(&parts)
}

/// Timing figures of a compiled schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    /// Cycles from the end of setup to the last result of the batch.
    pub makespan: u64,
    /// HT: cycles of one full iteration; LL: cycles of one inference.
    pub cycle_time: u64,
    /// Cycles until the first sample's result is stored.
    pub first_batch_latency: u64,
    pub utilization: Vec<[f64; 5]>,
}

/// Times a schedule over `batch` samples (HT) or one inference (LL).
pub fn time_schedule(s: &Schedule, cfg: &HardwareConfig, batch: usize) -> Result<TimingSummary> {
    let ags = &s.ags.infos;
    match s.mode {
        Mode::Ht => {
            let batch = batch.max(1);
            let full = simulate_timing(&s.programs, ags, cfg)?;
            let run = simulate_timing(&ht_batch_programs(s, batch), ags, cfg)?;
            // barrier 0 ends setup; each iteration adds two
            let start = run.barrier_times.first().copied().unwrap_or(0);
            let fill = s.groups.len().max(1);
            let first = run.barrier_times.get(2 * fill).copied().unwrap_or(run.makespan);
            Ok(TimingSummary {
                makespan: run.makespan - start,
                cycle_time: full.makespan,
                first_batch_latency: first - start,
                utilization: run.utilization(),
            })
        }
        Mode::Ll => {
            let run = simulate_timing(&concat(&[&s.setup, &s.programs]), ags, cfg)?;
            let start = run.barrier_times.first().copied().unwrap_or(0);
            let t = run.makespan - start;
            Ok(TimingSummary { makespan: t * batch.max(1) as u64, cycle_time: t, first_batch_latency: t, utilization: run.utilization() })
        }
    }
}

/// Network outputs per sample, pixel-major words per output layer.
pub type Outputs = Vec<BTreeMap<LayerId, Vec<i32>>>;

fn input_words(sample: &[f32]) -> Vec<i32> {
    sample.iter().map(|&v| quantize_activation(v)).collect()
}

fn read_outputs(m: &Machine, s: &Schedule) -> Result<BTreeMap<LayerId, Vec<i32>>> {
    let mut out = BTreeMap::new();
    for (&l, &addr) in &s.memory.outputs {
        out.insert(l, m.global.read(addr, s.memory.output_bytes[&l], None, 0)?.to_vec());
    }
    Ok(out)
}

/// Runs the schedule functionally on every sample (pixel-major floats).
/// HT runs every pipeline iteration over zero-initialized memory, feeding
/// zeros once the batch is exhausted; LL runs each sample separately and
/// treats any read of unwritten memory as an error.
pub fn run_functional(s: &Schedule, cfg: &HardwareConfig, engine: &MvmEngine, samples: &[Vec<f32>]) -> Result<Outputs> {
    let ags = &s.ags.infos;
    let setup_order = simulate_timing(&s.setup, ags, cfg)?.commit_order(&s.setup);
    let order = simulate_timing(&s.programs, ags, cfg)?.commit_order(&s.programs);
    match s.mode {
        Mode::Ht => {
            let group = s.group_of();
            let mut m = Machine::new(cfg, s.memory.global_used, true);
            m.run(&s.setup, &setup_order, engine)?;
            let mut outs: Outputs = vec![BTreeMap::new(); samples.len()];
            let zeros = vec![0.0; (s.memory.input_bytes / 4) as usize];
            for i in 0..samples.len() + s.groups.len().saturating_sub(1) {
                m.global.write(s.memory.input, &input_words(samples.get(i).unwrap_or(&zeros)))?;
                m.run(&s.programs, &order, engine)?;
                for (l, v) in read_outputs(&m, s)? {
                    let g = group[&l];
                    if i >= g && i - g < samples.len() {
                        outs[i - g].insert(l, v);
                    }
                }
            }
            Ok(outs)
        }
        Mode::Ll => samples
            .iter()
            .map(|x| {
                let mut m = Machine::new(cfg, s.memory.global_used, false);
                m.run(&s.setup, &setup_order, engine)?;
                m.global.write(s.memory.input, &input_words(x))?;
                m.run(&s.programs, &order, engine)?;
                read_outputs(&m, s)
            })
            .collect(),
    }
}

/// Dynamic-energy work units per component (see [`crate::hw::POWER_COMPONENTS`]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkCounts {
    pub array_activations: u64,
    pub vec_elems: u64,
    pub local_bytes: u64,
    pub global_bytes: u64,
    pub send_bytes: u64,
}

pub fn work_counts(programs: &[CoreProgram], ags: &[AgInfo], cfg: &HardwareConfig) -> WorkCounts {
    let ipl = cfg.images_per_logical() as u64;
    let mut w = WorkCounts::default();
    for inst in programs.iter().flat_map(|p| &p.instrs) {
        match inst.op {
            Op::Mvm { ag, .. } => w.array_activations += ags[ag as usize].arrays as u64 * ipl,
            Op::Vec { len, .. } => w.vec_elems += len / 4,
            Op::Copy { len, .. } | Op::Write { len, .. } => w.local_bytes += len,
            Op::Load { len, .. } | Op::Store { len, .. } => w.global_bytes += len,
            Op::Send { len, .. } => w.send_bytes += len,
            Op::Recv { .. } => {}
        }
    }
    w
}

/// Energy in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub dynamic_pj: f64,
    pub leakage_pj: f64,
    pub total_pj: f64,
}

/// Dynamic energy sums per-unit costs over the work; leakage is static
/// power over the makespan, per core for core components and once for
/// global memory.
pub fn estimate_energy(work: &WorkCounts, makespan: u64, cfg: &HardwareConfig) -> Result<Energy> {
    let power = cfg.power.as_ref().ok_or(Error::MissingPowerData)?;
    let get = |k: &str| power.get(k).copied().ok_or(Error::MissingPowerData);
    let units = [
        ("pimfu", work.array_activations),
        ("vfu", work.vec_elems),
        ("local_mem", work.local_bytes),
        ("global_mem", work.global_bytes),
        ("noc", work.send_bytes),
    ];
    let mut dynamic = 0.0;
    let mut leak_mw = 0.0;
    for (k, n) in units {
        let e = get(k)?;
        dynamic += e.dynamic_pj * n as f64;
        leak_mw += e.leakage_mw * if k == "global_mem" { 1.0 } else { cfg.total_cores() as f64 };
    }
    // mW times ns is pJ
    let leakage = leak_mw * makespan as f64 * cfg.timing.cycle_ns;
    Ok(Energy { dynamic_pj: dynamic, leakage_pj: leakage, total_pj: dynamic + leakage })
}

/// Checks that within the compute phase of an HT iteration no layer reads
/// data written in that same phase by a layer of another group: layers in
/// different groups only communicate across iteration boundaries.
pub fn check_pipeline(s: &Schedule) -> Vec<String> {
    let group = s.group_of();
    let group_of = |tag: u32| if tag == NO_LAYER { None } else { group.get(&(tag as LayerId)).copied() };
    let compute: Vec<&[Inst]> = s.programs.iter().map(|p| &p.instrs[..p.barriers.first().copied().unwrap_or(p.len())]).collect();
    // last writer per local word, and the writer of the data each pending
    // transfer carries, walked in pairing order across cores
    let mut writers: Vec<HashMap<u64, u32>> = vec![HashMap::new(); compute.len()];
    let mut carried: HashMap<(usize, usize), VecDeque<Option<u32>>> = HashMap::new();
    let mut cursor = vec![0usize; compute.len()];
    let mut problems = Vec::new();
    let words = |addr: u64, len: u64| addr / 4..(addr + len).div_ceil(4);
    loop {
        let mut progressed = false;
        for c in 0..compute.len() {
            while let Some(inst) = compute[c].get(cursor[c]) {
                let mine = group_of(inst.layer);
                let mut sources: Vec<u32> = inst
                    .op
                    .reads()
                    .iter()
                    .filter(|a| a.space == Space::Local)
                    .flat_map(|a| words(a.addr, a.len).filter_map(|w| writers[c].get(&w).copied()).collect::<Vec<_>>())
                    .collect();
                match inst.op {
                    Op::Send { peer, .. } => carried.entry((c, peer as usize)).or_default().push_back(sources.first().copied()),
                    Op::Recv { peer, .. } => match carried.get_mut(&(peer as usize, c)).and_then(|q| q.pop_front()) {
                        Some(t) => sources.extend(t),
                        None => break,
                    },
                    _ => {}
                }
                if let Some(t) = sources.into_iter().find(|&t| group_of(t) != mine) {
                    problems.push(format!("core {c} instr {}: layer {} uses data of layer {t} from another group", cursor[c], inst.layer));
                }
                for a in inst.op.writes(&s.ags.infos) {
                    if a.space == Space::Local {
                        for w in words(a.addr, a.len) {
                            writers[c].insert(w, inst.layer);
                        }
                    }
                }
                cursor[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            return problems;
        }
    }
}

/// Summary of one compilation and simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model: String,
    pub hardware: String,
    pub mode: Mode,
    pub batch: usize,
    pub makespan_cycles: u64,
    pub cycle_time_cycles: u64,
    pub first_batch_latency_cycles: u64,
    pub throughput_samples_per_s: f64,
    pub crossbar_utilization: f64,
    pub global_access_bytes: u64,
    pub inter_core_bytes: u64,
    pub local_high_water: Vec<u64>,
    pub core_utilization: Vec<[f64; 5]>,
    pub energy: Option<Energy>,
}

impl ProfileReport {
    pub fn build(model: &str, s: &Schedule, cfg: &HardwareConfig, batch: usize) -> Result<Self> {
        let t = time_schedule(s, cfg, batch)?;
        let work = work_counts(&s.programs, &s.ags.infos, cfg);
        let placed: usize = s.ags.infos.iter().map(|a| a.arrays).sum();
        let total = cfg.total_cores() * cfg.derive().logical_arrays_per_core;
        let energy = match cfg.power {
            Some(_) => Some(estimate_energy(&work_counts(&ht_or_ll_run(s, batch), &s.ags.infos, cfg), t.makespan, cfg)?),
            None => None,
        };
        Ok(ProfileReport {
            model: model.to_string(),
            hardware: cfg.name.clone(),
            mode: s.mode,
            batch,
            makespan_cycles: t.makespan,
            cycle_time_cycles: t.cycle_time,
            first_batch_latency_cycles: t.first_batch_latency,
            throughput_samples_per_s: if t.cycle_time == 0 { 0.0 } else { 1e9 / (t.cycle_time as f64 * cfg.timing.cycle_ns) },
            crossbar_utilization: if total == 0 { 0.0 } else { placed as f64 / total as f64 },
            global_access_bytes: work.global_bytes,
            inter_core_bytes: work.send_bytes,
            local_high_water: s.high_water.clone(),
            core_utilization: t.utilization,
            energy,
        })
    }

    /// `key,value` lines; per-core fields are indexed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        row("model", self.model.clone());
        row("hardware", self.hardware.clone());
        row("mode", format!("{:?}", self.mode).to_lowercase());
        row("batch", self.batch.to_string());
        row("makespan_cycles", self.makespan_cycles.to_string());
        row("cycle_time_cycles", self.cycle_time_cycles.to_string());
        row("first_batch_latency_cycles", self.first_batch_latency_cycles.to_string());
        row("throughput_samples_per_s", format!("{:.3}", self.throughput_samples_per_s));
        row("crossbar_utilization", format!("{:.6}", self.crossbar_utilization));
        row("global_access_bytes", self.global_access_bytes.to_string());
        row("inter_core_bytes", self.inter_core_bytes.to_string());
        for (c, h) in self.local_high_water.iter().enumerate() {
            row(&format!("local_high_water.{c}"), h.to_string());
        }
        for (c, u) in self.core_utilization.iter().enumerate() {
            for comp in Component::ALL {
                row(&format!("utilization.{c}.{}", comp.label()), format!("{:.6}", u[comp as usize]));
            }
        }
        if let Some(e) = self.energy {
            row("energy_dynamic_pj", format!("{:.3}", e.dynamic_pj));
            row("energy_leakage_pj", format!("{:.3}", e.leakage_pj));
            row("energy_total_pj", format!("{:.3}", e.total_pj));
        }
        s
    }
}

/// The programs whose work a batch actually executes.
fn ht_or_ll_run(s: &Schedule, batch: usize) -> Vec<CoreProgram> {
    match s.mode {
        Mode::Ht => ht_batch_programs(s, batch.max(1)),
        Mode::Ll => (0..batch.max(1)).flat_map(|_| s.programs.iter().cloned()).collect(),
    }
}

/// Parses the `key,value` report back into rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines();
    if lines.next() != Some("field,value") {
        return Err(Error::Format("report must start with a `field,value` header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| Error::Format(format!("bad report line `{l}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leakage_scales_with_makespan() {
        let cfg = HardwareConfig::preset("desk_tiny").unwrap();
        let w = WorkCounts { array_activations: 10, vec_elems: 100, local_bytes: 64, global_bytes: 64, send_bytes: 16 };
        let a = estimate_energy(&w, 1000, &cfg).unwrap();
        let b = estimate_energy(&w, 2000, &cfg).unwrap();
        assert_eq!(a.dynamic_pj, b.dynamic_pj);
        assert!((b.leakage_pj - 2.0 * a.leakage_pj).abs() < 1e-9);
        let z = estimate_energy(&WorkCounts::default(), 0, &cfg).unwrap();
        assert_eq!(z.total_pj, 0.0);
        let mut bare = cfg.clone();
        bare.power = None;
        assert!(matches!(estimate_energy(&w, 1, &bare), Err(Error::MissingPowerData)));
    }

    #[test]
    fn concat_offsets_barriers() {
        let mut a = CoreProgram::new(0);
        a.push(Op::Write { dst: 0, len: 4, imm: 0 }, 0);
        a.barrier();
        a.push(Op::Write { dst: 0, len: 4, imm: 1 }, 0);
        let both = concat(&[&[a.clone()], &[a]]);
        assert_eq!(both[0].barriers, vec![1, 2, 3]);
        assert_eq!(both[0].len(), 4);
    }
}
